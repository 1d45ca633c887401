"""Uniform periodic grid on the unit torus T^N (N = 1 or 2).

Scalar fields are numpy arrays of shape ``grid.shape``; edge fields are
arrays of shape ``(dim, *grid.shape)`` where component ``k`` at index ``x``
lives on the edge between cell ``x`` and cell ``x + e_k``.

The gradient is a forward difference and the divergence the matching
backward difference, so ``divergence = -gradient^T`` holds exactly under
the cell and edge inner products (both weighted by ``h**dim``).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

PROFILES = ("cosine_bump", "triangle")


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if int(self.n) != self.n or self.n < 4:
            raise ValueError(f"points_per_dim must be an integer >= 4, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def centers(self) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinates, one array of shape ``self.shape`` per axis."""
        x = (np.arange(self.n) + 0.5) * self.h
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check_scalar(self, f: np.ndarray, name: str = "field") -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise GridMismatchError(f"{name} has shape {f.shape}, grid expects {self.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"{name} contains non-finite values")
        return f

    def check_edge(self, F: np.ndarray, name: str = "edge field") -> np.ndarray:
        F = np.asarray(F, dtype=float)
        if F.shape != (self.dim,) + self.shape:
            raise GridMismatchError(
                f"{name} has shape {F.shape}, grid expects {(self.dim,) + self.shape}"
            )
        if not np.all(np.isfinite(F)):
            raise ValueError(f"{name} contains non-finite values")
        return F


def gradient(grid: GridSpec, f: np.ndarray) -> np.ndarray:
    f = grid.check_scalar(f)
    return np.stack([(np.roll(f, -1, axis=k) - f) / grid.h for k in range(grid.dim)])


def divergence(grid: GridSpec, F: np.ndarray) -> np.ndarray:
    F = grid.check_edge(F)
    out = np.zeros(grid.shape)
    for k in range(grid.dim):
        out += (F[k] - np.roll(F[k], 1, axis=k)) / grid.h
    return out


def integrate(grid: GridSpec, f: np.ndarray) -> float:
    f = grid.check_scalar(f)
    return float(np.sum(f) * grid.cell_volume)


def inner_product(grid: GridSpec, f: np.ndarray, g: np.ndarray) -> float:
    f = grid.check_scalar(f)
    g = grid.check_scalar(g)
    return float(np.sum(f * g) * grid.cell_volume)


def edge_inner_product(grid: GridSpec, F: np.ndarray, G: np.ndarray) -> float:
    F = grid.check_edge(F)
    G = grid.check_edge(G)
    return float(np.sum(F * G) * grid.cell_volume)


def edge_norm_sq(grid: GridSpec, F: np.ndarray) -> float:
    return edge_inner_product(grid, F, F)


# --------------------------------------------------------------------------
# mollifier


def _profile_values(profile: str, r: np.ndarray) -> np.ndarray:
    # r is the distance already divided by eta; support is r < 1
    if profile == "cosine_bump":
        vals = 1.0 + np.cos(np.pi * r)
    elif profile == "triangle":
        vals = 1.0 - r
    else:
        raise ValueError(f"unknown mollifier profile {profile!r}; expected one of {PROFILES}")
    return np.where(r < 1.0, vals, 0.0)


def continuum_c0(profile: str, dim: int) -> float:
    """||grad rho||_{L^1} of the unit-scale continuum profile."""
    if profile == "cosine_bump":
        if dim == 1:
            return 2.0
        return 1.0 / (0.5 - 2.0 / np.pi**2)
    if profile == "triangle":
        return 2.0 if dim == 1 else 3.0
    raise ValueError(f"unknown mollifier profile {profile!r}")


@dataclass(frozen=True)
class MollifierKernel:
    """Sampled, renormalised mollifier rho_eta on a periodic stencil.

    ``weights`` has shape ``(2*radius+1,)*dim`` with the centre at index
    ``radius``; ``sum(weights) * h**dim == 1``.
    """

    eta: float
    profile_name: str
    grid: GridSpec
    radius: int
    weights: np.ndarray = field(repr=False)
    c0_discrete: float
    c0_continuum: float
    degenerate: bool = False

    @property
    def grad_l1(self) -> float:
        """Discrete ||grad_h rho_eta||_{L^1}; equals c0_discrete / eta."""
        return self.c0_discrete / self.eta

    def offsets(self):
        """Yield ``(offset_tuple, weight)`` for every nonzero stencil entry, in fixed order."""
        R = self.radius
        for idx in itertools.product(range(2 * R + 1), repeat=self.grid.dim):
            w = self.weights[idx]
            if w != 0.0:
                yield tuple(i - R for i in idx), w


def _gradient_l1_of_stencil(weights: np.ndarray, h: float) -> float:
    # pad by one so differences across the stencil boundary are counted
    padded = np.pad(weights, 1)
    total = 0.0
    for k in range(weights.ndim):
        total += np.sum(np.abs(np.diff(padded, axis=k)))
    return float(total * h ** (weights.ndim - 1))


def build_mollifier(eta: float, profile: str, grid: GridSpec) -> MollifierKernel:
    """Sample ``profile`` at scale ``eta`` onto ``grid`` and renormalise to unit mass.

    When ``eta <= h`` the kernel cannot be resolved and degenerates to the
    discrete delta (a warning is logged and ``degenerate`` is set).
    """
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    if eta >= 0.5:
        raise ValueError(f"eta must be < 1/2 so the stencil fits the torus, got {eta}")
    if profile not in PROFILES:
        raise ValueError(f"unknown mollifier profile {profile!r}; expected one of {PROFILES}")
    h = grid.h
    dV = grid.cell_volume
    if eta <= h:
        log.warning("eta=%g <= h=%g: mollifier under-resolved, using discrete delta", eta, h)
        radius = 0
        weights = np.full((1,) * grid.dim, 1.0 / dV)
        degenerate = True
    else:
        radius = int(math.ceil(eta / h)) - 1
        d = np.arange(-radius, radius + 1) * h
        mesh = np.meshgrid(*([d] * grid.dim), indexing="ij")
        r = np.sqrt(sum(c * c for c in mesh)) / eta
        weights = _profile_values(profile, r)
        weights = weights / (weights.sum() * dV)
        degenerate = False
    if 2 * radius + 1 > grid.n:
        raise ValueError(f"mollifier stencil radius {radius} too wide for n={grid.n}")
    grad_l1 = _gradient_l1_of_stencil(weights, h)
    return MollifierKernel(
        eta=float(eta),
        profile_name=profile,
        grid=grid,
        radius=radius,
        weights=weights,
        c0_discrete=eta * grad_l1,
        c0_continuum=continuum_c0(profile, grid.dim),
        degenerate=degenerate,
    )


def delta_kernel(grid: GridSpec, profile: str = "cosine_bump") -> MollifierKernel:
    """The identity kernel (the eta -> 0 limit on this grid)."""
    return build_mollifier(grid.h, profile, grid)


def convolve(kernel: MollifierKernel, f: np.ndarray) -> np.ndarray:
    """Periodic convolution ``h^N * sum_y rho(y) f(x - y)``."""
    grid = kernel.grid
    f = grid.check_scalar(f)
    out = np.zeros(grid.shape)
    dV = grid.cell_volume
    for off, w in kernel.offsets():
        out += (w * dV) * np.roll(f, off, axis=tuple(range(grid.dim)))
    return out


def convolve_edges(kernel: MollifierKernel, F: np.ndarray) -> np.ndarray:
    F = kernel.grid.check_edge(F)
    return np.stack([convolve(kernel, F[k]) for k in range(kernel.grid.dim)])


# --------------------------------------------------------------------------
# Fourier multipliers (for the real-to-complex transform over all axes)


def kernel_symbol(kernel: MollifierKernel) -> np.ndarray:
    """Multiplier of :func:`convolve` on the ``rfftn`` grid; real because the kernel is even."""
    grid = kernel.grid
    K = np.zeros(grid.shape)
    dV = grid.cell_volume
    for off, w in kernel.offsets():
        K[tuple(o % grid.n for o in off)] += w * dV
    return np.fft.rfftn(K).real


def neg_laplacian_symbol(grid: GridSpec) -> np.ndarray:
    """Multiplier of ``-divergence(gradient(.))`` on the ``rfftn`` grid."""
    n = grid.n
    full = (2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(n) / n)) / grid.h**2
    half = full[: n // 2 + 1]
    if grid.dim == 1:
        return half.copy()
    return full[:, None] + half[None, :]


# --------------------------------------------------------------------------
# sparse operator forms (flattened row-major index)


def gradient_matrices(grid: GridSpec) -> list[sp.csr_matrix]:
    """One forward-difference matrix per axis, acting on flattened fields."""
    n = grid.n
    eye = sp.identity(n, format="csr")
    shift = sp.csr_matrix((np.ones(n), (np.arange(n), (np.arange(n) + 1) % n)), shape=(n, n))
    d1 = (shift - eye) / grid.h
    if grid.dim == 1:
        return [d1.tocsr()]
    return [sp.kron(d1, eye, format="csr"), sp.kron(eye, d1, format="csr")]


def convolution_matrix(kernel: MollifierKernel) -> sp.csr_matrix:
    grid = kernel.grid
    idx = np.arange(grid.size).reshape(grid.shape)
    rows, cols, vals = [], [], []
    dV = grid.cell_volume
    for off, w in kernel.offsets():
        # (C f)(x) += w dV f(x - off)
        src = np.roll(idx, off, axis=tuple(range(grid.dim)))
        rows.append(idx.ravel())
        cols.append(src.ravel())
        vals.append(np.full(grid.size, w * dV))
    C = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    C.sum_duplicates()
    return C
