"""Coupling matrix A, its norms, positivity certificates, presets and mobilities."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize

SYM_TOL = 1e-12


@dataclass(frozen=True)
class CouplingMatrix:
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValueError(f"coupling matrix must be square m x m, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("coupling matrix has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.entries + self.entries.T)

    def is_symmetric(self, tol: float = SYM_TOL) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.entries))))
        return bool(np.max(np.abs(self.entries - self.entries.T)) <= tol * scale)

    def __repr__(self):
        return f"CouplingMatrix({self.entries.tolist()})"

    def __eq__(self, other):
        return isinstance(other, CouplingMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())


def as_matrix(A) -> CouplingMatrix:
    return A if isinstance(A, CouplingMatrix) else CouplingMatrix(A)


# --------------------------------------------------------------------------
# linear algebra kernels (small m)


def jacobi_eigenvalues(S: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(S, dtype=float)
    m = a.shape[0]
    if m == 1:
        return a.diagonal().copy()
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(a.diagonal())))
        if off <= tol * scale * 1e-3:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(m)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
    return np.sort(a.diagonal())


def lambda_min_sym(B: np.ndarray) -> float:
    B = np.asarray(B, dtype=float)
    return float(jacobi_eigenvalues(0.5 * (B + B.T))[0])


def matrix_norm(A, tol: float = 1e-12, max_iter: int = 10_000, seed: int = 12345) -> float:
    """Spectral norm sup_{|xi|=1} |A xi| by power iteration on A^T A.

    Falls back to the Jacobi eigenvalues of A^T A if the iteration has not
    settled after ``max_iter`` sweeps (tiny spectral gap).
    """
    a = as_matrix(A).entries
    ata = a.T @ a
    if not np.any(ata):
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(a.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = ata @ x
        lam_new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # started in the null space; restart on a fresh direction
            x = rng.standard_normal(a.shape[0])
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    else:
        lam = float(jacobi_eigenvalues(ata)[-1])
    # Rayleigh quotient never exceeds the top eigenvalue; keep the safer upper value
    lam = max(lam, float(np.linalg.norm(ata @ x)))
    return math.sqrt(lam)


def inf_norm(A) -> float:
    a = as_matrix(A).entries
    return float(np.max(np.sum(np.abs(a), axis=1)))


def delta0_direct(A) -> float:
    """lambda_min of the symmetric part of A. A value <= 0 means the direct condition fails."""
    return lambda_min_sym(as_matrix(A).entries)


# --------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class PositivityCertificate:
    kind: str  # "direct", "scaled" or "none"
    delta0: float
    L: np.ndarray | None = None
    R: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.kind != "none"

    def verify(self, A, tol: float = 1e-10) -> bool:
        a = as_matrix(A).entries
        if self.kind == "none":
            return True
        Lm = np.ones(a.shape[0]) if self.L is None else self.L
        Rm = np.ones(a.shape[0]) if self.R is None else self.R
        val = lambda_min_sym(np.diag(Lm) @ a @ np.diag(Rm))
        return self.delta0 > 0 and abs(val - self.delta0) <= tol * max(1.0, abs(val))


def direct_certificate(A) -> PositivityCertificate:
    d = delta0_direct(A)
    m = as_matrix(A).m
    if d > 0:
        return PositivityCertificate("direct", d, np.ones(m), np.ones(m))
    return PositivityCertificate("none", d)


def _scaled_objective(a: np.ndarray, logl: np.ndarray, logr: np.ndarray) -> float:
    return lambda_min_sym(np.exp(logl)[:, None] * a * np.exp(logr)[None, :])


def delta0_scaled_search(
    A,
    n_starts: int = 8,
    max_iter: int = 4000,
    seed: int = 0,
    right_identity: bool = False,
    log_bound: float = 6.0,
) -> PositivityCertificate:
    """Search positive diagonal L, R maximising lambda_min(sym(L A R)).

    L[0] = R[0] = 1 fixes the scaling freedom and the other log-weights are
    boxed to ``[-log_bound, log_bound]``. Bounded Nelder-Mead runs from
    ``n_starts`` starts (the first is L = R = I). With ``right_identity``
    only L is searched (the R = I case of the weighted entropy estimate).
    """
    a = as_matrix(A).entries
    m = a.shape[0]
    if m > 4:
        raise ValueError("scaled search is limited to m <= 4")
    rng = np.random.default_rng(seed)
    n_free = 2 * (m - 1) if not right_identity else (m - 1)

    def unpack(x):
        logl = np.concatenate([[0.0], x[: m - 1]])
        logr = np.zeros(m) if right_identity else np.concatenate([[0.0], x[m - 1 :]])
        return logl, logr

    def loss(x):
        return -_scaled_objective(a, *unpack(x))

    best_val, best_x = -math.inf, np.zeros(n_free)
    for start in range(n_starts if n_free else 1):
        x0 = np.zeros(n_free) if start == 0 else rng.uniform(-2.0, 2.0, n_free)
        if n_free:
            res = optimize.minimize(
                loss, x0, method="Nelder-Mead", bounds=[(-log_bound, log_bound)] * n_free,
                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": max_iter},
            )
            x, f = res.x, -float(res.fun)
        else:
            x, f = x0, -loss(x0)
        if f > best_val:
            best_val, best_x = f, np.array(x, dtype=float)

    logl, logr = unpack(best_x)
    L, R = np.exp(logl), np.exp(logr)
    # recompute so the stored value is exactly reproducible from L, R
    val = lambda_min_sym(np.diag(L) @ a @ np.diag(R))
    if val <= 0:
        return PositivityCertificate("none", val, L, R)
    return PositivityCertificate("scaled", val, L, R)


# --------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class SeawaterParams:
    """Two-layer aquifer. ``eps0 = (gamma_s - gamma_f) / gamma_s`` with the
    specific weights of salt and fresh water; only the ratio enters."""

    eps0: float

    def __post_init__(self):
        if not 0.0 < self.eps0 < 1.0:
            raise ValueError(f"eps0 must lie in (0,1), got {self.eps0}")

    @property
    def nu(self) -> float:
        return 1.0 - self.eps0


def seawater_matrix(p: SeawaterParams | float) -> tuple[CouplingMatrix, PositivityCertificate]:
    if not isinstance(p, SeawaterParams):
        p = SeawaterParams(float(p))
    nu = p.nu
    A = CouplingMatrix([[nu, nu], [nu, 1.0]])
    return A, direct_certificate(A)


def identity_matrix(m: int = 1) -> CouplingMatrix:
    return CouplingMatrix(np.eye(m))


def skew_example_matrix(a: float = 3.0) -> CouplingMatrix:
    """[[1, -a], [2a, 1]]: symmetric part indefinite for |a| > 2, yet
    sym(L A) = diag(2, 1) with L = diag(2, 1)."""
    return CouplingMatrix([[1.0, -a], [2.0 * a, 1.0]])


# --------------------------------------------------------------------------
# scalar mobilities


def _root_gap(a):
    a = np.asarray(a, dtype=float)
    return np.maximum(0.0, np.minimum(a, np.sqrt(np.abs(a - 1.0))))


@dataclass(frozen=True)
class MobilityFunction:
    name: str
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    growth_C: float = 1.0
    lower_c: float = 1.0
    a0: float = 0.5
    # points where f is not smooth; used to split quadrature
    kinks: tuple[float, ...] = ()

    def __call__(self, a):
        return self.func(a)

    @property
    def is_identity(self) -> bool:
        return self.name == "identity"

    def validate(self, a_max: float = 50.0, samples: int = 20_001) -> None:
        a = np.linspace(0.0, a_max, samples)
        f = np.asarray(self.func(a), dtype=float)
        if not np.all(np.isfinite(f)):
            raise ValueError(f"mobility {self.name!r} returns non-finite values")
        if np.any(f < 0):
            raise ValueError(f"mobility {self.name!r} is negative somewhere on [0, {a_max}]")
        if np.any(f > self.growth_C * (1.0 + a) + 1e-12):
            raise ValueError(f"mobility {self.name!r} violates f(a) <= C(1+|a|) with C={self.growth_C}")
        low = a <= self.a0
        if np.any(f[low] < self.lower_c * a[low] - 1e-12):
            raise ValueError(f"mobility {self.name!r} violates f(a) >= c a on [0, {self.a0}]")
        jumps = np.abs(np.diff(f))
        if np.max(jumps) > 50.0 * (a[1] - a[0]) * max(1.0, self.growth_C) + 0.05:
            raise ValueError(f"mobility {self.name!r} looks discontinuous")
        for upper in (self.a0 + 1.0, a_max):
            pts = [k for k in self.kinks if self.a0 < k < upper]
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                try:
                    val, _ = integrate.quad(
                        lambda s: 1.0 / float(self.func(s)), self.a0, upper, points=pts or None, limit=200
                    )
                except (integrate.IntegrationWarning, ZeroDivisionError) as exc:
                    raise ValueError(
                        f"mobility {self.name!r}: integral of 1/f over [{self.a0}, {upper}] does not converge"
                    ) from exc
            if not math.isfinite(val):
                raise ValueError(f"mobility {self.name!r}: 1/f not integrable on [{self.a0}, {upper}]")


IDENTITY_MOBILITY = MobilityFunction("identity", lambda a: np.asarray(a, dtype=float), 1.0, 1.0, 1.0)
ROOT_GAP_MOBILITY = MobilityFunction(
    "root_gap", _root_gap, 1.0, 1.0, 0.5, kinks=((math.sqrt(5.0) - 1.0) / 2.0, 1.0, (math.sqrt(5.0) + 1.0) / 2.0)
)

MOBILITIES = {"identity": IDENTITY_MOBILITY, "root_gap": ROOT_GAP_MOBILITY}


def tabulated_mobility(a_nodes, f_nodes, growth_C: float = 1.0, lower_c: float = 1.0, a0: float = 0.5) -> MobilityFunction:
    """Piecewise-linear mobility through the given nodes, held constant outside them."""
    a_nodes = np.asarray(a_nodes, dtype=float)
    f_nodes = np.asarray(f_nodes, dtype=float)
    if a_nodes.ndim != 1 or a_nodes.shape != f_nodes.shape or np.any(np.diff(a_nodes) <= 0):
        raise ValueError("tabulated mobility needs strictly increasing nodes with matching values")

    def f(a):
        a = np.asarray(a, dtype=float)
        return np.interp(a, a_nodes, f_nodes, left=f_nodes[0], right=f_nodes[-1])

    mob = MobilityFunction("custom-tabulated", f, growth_C, lower_c, a0, kinks=tuple(a_nodes.tolist()))
    mob.validate(a_max=float(a_nodes[-1]))
    return mob


def mobility_eval(f: MobilityFunction, a):
    return f(a)
