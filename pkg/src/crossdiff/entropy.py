"""Entropy densities, the truncation T^{eps,ell}, edge mobilities and state functionals.

All densities carry the additive constant 1/e, so the unregularised
entropy ``psi(a) = 1/e + a ln a`` is nonnegative with minimum 0 at a = 1/e.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import grid as tg
from .coefficients import CouplingMatrix, MobilityFunction, as_matrix

INV_E = math.exp(-1.0)
KINDS = ("psi", "psi_eps_ell", "psi_0_ell", "mobility_quadrature")


def truncate(a, eps: float, ell: float):
    """Clamp into [eps, ell]."""
    if not eps < ell:
        raise ValueError(f"truncation needs eps < ell, got eps={eps}, ell={ell}")
    out = np.clip(a, eps, ell)
    return float(out) if np.ndim(out) == 0 else out


def _log_increment(lo, hi):
    # ln(hi) - ln(lo) for 0 < lo <= hi without cancellation
    return np.log1p((hi - lo) / lo)


def dpsi_difference(a, b, eps: float, ell: float):
    """Psi'_{eps,ell}(b) - Psi'_{eps,ell}(a), integrated piecewise as int_a^b ds / T(s)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    low = (np.minimum(hi, eps) - np.minimum(lo, eps)) / eps
    x1 = np.clip(lo, eps, ell)
    x2 = np.clip(hi, eps, ell)
    mid = _log_increment(x1, x2)
    if math.isinf(ell):
        high = np.zeros_like(lo)
    else:
        high = (np.maximum(hi, ell) - np.maximum(lo, ell)) / ell
    return np.sign(b - a) * (low + mid + high)


def edge_mobility(a, b, eps: float, ell: float):
    """Mobility on the edge between values ``a`` and ``b``.

    Returns ``(b - a) / (Psi'(b) - Psi'(a))`` so that
    ``mobility * (Psi'(b) - Psi'(a)) == b - a``; on the diagonal it is
    ``T(a)``. Always lies in [eps, ell].
    """
    if not 0 < eps < ell:
        raise ValueError(f"edge mobility needs 0 < eps < ell, got eps={eps}, ell={ell}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    d = dpsi_difference(lo, hi, eps, ell)
    diag = np.clip(0.5 * (lo + hi), eps, ell)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(d > 1e-14, (hi - lo) / np.where(d > 1e-14, d, 1.0), diag)
    q = np.clip(q, eps, ell)
    return float(q) if q.ndim == 0 else q


@dataclass(frozen=True)
class EntropyFunction:
    """One of the entropy densities; call it to evaluate pointwise."""

    kind: str
    eps: float = 0.0
    ell: float = math.inf
    mobility: MobilityFunction | None = None
    _table: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown entropy kind {self.kind!r}")
        if self.kind in ("psi_eps_ell", "mobility_quadrature"):
            if not 0 < self.eps < self.ell:
                raise ValueError(f"{self.kind} needs 0 < eps < ell, got eps={self.eps}, ell={self.ell}")
        if self.kind == "psi_0_ell" and not self.ell > 0:
            raise ValueError("psi_0_ell needs ell > 0")
        if self.kind == "mobility_quadrature" and (self.mobility is None or self._table is None):
            raise ValueError("use mobility_entropy_build() to construct quadrature entropies")

    # -- pointwise --------------------------------------------------------

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        kind = self.kind
        if kind == "psi_eps_ell":
            out = _psi_eps_ell(a, self.eps, self.ell)
        elif kind == "psi":
            out = _psi_0_ell(a, math.inf)
        elif kind == "psi_0_ell":
            out = _psi_0_ell(a, self.ell)
        else:
            out = self._table_eval(a, 0)
        return float(out) if out.ndim == 0 else out

    def derivative(self, a):
        a = np.asarray(a, dtype=float)
        if self.kind == "mobility_quadrature":
            out = self._table_eval(a, 1)
        else:
            eps = self.eps
            ell = self.ell
            with np.errstate(divide="ignore", invalid="ignore"):
                mid = 1.0 + np.log(a)
            if eps > 0:
                out = np.where(a <= eps, a / eps + math.log(eps), mid)
            else:
                out = np.where(a > 0, mid, np.where(a == 0, -np.inf, np.nan))
            if not math.isinf(ell):
                out = np.where(a > ell, a / ell + math.log(ell), out)
        return float(out) if out.ndim == 0 else out

    def second_derivative(self, a):
        """1 / T(a) (or 1 / T(f(a)) for a quadrature entropy)."""
        return 1.0 / self.mobility_of(a)

    def mobility_of(self, a):
        """T^{eps,ell}(a), or T^{eps,ell}(f(a)) for a general scalar mobility f."""
        if self.kind == "mobility_quadrature":
            return np.clip(self.mobility(a), self.eps, self.ell)
        lo = self.eps if self.eps > 0 else -np.inf
        return np.clip(a, lo, self.ell)

    # -- edge mobility -----------------------------------------------------

    def edge_mobility(self, a, b):
        if self.kind == "psi_eps_ell":
            return edge_mobility(a, b, self.eps, self.ell)
        if self.kind != "mobility_quadrature":
            raise ValueError(f"edge mobility needs a regularised entropy, got {self.kind}")
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        d = self._table_eval(hi, 1) - self._table_eval(lo, 1)
        diag = self.mobility_of(0.5 * (lo + hi))
        close = (hi - lo) <= 1e-9 * np.maximum(1.0, np.abs(lo))
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(close | (d <= 0), diag, (hi - lo) / np.where(d > 0, d, 1.0))
        return np.clip(q, self.eps, self.ell)

    # -- quadrature table --------------------------------------------------

    def _table_eval(self, a, order: int):
        spline_psi, spline_dpsi, a_lo, a_hi, slope_lo, slope_hi = self._table
        out = spline_psi(a) if order == 0 else spline_dpsi(a)
        # quadratic extension of Psi beyond the table (Psi'' frozen at the ends)
        below = a < a_lo
        above = a > a_hi
        if np.any(below) or np.any(above):
            out = np.array(out, dtype=float)
            for mask, edge, curv in ((below, a_lo, slope_lo), (above, a_hi, slope_hi)):
                if not np.any(mask):
                    continue
                t = a[mask] - edge
                d1 = float(spline_dpsi(edge))
                if order == 0:
                    out[mask] = float(spline_psi(edge)) + d1 * t + 0.5 * curv * t * t
                else:
                    out[mask] = d1 + curv * t
        return np.asarray(out, dtype=float)


def _psi_eps_ell(a, eps, ell):
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = a * np.log(a)
    out = np.where(a <= eps, a * a / (2 * eps) + a * math.log(eps) - eps / 2, mid)
    if not math.isinf(ell):
        out = np.where(a > ell, a * a / (2 * ell) + a * math.log(ell) - ell / 2, out)
    return INV_E + out


def _psi_0_ell(a, ell):
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    out = np.where(a < 0, np.inf, mid)
    if not math.isinf(ell):
        out = np.where(a > ell, a * a / (2 * ell) + a * math.log(ell) - ell / 2, out)
    return INV_E + out


def psi() -> EntropyFunction:
    return EntropyFunction("psi")


def psi_eps_ell(eps: float, ell: float) -> EntropyFunction:
    return EntropyFunction("psi_eps_ell", eps, ell)


def psi_0_ell(ell: float) -> EntropyFunction:
    return EntropyFunction("psi_0_ell", 0.0, ell)


def psi_eval(E: EntropyFunction, a):
    return E(a)


def _breakpoints(f: MobilityFunction, eps: float, ell: float, lo: float, hi: float) -> list[float]:
    """Points in (lo, hi) where T(f(a)) may fail to be smooth."""
    pts = {k for k in f.kinks if lo < k < hi}
    probe = np.linspace(lo, hi, 200_001)
    vals = np.asarray(f(probe), dtype=float)
    for level in (eps, ell):
        s = np.sign(vals - level)
        idx = np.nonzero(s[:-1] * s[1:] < 0)[0]
        for i in idx:
            x0, x1 = probe[i], probe[i + 1]
            f0 = float(f(x0)) - level
            for _ in range(80):
                xm = 0.5 * (x0 + x1)
                fm = float(f(xm)) - level
                if (fm < 0) == (f0 < 0):
                    x0, f0 = xm, fm
                else:
                    x1 = xm
            pts.add(0.5 * (x0 + x1))
    return sorted(pts)


def _cumulative_simpson(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cumulative integral on an even number of uniform panels; values at every node."""
    hstep = x[1] - x[0]
    out = np.zeros_like(y)
    # pairs of panels by Simpson; odd nodes by the Simpson half-panel rule
    s_even = hstep / 3.0 * (y[0:-2:2] + 4.0 * y[1:-1:2] + y[2::2])
    out[2::2] = np.cumsum(s_even)
    half = hstep / 12.0 * (5.0 * y[0:-2:2] + 8.0 * y[1:-1:2] - y[2::2])
    out[1::2] = out[0:-2:2] + half
    return out


def mobility_entropy_build(
    f: MobilityFunction, eps: float, ell: float, panels: int = 10_000, a_range: tuple[float, float] | None = None
) -> EntropyFunction:
    """Entropy with Psi'' = 1 / T^{eps,ell}(f(a)), tabulated by double Simpson quadrature.

    Normalised by Psi'(1) = 1 (which reproduces psi_eps_ell exactly when f
    is the identity) and shifted so that the minimum over the table is 0.
    ``panels`` is the panel count per unit length of the table range,
    distributed over the smooth pieces between breakpoints.
    """
    if not 0 < eps < ell:
        raise ValueError(f"need 0 < eps < ell, got eps={eps}, ell={ell}")
    lo, hi = a_range if a_range is not None else (-1.0, 2.0 * ell)
    cuts = [lo] + _breakpoints(f, eps, ell, lo, hi) + [1.0, hi]
    cuts = sorted(set(c for c in cuts if lo <= c <= hi))

    xs, d2 = [], []
    for x0, x1 in zip(cuts[:-1], cuts[1:]):
        k = max(2, 2 * int(math.ceil(0.5 * panels * (x1 - x0))))
        x = np.linspace(x0, x1, k + 1)
        xs.append(x)
        d2.append(1.0 / np.clip(np.asarray(f(x), dtype=float), eps, ell))

    # integrate piece by piece, chaining the running values
    dpsi_parts, acc = [], 0.0
    for x, y in zip(xs, d2):
        c = _cumulative_simpson(y, x) + acc
        dpsi_parts.append(c)
        acc = c[-1]
    all_x = np.concatenate([xs[0]] + [x[1:] for x in xs[1:]])
    dpsi = np.concatenate([dpsi_parts[0]] + [c[1:] for c in dpsi_parts[1:]])
    dpsi = dpsi - np.interp(1.0, all_x, dpsi) + 1.0

    psi_parts, acc = [], 0.0
    start = 0
    for x in xs:
        seg = dpsi[start : start + len(x)]
        c = _cumulative_simpson(seg, x) + acc
        psi_parts.append(c)
        acc = c[-1]
        start += len(x) - 1
    psi_vals = np.concatenate([psi_parts[0]] + [c[1:] for c in psi_parts[1:]])
    psi_vals = psi_vals - psi_vals.min()

    spline_psi = CubicSpline(all_x, psi_vals, bc_type="not-a-knot")
    spline_dpsi = CubicSpline(all_x, dpsi, bc_type="not-a-knot")
    curv_lo = 1.0 / float(np.clip(f(lo), eps, ell))
    curv_hi = 1.0 / float(np.clip(f(hi), eps, ell))
    table = (spline_psi, spline_dpsi, lo, hi, curv_lo, curv_hi)
    return EntropyFunction("mobility_quadrature", eps, ell, f, table)


# --------------------------------------------------------------------------
# states and functionals


@dataclass
class SpeciesState:
    """The species fields ``u^1..u^m`` at one time level, shape ``(m, *grid.shape)``."""

    grid: tg.GridSpec
    fields: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        f = np.asarray(self.fields, dtype=float)
        if f.ndim == self.grid.dim:
            f = f[None]
        if f.shape[1:] != self.grid.shape:
            raise tg.GridMismatchError(f"fields have shape {f.shape[1:]}, grid expects {self.grid.shape}")
        self.fields = f

    @property
    def m(self) -> int:
        return self.fields.shape[0]

    def masses(self) -> np.ndarray:
        return np.array([tg.integrate(self.grid, u) for u in self.fields])

    def copy(self) -> "SpeciesState":
        return SpeciesState(self.grid, self.fields.copy(), self.time)


def entropy_functional(E, s: SpeciesState) -> float:
    """sum_i int Psi(u^i). ``E`` may be a single entropy or one per species."""
    Es = E if isinstance(E, (list, tuple)) else [E] * s.m
    total = 0.0
    for Ei, u in zip(Es, s.fields):
        vals = np.asarray(Ei(u))
        if np.any(np.isinf(vals)):
            return math.inf
        total += float(np.sum(vals) * s.grid.cell_volume)
    return total


def species_entropies(Es, s: SpeciesState) -> np.ndarray:
    out = []
    for Ei, u in zip(Es, s.fields):
        vals = np.asarray(Ei(u))
        out.append(math.inf if np.any(np.isinf(vals)) else float(np.sum(vals) * s.grid.cell_volume))
    return np.array(out)


def energy_functional(A, s: SpeciesState) -> float:
    """sum_ij 1/2 A_ij <u^i, u^j> for symmetric A."""
    A = as_matrix(A)
    if not A.is_symmetric():
        raise ValueError("energy functional is only defined for a symmetric coupling matrix")
    if A.m != s.m:
        raise ValueError(f"matrix is {A.m}x{A.m} but state has {s.m} species")
    flat = s.fields.reshape(s.m, -1)
    gram = flat @ flat.T * s.grid.cell_volume
    return float(0.5 * np.sum(A.entries * gram))
