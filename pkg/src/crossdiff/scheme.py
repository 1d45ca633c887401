"""Implicit, entropy-stable time stepping for u^i_t = div(u^i sum_j A_ij grad u^j).

One step solves the regularised nonlinear system

    (u^{n+1} - u^n) / dt = div( M(u^{n+1}) (sum_j A_ij grad rho*rho*u^{j,n+1}
                                             + delta grad u^{i,n+1}) )

by Picard iteration on the frozen-coefficient linear problem. ``M`` is the
edge mobility of :func:`crossdiff.entropy.edge_mobility`, which makes the
discrete entropy inequality exact at the fixed point.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import entropy as ent
from . import grid as tg
from .coefficients import CouplingMatrix, MobilityFunction, as_matrix, delta0_direct, matrix_norm

log = logging.getLogger(__name__)


class StabilityViolation(ValueError):
    """dt >= tau while strict stability is requested."""


class StepFailure(RuntimeError):
    def __init__(self, message, residual_history=(), partial=None):
        super().__init__(message)
        self.residual_history = list(residual_history)
        self.partial = partial


class FixedPointFailure(RuntimeError):
    def __init__(self, message, increments=(), partial=None):
        super().__init__(message)
        self.increments = list(increments)
        self.partial = partial


@dataclass(frozen=True)
class RegularizationParams:
    dt: float
    eps: float
    ell: float
    eta: float
    delta: float
    horizon: float
    strict_stability: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0,1), got {self.eps}")
        if not self.ell > 1:
            raise ValueError(f"ell must be > 1, got {self.ell}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        K = round(self.horizon / self.dt)
        if K < 1 or abs(K * self.dt - self.horizon) > 1e-9 * self.horizon:
            raise ValueError(f"horizon {self.horizon} is not an integer multiple of dt {self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def replace(self, **changes) -> "RegularizationParams":
        return dataclasses.replace(self, **changes)


LINEAR_METHODS = ("auto", "dense", "sparse", "gmres", "fft_gmres")


@dataclass(frozen=True)
class SolverControls:
    linear_tol: float = 1e-11
    picard_tol: float = 1e-10
    picard_max_iter: int = 200
    damping: float = 0.0
    # "auto": dense LU up to dense_max unknowns, sparse LU for 1D grids and
    # Fourier-preconditioned GMRES for 2D grids
    linear_method: str = "auto"
    dense_max: int = 256
    krylov_restart: int = 50
    krylov_max_iter: int = 500
    # "edge" (exact entropy closure) or "cell" (average of cellwise T(v))
    mobility_average: str = "edge"
    check_residual: bool = True

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ValueError(f"damping must lie in [0,1), got {self.damping}")
        if self.linear_method not in LINEAR_METHODS:
            raise ValueError(f"unknown linear method {self.linear_method!r}")
        if self.mobility_average not in ("edge", "cell"):
            raise ValueError(f"unknown mobility average {self.mobility_average!r}")
        if self.picard_max_iter < 1:
            raise ValueError("picard_max_iter must be >= 1")


def tau_formula(delta: float, eps: float, eta: float, c0: float, ell: float, norm_A: float) -> float:
    if norm_A == 0.0:
        return math.inf
    return delta * eps * eta**2 / (c0**2 * ell**2 * norm_A**2)


def tau(params: RegularizationParams, A, kernel: tg.MollifierKernel) -> float:
    """Time-step bound delta eps eta^2 / (c0^2 ell^2 |A|^2) with the discrete c0."""
    return tau_formula(params.delta, params.eps, kernel.eta, kernel.c0_discrete, params.ell, matrix_norm(A))


class LinearStepOperator:
    """Frozen-coefficient operator ``u -> u - dt div(J(v, u))`` on all species at once.

    ``apply`` works matrix-free (convolutions through the FFT); ``matrix`` is
    the same operator assembled as a sparse matrix on first access.
    """

    def __init__(self, solver: "CrossDiffusionSolver", mobilities: np.ndarray, rhs: np.ndarray):
        self.grid = solver.grid
        self.dt = solver.params.dt
        self.mobilities = mobilities  # (m, dim, *grid.shape)
        self.rhs = rhs  # (m, *grid.shape)
        self._solver = solver
        self._matrix = None

    @property
    def m(self) -> int:
        return self.rhs.shape[0]

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = self._solver.assemble_matrix(self.mobilities)
        return self._matrix

    def apply(self, u: np.ndarray) -> np.ndarray:
        s = self._solver
        grid = self.grid
        u = np.asarray(u, dtype=float).reshape(self.rhs.shape)
        axes = tuple(range(1, grid.dim + 1))
        w = np.fft.irfftn(np.fft.rfftn(u, axes=axes) * s.symbol_sq, s=grid.shape, axes=axes)
        a = s.A.entries
        h = grid.h
        out = u.copy()
        for k in range(grid.dim):
            ax = k + 1
            gw = (np.roll(w, -1, axis=ax) - w) / h
            gu = (np.roll(u, -1, axis=ax) - u) / h
            drive = np.tensordot(a, gw, axes=1) + s.delta_i.reshape((-1,) + (1,) * grid.dim) * gu
            F = self.mobilities[:, k] * drive
            out -= self.dt * (F - np.roll(F, 1, axis=ax)) / h
        return out


@dataclass
class PicardStats:
    iterations: int
    increments: list[float]
    linear_residual: float
    nonlinear_residual: float = math.nan


@dataclass
class DiagnosticsRecord:
    step: int
    time: float
    dt: float
    masses: tuple[float, ...]
    entropy: float
    entropy_prev: float
    species_entropy: tuple[float, ...]
    species_entropy_prev: tuple[float, ...]
    diss_grad: float
    diss_moll: float
    delta0: float
    min_value: float
    est0_lhs: float
    est0_rhs: float
    tau: float
    picard_iters: int
    linear_residual: float
    nonlinear_residual: float = math.nan
    energy: float | None = None
    entropy_weighted: float | None = None
    entropy_weighted_prev: float | None = None
    low_set_integral: float = 0.0
    grad_norm_sq: float = 0.0

    @property
    def entropy_defect(self) -> float:
        """Left minus right side of the one-step entropy inequality (<= 0 when it holds)."""
        d0 = max(self.delta0, 0.0)
        return self.entropy + self.dt * (self.diss_grad + d0 * self.diss_moll) - self.entropy_prev

    @property
    def est0_defect(self) -> float:
        return self.est0_lhs - self.est0_rhs


@dataclass
class RunResult:
    records: list[DiagnosticsRecord]
    trajectory: list[ent.SpeciesState]
    tau: float
    clamped_cells: int = 0

    @property
    def final(self) -> ent.SpeciesState:
        return self.trajectory[-1]


def linear_solve(matrix: sp.spmatrix, b: np.ndarray, controls: SolverControls) -> tuple[np.ndarray, float]:
    """Solve ``matrix x = b`` by LU to relative residual ``controls.linear_tol``.

    Dense LU for ``linear_method == "dense"`` (or "auto" up to ``dense_max``
    unknowns), sparse LU otherwise, followed by up to three refinement
    sweeps. Raises StepFailure when the tolerance is not met.
    """
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b), 0.0
    method = controls.linear_method
    if method not in ("dense", "sparse"):
        method = "dense" if b.size <= controls.dense_max else "sparse"
    tol = controls.linear_tol
    history = []
    if method == "dense":
        lu = sla.lu_factor(matrix.toarray(), check_finite=False)
        solve = lambda r: sla.lu_solve(lu, r, check_finite=False)  # noqa: E731
    else:
        lu = spla.splu(sp.csc_matrix(matrix), permc_spec="COLAMD")
        solve = lu.solve
    x = solve(b)
    res = float(np.linalg.norm(b - matrix @ x) / nb)
    history.append(res)
    # refinement keeps the residual, and so the mass drift, at round-off
    for _ in range(3):
        if res <= 0.1 * tol:
            break
        x = x + solve(b - matrix @ x)
        res = float(np.linalg.norm(b - matrix @ x) / nb)
        history.append(res)
    if not res <= tol:
        raise StepFailure(f"linear solve residual {res:.3e} exceeds tolerance {tol:.1e}", history)
    return x, res


class CrossDiffusionSolver:
    """Holds the grid operators for one (grid, A, kernel, params) configuration.

    ``species_scale`` r co-scales the per-species regularisation: species i
    uses thresholds (r_i eps, r_i ell) and viscosity delta / r_i. With
    r = 1 (default) every species shares (eps, ell, delta).
    """

    def __init__(
        self,
        grid: tg.GridSpec,
        A,
        kernel: tg.MollifierKernel,
        params: RegularizationParams,
        controls: SolverControls | None = None,
        mobility: MobilityFunction | None = None,
        species_scale: Sequence[float] | None = None,
        entropy_weights: Sequence[float] | None = None,
        delta0: float | None = None,
    ):
        if kernel.grid != grid:
            raise tg.GridMismatchError("kernel was built for a different grid")
        self.grid = grid
        self.A = as_matrix(A)
        self.kernel = kernel
        self.params = params
        self.controls = controls or SolverControls()
        m = self.A.m
        r = np.ones(m) if species_scale is None else np.asarray(species_scale, dtype=float)
        if r.shape != (m,) or np.any(r <= 0):
            raise ValueError("species_scale must hold m positive numbers")
        self.species_scale = r
        self.eps_i = params.eps * r
        self.ell_i = params.ell * r
        self.delta_i = params.delta / r
        if mobility is None or mobility.is_identity:
            self.entropies = [ent.psi_eps_ell(e, l) for e, l in zip(self.eps_i, self.ell_i)]
        else:
            self.entropies = [ent.mobility_entropy_build(mobility, e, l) for e, l in zip(self.eps_i, self.ell_i)]
        self.mobility = mobility
        self.entropy_weights = None if entropy_weights is None else np.asarray(entropy_weights, dtype=float)
        d0 = delta0_direct(self.A) if delta0 is None else float(delta0)
        self.delta0 = d0
        self.norm_A = matrix_norm(self.A)
        self.tau = tau_formula(
            float(np.min(self.delta_i * self.eps_i)), 1.0, kernel.eta, kernel.c0_discrete, float(np.max(self.ell_i)), self.norm_A
        )
        if params.strict_stability and not params.dt < self.tau:
            raise StabilityViolation(f"dt={params.dt:g} violates the stability bound dt < tau={self.tau:.6g}")
        self.symmetric = self.A.is_symmetric()

        self._G = tg.gradient_matrices(grid)
        C = tg.convolution_matrix(kernel)
        self._C = C
        self._GC = [(G @ C).tocsr() for G in self._G]
        self._GCC = [(G @ C @ C).tocsr() for G in self._G]
        self._GT = [G.T.tocsr() for G in self._G]
        self._eye = sp.identity(grid.size, format="csr")
        self.symbol_sq = tg.kernel_symbol(kernel) ** 2
        self.neg_lap = tg.neg_laplacian_symbol(grid)

    # -- assembly / linear solve ------------------------------------------

    def edge_mobilities(self, v: np.ndarray) -> np.ndarray:
        grid = self.grid
        out = np.empty((v.shape[0], grid.dim) + grid.shape)
        for i, (E, vi) in enumerate(zip(self.entropies, v)):
            for k in range(grid.dim):
                nb = np.roll(vi, -1, axis=k)
                if self.controls.mobility_average == "edge":
                    out[i, k] = E.edge_mobility(vi, nb)
                else:
                    out[i, k] = 0.5 * (E.mobility_of(vi) + E.mobility_of(nb))
        return out

    def assemble_matrix(self, mob: np.ndarray) -> sp.csr_matrix:
        dt = self.params.dt
        a = self.A.entries
        m = self.A.m
        blocks = [[None] * m for _ in range(m)]
        for i in range(m):
            cross = None
            visc = None
            for k in range(self.grid.dim):
                GtM = self._GT[k] @ sp.diags(mob[i, k].ravel())
                c = GtM @ self._GCC[k]
                s = GtM @ self._G[k]
                cross = c if cross is None else cross + c
                visc = s if visc is None else visc + s
            for j in range(m):
                blk = (dt * a[i, j]) * cross if a[i, j] != 0.0 else None
                if i == j:
                    diag = self._eye + (dt * self.delta_i[i]) * visc
                    blk = diag if blk is None else blk + diag
                blocks[i][j] = blk
        return sp.bmat(blocks, format="csr")

    def assemble(self, u_n: np.ndarray, v: np.ndarray) -> LinearStepOperator:
        u_n = np.asarray(u_n, dtype=float)
        v = np.asarray(v, dtype=float)
        if u_n.shape != v.shape or u_n.shape[1:] != self.grid.shape or u_n.shape[0] != self.A.m:
            raise tg.GridMismatchError(f"state shapes {u_n.shape} / {v.shape} do not match the solver")
        return LinearStepOperator(self, self.edge_mobilities(v), u_n.copy())

    def resolved_method(self) -> str:
        method = self.controls.linear_method
        if method != "auto":
            return method
        if self.A.m * self.grid.size <= self.controls.dense_max:
            return "dense"
        return "sparse" if self.grid.dim == 1 else "fft_gmres"

    def _preconditioner(self, op: LinearStepOperator) -> spla.LinearOperator:
        # the operator with every mobility replaced by its species mean is
        # diagonal in Fourier space up to an m x m block per mode
        grid = self.grid
        m = self.A.m
        mbar = op.mobilities.reshape(m, -1).mean(axis=1)
        coupling = self.A.entries[None, :, :] * self.symbol_sq.reshape(-1, 1, 1) + np.diag(self.delta_i)[None]
        blocks = np.eye(m)[None] + (self.params.dt * self.neg_lap.reshape(-1, 1, 1)) * (mbar[None, :, None] * coupling)
        inv = np.linalg.inv(blocks)
        axes = tuple(range(1, grid.dim + 1))
        shape = (m,) + grid.shape

        def apply(r):
            rh = np.fft.rfftn(r.reshape(shape), axes=axes).reshape(m, -1)
            zh = np.einsum("kij,jk->ik", inv, rh).reshape((m,) + self.symbol_sq.shape)
            return np.fft.irfftn(zh, s=grid.shape, axes=axes).ravel()

        n = m * grid.size
        return spla.LinearOperator((n, n), matvec=apply, dtype=float)

    def _krylov(self, op: LinearStepOperator, b: np.ndarray, x0: np.ndarray | None, precondition: bool):
        ctrl = self.controls
        n = b.size
        A_op = spla.LinearOperator((n, n), matvec=lambda x: op.apply(x).ravel(), dtype=float)
        M = self._preconditioner(op) if precondition else None
        history = []
        x, info = spla.gmres(
            A_op, b, x0=None if x0 is None else x0.ravel(), rtol=0.1 * ctrl.linear_tol, atol=0.0,
            restart=ctrl.krylov_restart, maxiter=ctrl.krylov_max_iter, M=M,
            callback=lambda r: history.append(float(r)), callback_type="pr_norm",
        )
        return x, info, history

    def solve(self, op: LinearStepOperator, rhs: np.ndarray | None = None,
              x0: np.ndarray | None = None) -> tuple[np.ndarray, float]:
        """Solve ``op(u) = rhs``; returns (u, relative residual).

        Every species' solution is shifted by a constant so its mass equals
        that of the right-hand side exactly; the operator maps constants to
        themselves, so the shift can only shrink the residual.
        """
        b = op.rhs if rhs is None else np.asarray(rhs, dtype=float)
        shape = op.rhs.shape
        method = self.resolved_method()
        nb = float(np.linalg.norm(b))
        if nb == 0.0:
            return np.zeros(shape), 0.0
        tol = self.controls.linear_tol
        if method in ("dense", "sparse"):
            x, _ = linear_solve(op.matrix, b.ravel(), dataclasses.replace(self.controls, linear_method=method))
            history = []
        else:
            x, _, history = self._krylov(op, b.ravel(), x0, precondition=(method == "fft_gmres"))
        x = x.reshape(shape)
        x += ((b.reshape(shape[0], -1).sum(axis=1) - x.reshape(shape[0], -1).sum(axis=1)) / self.grid.size).reshape(
            (-1,) + (1,) * self.grid.dim
        )
        res = float(np.linalg.norm(op.apply(x) - b) / nb)
        if not res <= tol:
            raise StepFailure(f"{method} linear solve residual {res:.3e} exceeds tolerance {tol:.1e}", history + [res])
        return x, res

    # -- nonlinear step ----------------------------------------------------

    def nonlinear_residual(self, u_n: np.ndarray, u: np.ndarray) -> float:
        op = self.assemble(u_n, u)
        r = op.apply(u) - u_n
        return float(np.linalg.norm(r) / max(np.linalg.norm(u_n), np.finfo(float).tiny))

    def picard(self, u_n: np.ndarray) -> tuple[np.ndarray, PicardStats]:
        ctrl = self.controls
        u_n = np.asarray(u_n, dtype=float)
        v = u_n.copy()
        increments = []
        res = 0.0
        for it in range(1, ctrl.picard_max_iter + 1):
            op = self.assemble(u_n, v)
            u, res = self.solve(op, x0=v)
            new = u if ctrl.damping == 0.0 else (1.0 - ctrl.damping) * u + ctrl.damping * v
            inc = float(np.linalg.norm(new - v) / max(np.linalg.norm(new), np.finfo(float).tiny))
            increments.append(inc)
            v = new
            if inc <= ctrl.picard_tol:
                break
        else:
            raise FixedPointFailure(
                f"Picard iteration did not reach {ctrl.picard_tol:.1e} in {ctrl.picard_max_iter} iterations "
                f"(last increment {increments[-1]:.3e})",
                increments,
            )
        stats = PicardStats(it, increments, res)
        if ctrl.check_residual:
            stats.nonlinear_residual = self.nonlinear_residual(u_n, v)
        return v, stats

    # -- diagnostics -------------------------------------------------------

    def grad_sq(self, u: np.ndarray) -> np.ndarray:
        """Per-species ||grad u^i||^2."""
        dV = self.grid.cell_volume
        return np.array([sum(float(np.sum((G @ ui.ravel()) ** 2)) for G in self._G) * dV for ui in u])

    def moll_grad_sq(self, u: np.ndarray) -> np.ndarray:
        """Per-species ||grad (rho * u^i)||^2."""
        dV = self.grid.cell_volume
        return np.array([sum(float(np.sum((H @ ui.ravel()) ** 2)) for H in self._GC) * dV for ui in u])

    def species_entropy(self, u: np.ndarray) -> np.ndarray:
        return ent.species_entropies(self.entropies, ent.SpeciesState(self.grid, u))

    def energy(self, u: np.ndarray) -> float | None:
        if not self.symmetric:
            return None
        return ent.energy_functional(self.A, ent.SpeciesState(self.grid, u))

    def diagnostics(
        self, step: int, time: float, u_prev: np.ndarray, u_next: np.ndarray, stats: PicardStats,
        prev_species_entropy: np.ndarray | None = None,
    ) -> DiagnosticsRecord:
        dt = self.params.dt
        dV = self.grid.cell_volume
        s_prev = self.species_entropy(u_prev) if prev_species_entropy is None else prev_species_entropy
        s_next = self.species_entropy(u_next)
        g2 = self.grad_sq(u_next)
        gm2 = self.moll_grad_sq(u_next)
        l2_next = float(np.sum(u_next**2) * dV)
        l2_prev = float(np.sum(u_prev**2) * dV)
        ratio = 0.0 if math.isinf(self.tau) else dt / self.tau
        est0_lhs = (1.0 - ratio) * l2_next + dt * float(np.sum(self.eps_i * self.delta_i * g2))
        low = 0.0
        for ui, e in zip(u_next, self.eps_i):
            mask = ui <= e
            low = max(low, float(np.sum(ui[mask] ** 2) * dV / (2.0 * e)))
        w = self.entropy_weights
        return DiagnosticsRecord(
            step=step,
            time=time,
            dt=dt,
            masses=tuple(float(np.sum(ui) * dV) for ui in u_next),
            entropy=float(np.sum(s_next)),
            entropy_prev=float(np.sum(s_prev)),
            species_entropy=tuple(s_next.tolist()),
            species_entropy_prev=tuple(s_prev.tolist()),
            diss_grad=float(np.sum(self.delta_i * g2)),
            diss_moll=float(np.sum(gm2)),
            delta0=self.delta0,
            min_value=float(np.min(u_next)),
            est0_lhs=est0_lhs,
            est0_rhs=l2_prev,
            tau=self.tau,
            picard_iters=stats.iterations,
            linear_residual=stats.linear_residual,
            nonlinear_residual=stats.nonlinear_residual,
            energy=self.energy(u_next),
            entropy_weighted=None if w is None else float(np.sum(w * s_next)),
            entropy_weighted_prev=None if w is None else float(np.sum(w * s_prev)),
            low_set_integral=low,
            grad_norm_sq=float(np.sum(g2)),
        )

    # -- time loop ---------------------------------------------------------

    def prepare_initial(self, u0) -> tuple[np.ndarray, int]:
        fields = u0.fields if isinstance(u0, ent.SpeciesState) else np.asarray(u0, dtype=float)
        fields = np.array(fields, dtype=float)
        if fields.ndim == self.grid.dim:
            fields = fields[None]
        if fields.shape != (self.A.m,) + self.grid.shape:
            raise tg.GridMismatchError(f"initial data shape {fields.shape} does not match the solver")
        if not np.all(np.isfinite(fields)):
            raise ValueError("initial data contains non-finite values")
        neg = fields < 0
        if np.any(fields < -1e-14):
            raise ValueError(f"initial data must be nonnegative (min {fields.min():.3e})")
        count = int(np.count_nonzero(neg))
        if count:
            log.info("clamped %d slightly negative initial cells to 0", count)
            fields[neg] = 0.0
        C1 = float(np.sum(self.species_entropy(fields)))
        if not math.isfinite(C1):
            raise ValueError("initial entropy is not finite")
        return fields, count

    def run(
        self,
        u0,
        on_step: Callable[[DiagnosticsRecord, ent.SpeciesState], None] | None = None,
        store_trajectory: bool = True,
        steps: int | None = None,
    ) -> RunResult:
        u, clamped = self.prepare_initial(u0)
        t0 = u0.time if isinstance(u0, ent.SpeciesState) else 0.0
        K = self.params.steps if steps is None else steps
        dt = self.params.dt
        records: list[DiagnosticsRecord] = []
        trajectory = [ent.SpeciesState(self.grid, u.copy(), t0)] if store_trajectory else []
        s_prev = self.species_entropy(u)
        for n in range(K):
            try:
                u_next, stats = self.picard(u)
            except (StepFailure, FixedPointFailure) as exc:
                exc.partial = RunResult(records, trajectory, self.tau, clamped)
                exc.args = (f"step {n + 1}: {exc.args[0]}",)
                raise
            t = t0 + (n + 1) * dt
            rec = self.diagnostics(n + 1, t, u, u_next, stats, s_prev)
            s_prev = np.array(rec.species_entropy)
            records.append(rec)
            state = ent.SpeciesState(self.grid, u_next, t)
            if store_trajectory:
                trajectory.append(state)
            if on_step is not None:
                on_step(rec, state)
            u = u_next
        if not store_trajectory:
            trajectory = [ent.SpeciesState(self.grid, u, t0 + K * dt)]
        return RunResult(records, trajectory, self.tau, clamped)


# --------------------------------------------------------------------------
# functional entry points


def assemble_linear_step(u_n: ent.SpeciesState, v: ent.SpeciesState, A, kernel, params, **kw) -> LinearStepOperator:
    if u_n.grid != v.grid or u_n.grid != kernel.grid:
        raise tg.GridMismatchError("u_n, v and kernel must share one grid")
    return CrossDiffusionSolver(u_n.grid, A, kernel, params, **kw).assemble(u_n.fields, v.fields)


def solve_linear_step(op: LinearStepOperator, rhs: ent.SpeciesState | np.ndarray | None = None, tol: float = 1e-11,
                      method: str = "auto") -> ent.SpeciesState:
    b = op.rhs if rhs is None else (rhs.fields if isinstance(rhs, ent.SpeciesState) else np.asarray(rhs, dtype=float))
    solver = op._solver
    saved = solver.controls
    solver.controls = dataclasses.replace(saved, linear_tol=tol, linear_method=method)
    try:
        x, _ = solver.solve(op, b)
    finally:
        solver.controls = saved
    return ent.SpeciesState(op.grid, x)


def picard_solve(u_n: ent.SpeciesState, A, kernel, params, controls: SolverControls | None = None, **kw):
    solver = CrossDiffusionSolver(u_n.grid, A, kernel, params, controls, **kw)
    u, stats = solver.picard(u_n.fields)
    return ent.SpeciesState(u_n.grid, u, u_n.time + params.dt), stats


def run(u0: ent.SpeciesState, A, kernel, params, controls: SolverControls | None = None, on_step=None, **kw) -> RunResult:
    solver = CrossDiffusionSolver(u0.grid, A, kernel, params, controls, **kw)
    return solver.run(u0, on_step=on_step)


def check_entropy_step(rec: DiagnosticsRecord, tol: float) -> bool:
    return rec.entropy_defect <= tol


def check_weighted_entropy(rec: DiagnosticsRecord, L, delta0: float, tol: float = 1e-8) -> bool:
    """One step of the L-weighted entropy inequality (R = I certificates)."""
    L = np.asarray(L, dtype=float)
    lhs = float(np.sum(L * np.array(rec.species_entropy)))
    rhs = float(np.sum(L * np.array(rec.species_entropy_prev)))
    lhs += rec.dt * (float(np.min(L)) * rec.diss_grad + delta0 * rec.diss_moll)
    return lhs <= rhs + tol


@dataclass
class EnergyReport:
    energies: list[float]
    defects: list[float]  # E_{n+1} - E_n, signed
    tol: float

    @property
    def max_increase(self) -> float:
        return max(self.defects, default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_increase <= self.tol


def check_energy_decay(trajectory: Sequence[ent.SpeciesState], A, tol: float = 1e-8) -> EnergyReport:
    A = as_matrix(A)
    if not A.is_symmetric():
        raise ValueError("energy decay is only claimed for a symmetric coupling matrix")
    energies = [ent.energy_functional(A, s) for s in trajectory]
    defects = [b - a for a, b in zip(energies[:-1], energies[1:])]
    return EnergyReport(energies, defects, tol)
