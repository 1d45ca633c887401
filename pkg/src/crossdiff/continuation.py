"""Parameter schedules that drive the regularisation to its limits, with Cauchy metrics.

A :class:`LimitSchedule` is an ordered list of parameter sets on one grid and
one initial state. :func:`run_schedule` runs each level and measures the
L^2(0,T;L^2) distance between successive trajectories, both read as
piecewise-constant-in-time functions (``U(t) = u^n`` on ``((n-1)dt, n dt]``).
The integral is exact on the merged set of time breakpoints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import entropy as ent
from . import grid as tg
from .coefficients import MobilityFunction
from .scheme import (
    CrossDiffusionSolver,
    FixedPointFailure,
    RegularizationParams,
    RunResult,
    SolverControls,
    StepFailure,
)

log = logging.getLogger(__name__)

STAGES = ("dt_eps", "ell_eta", "delta", "joint")

# parameters that must move, and in which direction (-1 shrinks, +1 grows)
_MOTION = {
    "dt_eps": {"dt": -1, "eps": -1},
    "ell_eta": {"ell": +1, "eta": -1},
    "delta": {"delta": -1},
    "joint": {"ell": +1, "eta": -1, "delta": -1},
}
# the parameter whose ratio between levels sets the observed rate
_RATE_PARAM = {"dt_eps": "dt", "ell_eta": "eta", "delta": "delta", "joint": "delta"}


@dataclass(frozen=True)
class LimitSchedule:
    stage: str
    levels: tuple[RegularizationParams, ...]

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("a schedule needs at least one level")
        T = self.levels[0].horizon
        for k, p in enumerate(self.levels):
            if abs(p.horizon - T) > 1e-12 * T:
                raise ValueError(f"level {k}: horizon {p.horizon} differs from {T}")
        for name, sign in _MOTION[self.stage].items():
            vals = [getattr(p, name) for p in self.levels]
            for k, (a, b) in enumerate(zip(vals[:-1], vals[1:])):
                if sign * (b - a) < 0:
                    word = "grow" if sign > 0 else "shrink"
                    raise ValueError(f"level {k + 1}: {name} must {word} along stage {self.stage} ({a} -> {b})")

    @classmethod
    def geometric(cls, stage: str, base: RegularizationParams, n_levels: int = 4, factor: float = 2.0) -> "LimitSchedule":
        """Levels ``base, base/factor, ...`` in the moving parameters of ``stage``."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if n_levels < 1 or not factor > 1:
            raise ValueError("need n_levels >= 1 and factor > 1")
        levels = []
        for k in range(n_levels):
            s = factor**k
            changes = {}
            for name, sign in _MOTION[stage].items():
                v = getattr(base, name)
                changes[name] = v * s if sign > 0 else v / s
            levels.append(base.replace(**changes))
        return cls(stage, tuple(levels))

    @property
    def rate_parameter(self) -> str:
        return _RATE_PARAM[self.stage]


@dataclass
class ConvergenceReport:
    stage: str
    levels: list[RegularizationParams]
    distances: list[float] = field(default_factory=list)
    rates: list[float] = field(default_factory=list)
    initial_entropy: list[float] = field(default_factory=list)
    final_entropy: list[float] = field(default_factory=list)
    final_entropy_limit: list[float] = field(default_factory=list)
    min_values: list[float] = field(default_factory=list)
    results: list[RunResult] = field(default_factory=list, repr=False)
    kernels: list[tg.MollifierKernel] = field(default_factory=list, repr=False)
    viscosities: list[np.ndarray] = field(default_factory=list, repr=False)
    entropies: list[list[ent.EntropyFunction]] = field(default_factory=list, repr=False)
    delta0: float = math.nan

    @property
    def non_cauchy(self) -> list[int]:
        """Indices k with d_{k+1} > d_k."""
        d = self.distances
        return [k + 1 for k in range(len(d) - 1) if d[k + 1] > d[k]]

    @property
    def decreasing(self) -> bool:
        d = self.distances
        return all(b < a for a, b in zip(d[:-1], d[1:]))

    @property
    def finest(self) -> RunResult:
        return self.results[-1]


def _piecewise_index(t: float, dt: float) -> int:
    return int(math.ceil(t / dt - 1e-9))


def trajectory_distance(a: RunResult, dt_a: float, b: RunResult, dt_b: float) -> float:
    """Exact L^2(0,T;L^2) distance of two piecewise-constant trajectories on one grid."""
    grid = a.trajectory[0].grid
    if b.trajectory[0].grid != grid:
        raise tg.GridMismatchError("trajectories live on different grids")
    Ka = len(a.trajectory) - 1
    Kb = len(b.trajectory) - 1
    T = Ka * dt_a
    if abs(Kb * dt_b - T) > 1e-9 * T:
        raise ValueError("trajectories cover different horizons")
    nodes = np.union1d(np.arange(1, Ka + 1) * dt_a, np.arange(1, Kb + 1) * dt_b)
    # merge breakpoints closer than round-off
    keep = np.concatenate([[True], np.diff(nodes) > 1e-12 * T])
    nodes = nodes[keep]
    nodes[-1] = T
    dV = grid.cell_volume
    total = 0.0
    prev = 0.0
    for t in nodes:
        ia = min(_piecewise_index(t, dt_a), Ka)
        ib = min(_piecewise_index(t, dt_b), Kb)
        diff = a.trajectory[ia].fields - b.trajectory[ib].fields
        total += (t - prev) * float(np.sum(diff * diff)) * dV
        prev = t
    return math.sqrt(total)


_PSI = ent.psi()


def _limit_entropy(u: np.ndarray, grid: tg.GridSpec, mobility: MobilityFunction | None) -> float:
    # the untruncated entropy is only defined for the identity mobility and u >= 0
    if (mobility is not None and not mobility.is_identity) or np.any(u < 0):
        return math.nan
    return float(np.sum(_PSI(u)) * grid.cell_volume)


def run_schedule(
    schedule: LimitSchedule,
    u0: ent.SpeciesState,
    A,
    profile: str = "cosine_bump",
    controls: SolverControls | None = None,
    mobility: MobilityFunction | None = None,
    on_level: Callable[[int, RunResult], None] | None = None,
    **solver_kw,
) -> ConvergenceReport:
    """Run every level from ``u0`` and compare successive trajectories.

    A failing level re-raises its StepFailure/FixedPointFailure with
    ``.report`` holding the levels completed so far and ``.level`` its index.
    """
    grid = u0.grid
    report = ConvergenceReport(schedule.stage, list(schedule.levels))
    prev = None
    for k, params in enumerate(schedule.levels):
        kernel = tg.build_mollifier(params.eta, profile, grid)
        solver = CrossDiffusionSolver(grid, A, kernel, params, controls, mobility, **solver_kw)
        report.delta0 = solver.delta0
        try:
            result = solver.run(u0)
        except (StepFailure, FixedPointFailure) as exc:
            exc.level = k
            exc.report = report
            exc.args = (f"level {k}: {exc.args[0]}",)
            raise
        report.results.append(result)
        report.kernels.append(kernel)
        report.viscosities.append(solver.delta_i.copy())
        report.entropies.append(solver.entropies)
        report.initial_entropy.append(float(np.sum(solver.species_entropy(result.trajectory[0].fields))))
        report.final_entropy.append(result.records[-1].entropy if result.records else report.initial_entropy[-1])
        report.final_entropy_limit.append(_limit_entropy(result.final.fields, grid, mobility))
        report.min_values.append(min([float(np.min(s.fields)) for s in result.trajectory]))
        if prev is not None:
            report.distances.append(trajectory_distance(prev[1], prev[0].dt, result, params.dt))
        prev = (params, result)
        log.info("level %d (%s) done", k, schedule.stage)
        if on_level is not None:
            on_level(k, result)
    name = schedule.rate_parameter
    d = report.distances
    for k in range(len(d) - 1):
        ratio = getattr(schedule.levels[k + 1], name) / getattr(schedule.levels[k + 2], name)
        if d[k + 1] > 0 and d[k] > 0 and ratio != 1.0:
            report.rates.append(math.log(d[k] / d[k + 1]) / math.log(ratio))
        else:
            report.rates.append(math.nan)
    for k in report.non_cauchy:
        log.warning("non-Cauchy behaviour: d_%d=%.3e > d_%d=%.3e", k, d[k], k - 1, d[k - 1])
    return report


@dataclass
class BudgetCheck:
    """Telescoped entropy budget on the finest level of a schedule."""

    initial: float
    final: float
    dissipation_records: float
    dissipation_snapshots: float
    tol: float

    @property
    def lhs(self) -> float:
        return self.final + self.dissipation_records

    @property
    def ok(self) -> bool:
        return self.lhs <= self.initial + self.tol

    @property
    def bookkeeping_gap(self) -> float:
        return abs(self.dissipation_records - self.dissipation_snapshots)

    def __bool__(self) -> bool:
        return self.ok


def _grad_sq(grid: tg.GridSpec, fields: np.ndarray) -> np.ndarray:
    return np.array([tg.edge_norm_sq(grid, tg.gradient(grid, f)) for f in fields])


def entropy_budget_check(report: ConvergenceReport, u0: ent.SpeciesState, delta0: float | None = None,
                         tol: float = 1e-6) -> BudgetCheck:
    """Final entropy plus accumulated dissipation against the initial entropy.

    Dissipation is summed twice: from the per-step records and recomputed
    from the stored trajectory, so the two can be compared.
    """
    if not report.results:
        raise ValueError("report holds no completed level")
    result = report.finest
    level = len(report.results) - 1
    d0 = max(report.delta0 if delta0 is None else float(delta0), 0.0)
    recs = result.records
    grid = u0.grid
    kernel = report.kernels[level]
    delta_i = report.viscosities[level]
    initial = float(np.sum(ent.species_entropies(report.entropies[level], u0)))
    if not recs:
        return BudgetCheck(initial, initial, 0.0, 0.0, tol)
    diss_rec = sum(r.dt * (r.diss_grad + d0 * r.diss_moll) for r in recs)
    if len(result.trajectory) == len(recs) + 1:
        diss_snap = 0.0
        for r, state in zip(recs, result.trajectory[1:]):
            g2 = _grad_sq(grid, state.fields)
            gm2 = _grad_sq(grid, np.stack([tg.convolve(kernel, f) for f in state.fields]))
            diss_snap += r.dt * (float(np.sum(delta_i * g2)) + d0 * float(np.sum(gm2)))
    else:
        diss_snap = math.nan
    return BudgetCheck(initial, recs[-1].entropy, diss_rec, diss_snap, tol)
