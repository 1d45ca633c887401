"""Entropy-stable solver for degenerate cross-diffusion systems on the periodic torus."""

from .coefficients import (
    CouplingMatrix,
    MobilityFunction,
    PositivityCertificate,
    delta0_direct,
    delta0_scaled_search,
    identity_matrix,
    matrix_norm,
    seawater_matrix,
    skew_example_matrix,
)
from .continuation import ConvergenceReport, LimitSchedule, entropy_budget_check, run_schedule
from .entropy import EntropyFunction, SpeciesState
from .grid import GridSpec, MollifierKernel, build_mollifier, delta_kernel
from .scheme import (
    CrossDiffusionSolver,
    DiagnosticsRecord,
    FixedPointFailure,
    RegularizationParams,
    SolverControls,
    StabilityViolation,
    StepFailure,
    run,
)

__all__ = [
    "ConvergenceReport",
    "CouplingMatrix",
    "CrossDiffusionSolver",
    "DiagnosticsRecord",
    "EntropyFunction",
    "FixedPointFailure",
    "GridSpec",
    "LimitSchedule",
    "MobilityFunction",
    "MollifierKernel",
    "PositivityCertificate",
    "RegularizationParams",
    "SolverControls",
    "SpeciesState",
    "StabilityViolation",
    "StepFailure",
    "build_mollifier",
    "delta0_direct",
    "delta0_scaled_search",
    "delta_kernel",
    "entropy_budget_check",
    "identity_matrix",
    "matrix_norm",
    "run",
    "run_schedule",
    "seawater_matrix",
    "skew_example_matrix",
]
