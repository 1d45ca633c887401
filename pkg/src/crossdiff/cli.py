"""Command-line entry point: ``crossdiff {run,validate-matrix,continuation,presets}``.

Exit codes: 0 success, 2 configuration error (including a violated
stability bound), 3 linear solver failure, 4 fixed-point failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .coefficients import (
    CouplingMatrix,
    delta0_direct,
    delta0_scaled_search,
    identity_matrix,
    inf_norm,
    lambda_min_sym,
    matrix_norm,
    seawater_matrix,
    skew_example_matrix,
)
from .continuation import entropy_budget_check, run_schedule
from .grid import build_mollifier
from .outputs import DiagnosticsWriter, write_snapshot, write_table
from .scheme import CrossDiffusionSolver, FixedPointFailure, StabilityViolation, StepFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STEP = 3
EXIT_FIXED_POINT = 4

log = logging.getLogger("crossdiff")


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _load(args) -> cfgmod.RunConfig:
    if args.config is None:
        raise cfgmod.ConfigError("--config", "a configuration file is required")
    try:
        cfg = cfgmod.load_config(args.config)
    except OSError as exc:
        raise cfgmod.ConfigError("--config", f"cannot read {args.config}: {exc.strerror}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def entropy_certificate(A: CouplingMatrix, seed: int) -> tuple[float, np.ndarray | None]:
    """(delta0, entropy weights) for a run: direct when possible, else a left-scaled search."""
    d0 = delta0_direct(A)
    if d0 > 0:
        return d0, None
    cert = delta0_scaled_search(A, right_identity=True, seed=cfgmod.stream_seed(seed, "certificate"))
    if cert.ok:
        return cert.delta0, cert.L
    return d0, None


def build_solver(cfg: cfgmod.RunConfig, params=None) -> CrossDiffusionSolver:
    A = cfg.coupling()
    d0, weights = entropy_certificate(A, cfg.seed)
    p = cfg.params if params is None else params
    grid = cfg.grid_spec()
    kernel = build_mollifier(p.eta, cfg.grid.profile, grid)
    return CrossDiffusionSolver(
        grid, A, kernel, p, cfg.controls(), cfg.mobility_function(),
        entropy_weights=weights, delta0=d0,
    )


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out or ".")
    try:
        solver = build_solver(cfg)
        u0 = cfg.initial_state()
        u, _ = solver.prepare_initial(u0)
    except StabilityViolation as exc:
        raise cfgmod.ConfigError("params.dt", str(exc)) from None
    except ValueError as exc:
        raise cfgmod.ConfigError("initial", str(exc)) from None
    _say(args, f"tau = {solver.tau:.6g}, dt = {cfg.params.dt:g}, steps = {cfg.params.steps}")
    if cfg.params.dt >= solver.tau:
        log.info("dt = %g is not below tau = %.6g; the coercivity bound does not apply", cfg.params.dt, solver.tau)
    o = cfg.outputs
    snap_dir = out / o.snapshot_dir
    if o.snapshot_every > 0:
        write_snapshot(snap_dir, u0, 0)

    writer = DiagnosticsWriter(out / o.diagnostics_path, cfg.species, cfgmod.dump_config(cfg))

    def on_step(rec, state):
        writer.write(rec)
        if o.snapshot_every > 0 and rec.step % o.snapshot_every == 0:
            write_snapshot(snap_dir, state, rec.step)

    try:
        result = solver.run(u0, on_step=on_step, store_trajectory=False)
    except StepFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STEP
    except FixedPointFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIXED_POINT
    finally:
        writer.close()
    last = result.records[-1]
    _say(args, f"wrote {writer.rows} rows to {writer.path}")
    _say(args, f"final entropy {last.entropy:.12g}, min value {last.min_value:.6g}")
    return EXIT_OK


def _parse_entries(text: str) -> CouplingMatrix:
    try:
        rows = [[float(v) for v in r.split(",")] for r in text.split(";")]
        return CouplingMatrix(np.array(rows))
    except ValueError as exc:
        raise cfgmod.ConfigError("--entries", f"cannot parse matrix: {exc}") from None


def _matrix_from_args(args) -> CouplingMatrix:
    if args.entries is not None:
        return _parse_entries(args.entries)
    if args.preset is not None:
        if args.preset == "identity":
            return identity_matrix(args.m)
        if args.preset == "seawater":
            return seawater_matrix(args.eps0)[0]
        if args.preset == "skew_example":
            return skew_example_matrix(args.a)
        raise cfgmod.ConfigError("--preset", f"unknown preset {args.preset!r}; expected one of {cfgmod.MATRIX_PRESETS}")
    return _load(args).coupling()


def matrix_report(A: CouplingMatrix, seed: int = 0) -> str:
    lines = [f"matrix = {A.entries.tolist()}"]
    lines.append(f"norm_2 = {matrix_norm(A):.12g}")
    lines.append(f"norm_inf = {inf_norm(A):.12g}")
    lam = lambda_min_sym(A.sym)
    d0 = delta0_direct(A)
    if d0 > 0:
        lines.append(f"direct: delta0 = {d0:.12g}")
    else:
        lines.append(f"direct: fails (lambda_min of symmetric part = {lam:.12g})")
    if A.m > 4:
        lines.append("scaled: search skipped (m > 4)")
        return "\n".join(lines)
    cert = delta0_scaled_search(A, seed=cfgmod.stream_seed(seed, "certificate"))
    if cert.ok:
        lines.append(f"scaled: delta0 = {cert.delta0:.12g}, L = {np.round(cert.L, 12).tolist()}, "
                     f"R = {np.round(cert.R, 12).tolist()}")
    else:
        lines.append("scaled: no certificate found")
    return "\n".join(lines)


def cmd_validate_matrix(args) -> int:
    A = _matrix_from_args(args)
    seed = 0 if args.seed is None else args.seed
    print(matrix_report(A, seed))
    return EXIT_OK


def cmd_continuation(args) -> int:
    cfg = _load(args)
    if args.stage is not None:
        if args.stage not in cfgmod.STAGES:
            raise cfgmod.ConfigError("schedule.stage", f"unknown stage {args.stage!r}; expected one of {cfgmod.STAGES}")
        sched = cfg.schedule or cfgmod.ScheduleConfig()
        cfg = dataclasses.replace(cfg, schedule=dataclasses.replace(sched, stage=args.stage))
    if cfg.schedule is None:
        raise cfgmod.ConfigError("schedule", "continuation needs a [schedule] table or --stage")
    try:
        schedule = cfg.limit_schedule()
        A = cfg.coupling()
        u0 = cfg.initial_state()
    except ValueError as exc:
        raise cfgmod.ConfigError("schedule", str(exc)) from None
    d0, weights = entropy_certificate(A, cfg.seed)
    out = Path(args.out or ".")
    text = cfgmod.dump_config(cfg)

    def on_level(k, result):
        with DiagnosticsWriter(out / f"level_{k}" / cfg.outputs.diagnostics_path, cfg.species, text) as w:
            for rec in result.records:
                w.write(rec)
        _say(args, f"level {k} done ({len(result.records)} steps)")

    try:
        report = run_schedule(
            schedule, u0, A, cfg.grid.profile, cfg.controls(), cfg.mobility_function(), on_level,
            entropy_weights=weights, delta0=d0,
        )
    except (StepFailure, FixedPointFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STEP if isinstance(exc, StepFailure) else EXIT_FIXED_POINT
    except StabilityViolation as exc:
        raise cfgmod.ConfigError("params.dt", str(exc)) from None

    level_rows = []
    for k, p in enumerate(report.levels):
        level_rows.append([k, p.dt, p.eps, p.ell, p.eta, p.delta, report.initial_entropy[k],
                           report.final_entropy[k], report.min_values[k]])
    write_table(out / "levels.csv",
                ["level", "dt", "eps", "ell", "eta", "delta", "initial_entropy", "final_entropy", "min_value"],
                level_rows)
    rows = []
    for k, d in enumerate(report.distances):
        rate = report.rates[k - 1] if k >= 1 else None
        rows.append([k + 1, d, None if rate is None or math.isnan(rate) else rate, int((k + 1) in report.non_cauchy)])
    write_table(out / "convergence.csv", ["level", "distance_to_previous", "rate", "non_cauchy"], rows)
    budget = entropy_budget_check(report, u0, d0)
    _say(args, f"distances: {[f'{d:.4e}' for d in report.distances]}")
    _say(args, f"entropy budget on finest level: {'ok' if budget.ok else 'VIOLATED'} "
               f"(margin {budget.initial - budget.lhs:.3e})")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.name is None:
        for name in cfgmod.PRESETS:
            print(name)
        return EXIT_OK
    if args.name not in cfgmod.PRESETS:
        raise cfgmod.ConfigError("presets", f"unknown preset {args.name!r}; expected one of {tuple(cfgmod.PRESETS)}")
    text = cfgmod.dump_config(cfgmod.preset_config(args.name))
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        (path / f"{args.name}.toml").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    parser = argparse.ArgumentParser(prog="crossdiff", description="Entropy-stable cross-diffusion solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one configuration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-matrix", parents=[common], help="report norms and positivity certificates")
    p.add_argument("--preset", help="identity, seawater or skew_example")
    p.add_argument("--entries", help='explicit matrix, rows separated by ";" e.g. "1,-3;6,1"')
    p.add_argument("--eps0", type=float, default=0.025)
    p.add_argument("--a", type=float, default=3.0)
    p.add_argument("--m", type=int, default=1, help="size of the identity preset")
    p.set_defaults(func=cmd_validate_matrix)

    p = sub.add_parser("continuation", parents=[common], help="run a limit schedule")
    p.add_argument("--stage", help="override schedule.stage")
    p.set_defaults(func=cmd_continuation)

    p = sub.add_parser("presets", parents=[common], help="list demo configurations or print one")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
