"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see only these lines
in order; they are printed even without ``-s``.
"""

import math
import time

import numpy as np
import pytest

from conftest import smooth_bumps
from crossdiff import config as cf
from crossdiff import entropy as ent
from crossdiff import grid as tg
from crossdiff import scheme as sc
from crossdiff.cli import build_solver, main
from crossdiff.coefficients import (
    delta0_direct,
    delta0_scaled_search,
    identity_matrix,
    seawater_matrix,
    skew_example_matrix,
)
from crossdiff.continuation import LimitSchedule, run_schedule

SEAWATER, _ = seawater_matrix(0.025)


def report(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


# -- 1. mass conservation -----------------------------------------------------

MASS_CASES = {
    "porous_medium": identity_matrix(1),
    "seawater": SEAWATER,
    "skew_example": skew_example_matrix(3.0),
}


def test_criterion_01_mass_conservation(capsys):
    worst, slowest, lines = 0.0, 0.0, []
    for name, A in MASS_CASES.items():
        for dim, n in ((1, 64), (2, 32)):
            g = tg.GridSpec(dim, n)
            centers = [(0.5,) * dim, (0.3,) * dim][: A.m]
            p = sc.RegularizationParams(dt=1e-3, eps=1e-2, ell=10.0, eta=0.1, delta=0.05, horizon=0.5)
            solver = sc.CrossDiffusionSolver(g, A, tg.build_mollifier(0.1, "cosine_bump", g), p)
            u0 = smooth_bumps(g, centers)
            start = time.perf_counter()
            res = solver.run(u0, store_trajectory=False)
            elapsed = time.perf_counter() - start
            m0 = u0.reshape(A.m, -1).sum(axis=1) * g.cell_volume
            drift = float(np.max(np.abs(np.array(res.records[-1].masses) - m0) / m0))
            assert len(res.records) == 500
            worst, slowest = max(worst, drift), max(slowest, elapsed)
            lines.append(f"{name}/{dim}D {drift:.1e} in {elapsed:.1f}s")
    ok = worst <= 1e-12 and slowest <= 60.0
    report(capsys, 1, "mass conservation", ok,
           f"max relative drift {worst:.2e} (tol 1e-12), slowest case {slowest:.1f}s (limit 60s); " + ", ".join(lines))


# -- 2, 3, 11. entropy inequality on random data --------------------------------

RANDOM_SEAWATER = """
seed = {seed}
species = 2

[grid]
dim = 1
n = 64

[matrix]
preset = "seawater"
eps0 = 0.025

[params]
dt = 0.001
eps = 0.1
ell = 10.0
eta = 0.1
delta = 0.05
horizon = 0.1

[[initial]]
kind = "random_positive"
min = 0.2
max = 2.0

[[initial]]
kind = "random_positive"
min = 0.2
max = 2.0
"""

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def random_runs():
    runs = {}
    for seed in SEEDS:
        cfg = cf.parse_config(RANDOM_SEAWATER.format(seed=seed))
        solver = build_solver(cfg)
        runs[seed] = (cfg, solver, solver.run(cfg.initial_state(), store_trajectory=False))
    return runs


def test_criterion_02_discrete_entropy_inequality(capsys, random_runs):
    worst, steps = -math.inf, 0
    picard_tol = None
    for cfg, solver, res in random_runs.values():
        picard_tol = solver.controls.picard_tol
        worst = max(worst, max(r.entropy_defect for r in res.records))
        steps = min(steps or len(res.records), len(res.records))
    tol = 100 * picard_tol
    ok = worst <= tol and steps >= 100
    report(capsys, 2, "per-step entropy inequality", ok,
           f"max defect {worst:.2e} (tol {tol:.0e}) over {steps} steps x {len(SEEDS)} seeds")


def test_criterion_03_telescoped_entropy_budget(capsys, random_runs):
    margins = []
    for cfg, solver, res in random_runs.values():
        recs = res.records
        d0 = max(solver.delta0, 0.0)
        dissipation = sum(r.dt * (r.diss_grad + d0 * r.diss_moll) for r in recs)
        margins.append(recs[0].entropy_prev + 1e-6 - (recs[-1].entropy + dissipation))
    ok = min(margins) >= 0
    report(capsys, 3, "telescoped entropy budget", ok,
           f"smallest margin (initial + 1e-6) - (final + dissipation) = {min(margins):.3e} over {len(SEEDS)} runs")


# -- 4. linear-step estimate ----------------------------------------------------


def test_criterion_04_linear_step_estimate(capsys):
    g = tg.GridSpec(1, 64)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    base = sc.RegularizationParams(dt=1e-3, eps=0.1, ell=10.0, eta=0.1, delta=0.05, horizon=1e-3)
    t = sc.tau(base, SEAWATER, k)
    dt = 0.5 * t
    p = base.replace(dt=dt, horizon=200 * dt)
    res = sc.CrossDiffusionSolver(g, SEAWATER, k, p).run(smooth_bumps(g, [0.5, 0.3]), store_trajectory=False)
    worst = max(r.est0_lhs - r.est0_rhs for r in res.records)
    ok = len(res.records) == 200 and worst <= 1e-9
    report(capsys, 4, "linear-step estimate at dt = tau/2", ok,
           f"max lhs - rhs {worst:.2e} (tol 1e-9) over {len(res.records)} steps, tau = {t:.4e}")


# -- 5. energy decay ---------------------------------------------------------------


def test_criterion_05_energy_decay(capsys):
    cfg = cf.preset_config("seawater")
    p = cfg.params.replace(horizon=200 * cfg.params.dt)
    g = cfg.grid_spec()
    solver = sc.CrossDiffusionSolver(g, cfg.coupling(), cfg.kernel(), p)
    res = solver.run(cfg.initial_state())
    rep = sc.check_energy_decay(res.trajectory, cfg.coupling(), tol=1e-8)
    ok = rep.ok and len(rep.defects) == 200
    report(capsys, 5, "energy decay (symmetric seawater matrix)", ok,
           f"largest per-step increase {rep.max_increase:.2e} (tol 1e-8) over {len(rep.defects)} steps")


# -- 6. positivity certificates ----------------------------------------------------


def test_criterion_06_positivity_certificates(capsys):
    ident = delta0_direct(identity_matrix(2))
    nu = 0.975
    oracle = ((1 + nu) - math.sqrt((1 - nu) ** 2 + 4 * nu**2)) / 2
    sea = delta0_direct(SEAWATER)
    skew = skew_example_matrix(3.0)
    direct_skew = delta0_direct(skew)
    scaled = delta0_scaled_search(skew)
    ok = (abs(ident - 1) <= 1e-12 and abs(sea - 0.012420) <= 1e-5 and abs(sea - oracle) <= 1e-12
          and direct_skew <= 0 and scaled.ok and scaled.delta0 >= 1 - 1e-6)
    report(capsys, 6, "positivity certificates", ok,
           f"identity {ident!r}, seawater {sea:.8f} (oracle {oracle:.8f}), skew direct {direct_skew:.3f}, "
           f"skew scaled {scaled.delta0:.8f} (need >= 1 - 1e-6)")


# -- 7. scaling equivalence -----------------------------------------------------------


def test_criterion_07_scaling_equivalence(capsys):
    g = tg.GridSpec(1, 64)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    r = np.array([2.0, 0.5])
    A = skew_example_matrix(3.0)
    p = sc.RegularizationParams(dt=1e-3, eps=0.1, ell=10.0, eta=0.1, delta=0.05, horizon=0.05)
    ctrl = sc.SolverControls()
    ubar = smooth_bumps(g, [0.5, 0.3])
    plain = sc.CrossDiffusionSolver(g, A.entries * r[None, :], k, p, ctrl).run(ubar)
    scaled = sc.CrossDiffusionSolver(g, A, k, p, ctrl, species_scale=r).run(r[:, None] * ubar)
    worst = max(float(np.max(np.abs(r[:, None] * a.fields - b.fields)))
                for a, b in zip(plain.trajectory, scaled.trajectory))
    tol = 10 * (ctrl.picard_tol + ctrl.linear_tol)
    ok = worst <= tol and len(plain.records) == 50
    report(capsys, 7, "scaling equivalence r = (2, 0.5)", ok,
           f"max cellwise difference {worst:.2e} (tol {tol:.1e}) over {len(plain.records)} steps")


# -- 8. self-convergence ---------------------------------------------------------------


def _porous_corner(n, steps):
    g = tg.GridSpec(1, n)
    p = sc.RegularizationParams(dt=0.05 / steps, eps=1e-4, ell=100.0, eta=g.h, delta=1e-3, horizon=0.05)
    u0 = smooth_bumps(g, [0.5], floor=0.0, amplitude=1.0, width=0.1)
    solver = sc.CrossDiffusionSolver(g, identity_matrix(1), tg.delta_kernel(g), p)
    return solver.run(u0, store_trajectory=False)


def test_criterion_08_self_convergence(capsys):
    start = time.perf_counter()
    ref = _porous_corner(512, 512).final.fields[0]
    sizes = (32, 64, 128)
    errors = []
    for n in sizes:
        u = _porous_corner(n, n).final.fields[0]
        restricted = ref.reshape(n, -1).mean(axis=1)
        errors.append(math.sqrt(float(np.sum((u - restricted) ** 2)) / n))
    orders = [math.log2(a / b) for a, b in zip(errors[:-1], errors[1:])]
    fitted = -np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    elapsed = time.perf_counter() - start
    ok = min(orders) >= 0.8 and errors[0] > errors[1] > errors[2] and elapsed <= 300
    report(capsys, 8, "self-convergence (porous-medium corner)", ok,
           f"errors {[f'{e:.3e}' for e in errors]}, orders {[f'{o:.2f}' for o in orders]}, "
           f"fitted {fitted:.2f} (need >= 0.8), {elapsed:.0f}s (limit 300s)")


# -- 9. continuation Cauchy behaviour -----------------------------------------------------


def test_criterion_09_continuation_cauchy(capsys):
    cfg = cf.preset_config("seawater")
    u0 = cfg.initial_state()
    base = cfg.params.replace(dt=4e-3, horizon=0.08)
    details, ok = [], True
    for stage in ("dt_eps", "delta"):
        rep = run_schedule(LimitSchedule.geometric(stage, base, 4, 2.0), u0, cfg.coupling())
        ok &= rep.decreasing and len(rep.distances) == 3
        details.append(f"{stage}: d = {[f'{d:.3e}' for d in rep.distances]}, rates {[f'{r:.2f}' for r in rep.rates]}")
    report(capsys, 9, "continuation distances strictly decrease", ok, "; ".join(details))


# -- 10. non-negativity surrogate ---------------------------------------------------------


def test_criterion_10_negativity_scales_with_sqrt_eps(capsys):
    g = tg.GridSpec(1, 64)
    u0 = ent.SpeciesState(g, smooth_bumps(g, [0.5, 0.3], floor=0.0, amplitude=1.0, width=0.08))
    base = sc.RegularizationParams(dt=2e-3, eps=0.1, ell=10.0, eta=0.1, delta=0.01, horizon=0.04)
    rep = run_schedule(LimitSchedule.geometric("dt_eps", base, 4, 2.0), u0, SEAWATER)
    eps = [p.eps for p in rep.levels]
    C = [max(0.0, -m) / math.sqrt(e) for m, e in zip(rep.min_values, eps)]
    fitted = max(C)
    ok = all(m >= -fitted * math.sqrt(e) for m, e in zip(rep.min_values, eps)) and max(C) <= 2 * C[0]
    report(capsys, 10, "min value >= -C sqrt(eps) with stable C", ok,
           f"mins {[f'{m:.3e}' for m in rep.min_values]}, C_k {[f'{c:.3f}' for c in C]} "
           f"(stable: every C_k <= 2 C_0 = {2 * C[0]:.3f})")


# -- 11. determinism ---------------------------------------------------------------------


def test_criterion_11_determinism(capsys, tmp_path):
    path = tmp_path / "random.toml"
    path.write_text(RANDOM_SEAWATER.format(seed=3))
    for name in ("first", "second"):
        assert main(["run", "--config", str(path), "--out", str(tmp_path / name), "--quiet"]) == 0
    a = (tmp_path / "first" / "diagnostics.csv").read_bytes()
    b = (tmp_path / "second" / "diagnostics.csv").read_bytes()
    report(capsys, 11, "bitwise determinism", a == b,
           f"two CLI runs wrote {len(a)} and {len(b)} bytes, identical={a == b}")
