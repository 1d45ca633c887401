import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import smooth_bumps
from crossdiff import entropy as ent
from crossdiff import grid as tg
from crossdiff import scheme as sc
from crossdiff.coefficients import identity_matrix, seawater_matrix, skew_example_matrix

SEAWATER, _ = seawater_matrix(0.025)


def params(**kw):
    base = dict(dt=1e-3, eps=0.1, ell=10.0, eta=0.1, delta=0.05, horizon=1e-3)
    base.update(kw)
    if "horizon" not in kw:
        base["horizon"] = base["dt"]
    return sc.RegularizationParams(**base)


def solver(n=32, dim=1, A=SEAWATER, eta=0.1, controls=None, **kw):
    g = tg.GridSpec(dim, n)
    p = params(eta=eta, **kw)
    return sc.CrossDiffusionSolver(g, A, tg.build_mollifier(eta, "cosine_bump", g), p, controls)


# -- tau --------------------------------------------------------------------


def test_tau_formula_identity_case():
    assert sc.tau_formula(1, 1, 1, 1, 1, 1) == 1.0


def test_tau_monomial_scaling():
    base = sc.tau_formula(0.05, 0.1, 0.1, 2.0, 10.0, 1.5)
    assert sc.tau_formula(0.05, 0.1, 0.2, 2.0, 10.0, 1.5) == pytest.approx(4 * base)
    assert sc.tau_formula(0.05, 0.1, 0.1, 2.0, 20.0, 1.5) == pytest.approx(base / 4)


def test_tau_is_unbounded_for_zero_matrix():
    assert sc.tau_formula(0.05, 0.1, 0.1, 2.0, 10.0, 0.0) == math.inf


def test_tau_seawater_golden():
    # constants recomputed by brute force: c0 from the sampled stencil, |A| from an SVD
    g = tg.GridSpec(1, 64)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    h = g.h
    d = np.arange(-k.radius, k.radius + 1) * h
    w = 1 + np.cos(np.pi * np.abs(d) / 0.1)
    w /= w.sum() * h
    c0 = 0.1 * np.sum(np.abs(np.diff(np.concatenate([[0.0], w, [0.0]]))))
    norm = np.linalg.svd(SEAWATER.entries, compute_uv=False)[0]
    oracle = 0.05 * 0.1 * 0.1**2 / (c0**2 * 10.0**2 * norm**2)
    value = sc.tau(params(), SEAWATER, k)
    assert value == pytest.approx(oracle, rel=1e-12)
    assert value == pytest.approx(3.2443185740961e-08, rel=1e-10)


def test_strict_stability_rejects_large_steps():
    with pytest.raises(sc.StabilityViolation, match="tau="):
        solver(strict_stability=True)
    s = solver(dt=1e-9, strict_stability=True)
    assert s.params.dt < s.tau


def test_params_validation():
    with pytest.raises(ValueError, match=r"eps must lie in \(0,1\)"):
        params(eps=1.5)
    with pytest.raises(ValueError):
        params(ell=0.5)
    with pytest.raises(ValueError, match="multiple"):
        sc.RegularizationParams(0.3, 0.1, 10, 0.1, 0.1, 1.0)
    assert sc.RegularizationParams(0.25, 0.1, 10, 0.1, 0.1, 1.0).steps == 4


# -- linear step --------------------------------------------------------------


def _random_state(rng, s, lo=0.3, hi=2.0):
    return rng.uniform(lo, hi, (s.A.m,) + s.grid.shape)


def test_zero_step_operator_is_identity():
    s = solver(n=16)
    s.params = params(dt=1e-300)
    rng = np.random.default_rng(0)
    u = _random_state(rng, s)
    op = s.assemble(u, _random_state(rng, s))
    assert np.allclose(op.apply(u), u, rtol=1e-250, atol=0)


def test_constants_are_fixed_by_the_operator():
    s = solver(n=16, dim=2)
    rng = np.random.default_rng(1)
    op = s.assemble(_random_state(rng, s), _random_state(rng, s))
    c = np.stack([np.full(s.grid.shape, 1.3), np.full(s.grid.shape, 0.4)])
    assert np.allclose(op.apply(c), c, atol=1e-12)
    assert np.allclose(op.matrix @ c.ravel(), c.ravel(), atol=1e-12)


def test_operator_matches_hand_assembled_matrix():
    # m=1, A=[1], delta kernel, v = c: u - dt T(c) (1 + delta) D^T D u
    n, dt, c, eps, ell, delta = 8, 0.01, 2.5, 0.1, 10.0, 0.05
    g = tg.GridSpec(1, n)
    p = sc.RegularizationParams(dt, eps, ell, g.h, delta, dt)
    s = sc.CrossDiffusionSolver(g, identity_matrix(1), tg.delta_kernel(g), p)
    op = s.assemble(np.ones((1, n)), np.full((1, n), c))
    M = np.zeros((n, n))
    coef = dt * c * (1 + delta) * n * n
    for i in range(n):
        M[i, i] = 1 + 2 * coef
        M[i, (i + 1) % n] -= coef
        M[i, (i - 1) % n] -= coef
    assert np.allclose(op.matrix.toarray(), M, rtol=1e-13)
    u = np.random.default_rng(2).random(n)
    assert np.allclose(op.apply(u[None])[0], M @ u, rtol=1e-13)


@settings(max_examples=15)
@given(st.sampled_from([1, 2]), st.integers(0, 2**32 - 1), st.sampled_from([0.1, 0.2]))
def test_matrix_free_operator_equals_assembled_matrix(dim, seed, eta):
    s = solver(n=12 if dim == 2 else 24, dim=dim, eta=eta, A=skew_example_matrix(3.0))
    rng = np.random.default_rng(seed)
    op = s.assemble(_random_state(rng, s), _random_state(rng, s, -0.5, 12.0))
    u = rng.standard_normal((2,) + s.grid.shape)
    assert np.allclose(op.apply(u).ravel(), op.matrix @ u.ravel(), rtol=1e-12, atol=1e-10)


def test_assembled_mobilities_stay_in_band():
    s = solver(n=32)
    v = np.random.default_rng(3).uniform(-1.0, 30.0, (2, 32))
    mob = s.edge_mobilities(v)
    assert mob.min() >= s.params.eps and mob.max() <= s.params.ell


@pytest.mark.parametrize("method", ["dense", "sparse", "gmres", "fft_gmres"])
def test_manufactured_solution_is_recovered(method):
    s = solver(n=16, controls=sc.SolverControls(linear_method=method))
    rng = np.random.default_rng(4)
    u_star = _random_state(rng, s)
    op = s.assemble(_random_state(rng, s), _random_state(rng, s))
    b = op.apply(u_star)
    x, res = s.solve(op, b)
    assert res <= 1e-11
    assert np.linalg.norm(x - u_star) <= 1e-9 * np.linalg.norm(u_star)


def test_functional_linear_step_entry_points():
    g = tg.GridSpec(1, 16)
    rng = np.random.default_rng(5)
    un = ent.SpeciesState(g, rng.uniform(0.5, 2, (2, 16)))
    v = ent.SpeciesState(g, rng.uniform(0.5, 2, (2, 16)))
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    op = sc.assemble_linear_step(un, v, SEAWATER, k, params())
    out = sc.solve_linear_step(op, un, tol=1e-11, method="dense")
    assert np.allclose(op.apply(out.fields), un.fields, atol=1e-11)
    with pytest.raises(tg.GridMismatchError):
        sc.assemble_linear_step(un, ent.SpeciesState(tg.GridSpec(1, 8), np.ones((2, 8))), SEAWATER, k, params())


def test_linear_stagnation_raises_step_failure():
    ctrl = sc.SolverControls(linear_method="gmres", krylov_restart=2, krylov_max_iter=1, linear_tol=1e-14)
    s = solver(n=32, dt=0.1, horizon=0.1, controls=ctrl)
    rng = np.random.default_rng(6)
    op = s.assemble(_random_state(rng, s), _random_state(rng, s))
    with pytest.raises(sc.StepFailure) as info:
        s.solve(op)
    assert info.value.residual_history


# -- Picard -------------------------------------------------------------------


def test_constant_state_converges_in_one_iteration():
    s = solver(n=16)
    u = np.stack([np.full(16, 1.2), np.full(16, 0.7)])
    v, stats = s.picard(u)
    assert stats.iterations == 1
    assert np.allclose(v, u, atol=1e-14)


def test_picard_iterations_do_not_grow_as_dt_shrinks():
    g = tg.GridSpec(1, 32)
    (x,) = g.centers()
    u = (1 + 0.3 * np.exp(-((x - 0.5) ** 2) / 0.01))[None]
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    A = identity_matrix(1)
    t = sc.tau(params(), A, k)
    iters = []
    for f in (0.5, 0.25, 0.125):
        p = params(dt=f * t, strict_stability=True)
        _, stats = sc.CrossDiffusionSolver(g, A, k, p).picard(u)
        iters.append(stats.iterations)
        assert stats.nonlinear_residual <= 10 * 1e-10
    assert iters == sorted(iters, reverse=True)
    assert iters == [2, 2, 2]


def test_picard_budget_exhaustion_reports_partial_run():
    ctrl = sc.SolverControls(picard_max_iter=1)
    s = solver(n=32, controls=ctrl, dt=1e-3, horizon=3e-3)
    u0 = smooth_bumps(s.grid, [0.5, 0.3])
    with pytest.raises(sc.FixedPointFailure) as info:
        s.run(u0)
    exc = info.value
    assert exc.increments and "step 1" in str(exc)
    assert exc.partial is not None and len(exc.partial.trajectory) == 1


def test_picard_damping_reaches_the_same_fixed_point():
    u0 = smooth_bumps(tg.GridSpec(1, 32), [0.5, 0.3])
    a, _ = solver(n=32).picard(u0)
    b, st = solver(n=32, controls=sc.SolverControls(damping=0.3)).picard(u0)
    assert np.allclose(a, b, rtol=1e-8)
    assert st.iterations > 1


@pytest.mark.parametrize("average", ["edge", "cell"])
def test_entropy_step_inequality(average):
    s = solver(n=32, controls=sc.SolverControls(mobility_average=average), dt=1e-3, horizon=5e-3)
    u0 = np.random.default_rng(7).uniform(0.2, 3.0, (2, 32))
    res = s.run(u0)
    for rec in res.records:
        if average == "edge":
            assert rec.entropy_defect <= 100 * 1e-10
        assert sc.check_entropy_step(rec, 1e-3)


# -- time loop ----------------------------------------------------------------


def test_constant_run_stays_constant():
    s = solver(n=16, dt=1e-3, horizon=1e-2)
    u0 = np.stack([np.full(16, 0.9), np.full(16, 1.1)])
    res = s.run(u0)
    for st_, rec in zip(res.trajectory[1:], res.records):
        assert np.allclose(st_.fields, u0, atol=1e-14)
        assert rec.diss_grad == pytest.approx(0.0, abs=1e-20)
        assert rec.diss_moll == pytest.approx(0.0, abs=1e-20)


def test_mass_is_conserved_over_1000_steps():
    s = solver(n=16, dt=1e-3, horizon=1.0)
    u0 = np.random.default_rng(8).uniform(0.5, 2, (2, 16))
    res = s.run(u0, store_trajectory=False)
    m0 = u0.mean(axis=1)
    m1 = np.array(res.records[-1].masses)
    assert len(res.records) == 1000
    assert np.all(np.abs(m1 - m0) / m0 <= 1e-12)


def test_prepare_initial_clamps_round_off_and_rejects_negatives():
    s = solver(n=8)
    u = np.ones((2, 8))
    u[0, 3] = -1e-16
    fields, count = s.prepare_initial(u)
    assert count == 1 and fields[0, 3] == 0.0
    u[0, 3] = -1e-3
    with pytest.raises(ValueError, match="nonnegative"):
        s.prepare_initial(u)
    with pytest.raises(tg.GridMismatchError):
        s.prepare_initial(np.ones((3, 8)))


def test_runs_are_bitwise_deterministic():
    def go():
        s = solver(n=12, dim=2, dt=1e-3, horizon=5e-3)
        return s.run(smooth_bumps(s.grid, [(0.5, 0.5), (0.3, 0.6)]))

    a, b = go(), go()
    for x, y in zip(a.trajectory, b.trajectory):
        assert np.array_equal(x.fields, y.fields)
    assert [r.entropy for r in a.records] == [r.entropy for r in b.records]


def test_functional_run_and_picard_wrappers():
    g = tg.GridSpec(1, 16)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    u0 = ent.SpeciesState(g, smooth_bumps(g, [0.5, 0.2]))
    p = params(horizon=2e-3)
    res = sc.run(u0, SEAWATER, k, p)
    assert len(res.records) == 2 and res.final.time == pytest.approx(2e-3)
    state, stats = sc.picard_solve(u0, SEAWATER, k, p)
    assert np.array_equal(state.fields, res.trajectory[1].fields)


def test_weighted_entropy_reduces_to_plain_check_with_unit_weights():
    s = solver(n=16, dt=1e-3, horizon=2e-3)
    res = s.run(smooth_bumps(s.grid, [0.5, 0.3]))
    for rec in res.records:
        assert sc.check_weighted_entropy(rec, [1.0, 1.0], rec.delta0) == (rec.entropy_defect <= 1e-8)


def test_weighted_entropy_for_skew_matrix():
    g = tg.GridSpec(1, 32)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    A = skew_example_matrix(3.0)
    p = params(horizon=1e-2)
    s = sc.CrossDiffusionSolver(g, A, k, p, entropy_weights=[2.0, 1.0], delta0=1.0)
    res = s.run(smooth_bumps(g, [0.5, 0.3]))
    for rec in res.records:
        assert sc.check_weighted_entropy(rec, [2.0, 1.0], 1.0, tol=1e-8)


def test_energy_decay_report():
    s = solver(n=32, dt=1e-3, horizon=2e-2)
    res = s.run(smooth_bumps(s.grid, [0.5, 0.3]))
    rep = sc.check_energy_decay(res.trajectory, SEAWATER)
    assert rep.ok and rep.max_increase <= 1e-8
    const = [ent.SpeciesState(s.grid, np.ones((2, 32)))] * 3
    assert sc.check_energy_decay(const, SEAWATER).max_increase == 0.0
    with pytest.raises(ValueError):
        sc.check_energy_decay(res.trajectory, skew_example_matrix())


def test_scaling_equivalence_with_co_scaled_thresholds():
    g = tg.GridSpec(1, 32)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    r = np.array([2.0, 0.5])
    A = skew_example_matrix(3.0)
    AR = A.entries * r[None, :]
    p = params(horizon=1e-2)
    ubar = smooth_bumps(g, [0.5, 0.3])
    ctrl = sc.SolverControls(picard_tol=1e-13)
    plain = sc.CrossDiffusionSolver(g, AR, k, p, ctrl).run(ubar)
    scaled = sc.CrossDiffusionSolver(g, A, k, p, ctrl, species_scale=r).run(r[:, None] * ubar)
    for a, b in zip(plain.trajectory, scaled.trajectory):
        assert np.allclose(r[:, None] * a.fields, b.fields, rtol=1e-10, atol=1e-12)


def test_species_scale_validation():
    g = tg.GridSpec(1, 8)
    with pytest.raises(ValueError):
        sc.CrossDiffusionSolver(g, SEAWATER, tg.delta_kernel(g), params(eta=g.h), species_scale=[1.0, -1.0])
    with pytest.raises(tg.GridMismatchError):
        sc.CrossDiffusionSolver(g, SEAWATER, tg.delta_kernel(tg.GridSpec(1, 16)), params(eta=g.h))


def test_quadrature_mobility_run_keeps_entropy_inequality():
    from crossdiff.coefficients import MOBILITIES

    g = tg.GridSpec(1, 32)
    k = tg.build_mollifier(0.1, "cosine_bump", g)
    s = sc.CrossDiffusionSolver(g, SEAWATER, k, params(horizon=5e-3), mobility=MOBILITIES["root_gap"])
    res = s.run(smooth_bumps(g, [0.5, 0.3]))
    for rec in res.records:
        assert rec.entropy_defect <= 1e-8
