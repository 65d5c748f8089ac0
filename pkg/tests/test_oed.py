import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dense_hessian, make_problem
from oedsteer.domain import QoiSpec, RegionRect
from oedsteer.inversion import DesignWeights
from oedsteer.numcore import ContractError
from oedsteer.oed import (
    FULL, ROM, DesignEvaluator, DesignProblem, goal_vector, goal_vector_initial,
    goal_vector_spacetime, optimize_design, prior_goal_variance, projected_gradient, run_design,
    spacetime_qoi, threshold_design, trace_gradient, trace_objective, write_design_csv,
)
from oedsteer.rom import build_rom
from oedsteer.scenario import parse_scenario
from oedsteer.transport import transport_model

REGION = RegionRect(0, 40, 60, 100)


@pytest.fixture(scope="module")
def goal(small):
    return goal_vector_spacetime(QoiSpec(REGION, 1.0, 3.0), small.cfg)


def problem(p, goal, alpha=0.0, route=FULL, rank=None):
    return DesignProblem(p.cs, goal, alpha, p.sigma, rank or p.grid.n_dof, route=route)


def dense_goal_var(p, c, w):
    Mc = p.dp.M * c
    return Mc @ np.linalg.solve(dense_hessian(p, w.meas_weights()), Mc)


def test_goal_vector_initial(small):
    g = goal_vector_initial(small.grid.bounds, small.grid)
    assert np.all(g.c == 1.0)
    a, b = RegionRect(0, 30, 0, 30), RegionRect(70, 100, 0, 100)
    union = goal_vector_initial(a, small.grid).c + goal_vector_initial(b, small.grid).c
    assert np.array_equal(union, ((small.grid.xc <= 30) & (small.grid.yc <= 30)
                                  | (small.grid.xc >= 70)).astype(float))


def test_goal_vector_p1_support():
    sc = parse_scenario("oed1")
    c = goal_vector(sc.qoi, sc.transport).c
    g = sc.grid
    brute = [(75 <= x <= 125) and (-100 <= y <= -60) for x, y in zip(g.xc, g.yc)]
    assert np.array_equal(c > 0, np.array(brute))


def test_spacetime_window_zero_length(small):
    g = goal_vector_spacetime(QoiSpec(REGION, 2.0, 2.0), small.cfg)
    assert np.all(g.c == 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_spacetime_goal_adjoint_identity(small, goal, seed):
    m = np.random.default_rng(seed).standard_normal(small.grid.n_dof)
    fwd = spacetime_qoi(m, goal.qoi, small.cfg)
    via_c = m @ (small.prior.M * goal.c)
    assert abs(fwd - via_c) <= 1e-9 * max(abs(fwd), np.linalg.norm(m) * np.linalg.norm(small.prior.M * goal.c))


def test_spacetime_goal_upstream_support():
    p = make_problem(nx=16, obstacle=False, kappa=0.5)
    region = RegionRect(40, 60, 40, 60)
    c = goal_vector_spacetime(QoiSpec(region, 0.5, 2.0), p.cfg).c
    # wind blows north at 2 m/s: cells far downstream of P barely reach it
    downstream = p.grid.yc > 80
    assert np.abs(c[downstream]).max() <= 1e-6 * np.abs(c).max()
    upstream = (p.grid.yc < 40) & (p.grid.yc > 30) & (np.abs(p.grid.xc - 50) < 10)
    assert np.all(c[upstream] > 1e-6)


def test_prior_only_objective(small, goal):
    dp = problem(small, goal)
    w0 = np.zeros(dp.n_weights)
    ev = DesignEvaluator(dp, small.ip)
    ref = goal.c @ (small.prior.M * small.prior.apply_prior_cov(goal.c))
    assert ev.objective(w0) == pytest.approx(ref, rel=1e-10)
    assert prior_goal_variance(goal, small.ip) == pytest.approx(ref, rel=1e-10)


def test_penalty_arithmetic():
    sc = parse_scenario("oed1")
    dp = DesignProblem(sc.candidates, goal_vector_initial(RegionRect(75, 125, -100, -60), sc.grid),
                       0.1, 0.005, 10)
    assert dp.n_weights == 96
    assert dp.alpha * np.sum(np.ones(dp.n_weights)) == pytest.approx(9.6)


def test_objective_matches_dense(small, goal):
    dp = problem(small, goal, alpha=0.3)
    w = np.random.default_rng(0).uniform(0, 1, dp.n_weights)
    ref = dense_goal_var(small, goal.c, dp.weights(w)) + 0.3 * w.sum()
    assert trace_objective(dp.weights(w), dp, small.ip) == pytest.approx(ref, rel=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_gradient_finite_differences(small, goal, seed):
    dp = problem(small, goal, alpha=0.1)
    ev = DesignEvaluator(dp, small.ip)
    w = np.random.default_rng(seed).uniform(0.1, 0.9, dp.n_weights)
    g = ev.gradient(w)
    h = 1e-5
    fd = np.array([(ev.objective(w + h * e) - ev.objective(w - h * e)) / (2 * h)
                   for e in np.eye(w.size)])
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)
    assert np.allclose(trace_gradient(dp.weights(w), dp, small.ip), g)


def test_gradient_sign_and_zero_goal(small, goal):
    dp = problem(small, goal, alpha=0.0)
    w = np.random.default_rng(1).uniform(0, 1, dp.n_weights)
    assert np.all(DesignEvaluator(dp, small.ip).gradient(w) <= 0)
    zero = type(goal)(np.zeros_like(goal.c), goal.qoi)
    dz = problem(small, zero, alpha=0.7)
    assert np.allclose(DesignEvaluator(dz, small.ip).gradient(w), 0.7)


def test_data_term_minimal_at_all_ones(small, goal):
    rng = np.random.default_rng(2)
    c = goal.c
    at_one = dense_goal_var(small, c, DesignWeights.for_candidates(small.cs))
    for _ in range(10):
        w = DesignWeights.for_candidates(small.cs, rng.uniform(0, 1, small.cs.n_pos))
        assert at_one <= dense_goal_var(small, c, w) * (1 + 1e-12)


def test_adding_a_sensor_never_increases_goal_variance():
    p = make_problem(positions=[(15, 15), (85, 25), (25, 85), (75, 75), (15, 55)],
                     times=[2.0, 3.0, 4.0])
    c = goal_vector_spacetime(QoiSpec(REGION, 1.0, 3.0), p.cfg).c
    dp = DesignProblem(p.cs, type(goal_vector_initial(REGION, p.grid))(c, QoiSpec(REGION, 1.0, 3.0)),
                       0.0, p.sigma, p.grid.n_dof, route="full")
    E = dp.expansion.toarray()
    q = p.cs.n_meas
    assert q <= 30
    rng = np.random.default_rng(3)
    for _ in range(4):
        base = (rng.uniform(size=q) < 0.4).astype(float)
        v0 = dense_goal_var(p, c, DesignWeights(np.zeros(0), E[:, :0], base))
        for i in np.flatnonzero(base == 0):
            more = base.copy()
            more[i] = 1.0
            assert dense_goal_var(p, c, DesignWeights(np.zeros(0), E[:, :0], more)) <= v0 * (1 + 1e-12)


def test_rom_route_matches_full_at_full_rank(small, goal):
    rom = build_rom(small.forward, small.prior, small.cs.n_meas, True)
    full = DesignEvaluator(problem(small, goal, 0.2), small.ip)
    red = DesignEvaluator(problem(small, goal, 0.2, ROM, rank=rom.rank), small.ip, rom)
    rng = np.random.default_rng(4)
    for _ in range(3):
        w = rng.uniform(0, 1, full.dp.n_weights)
        assert red.objective(w) == pytest.approx(full.objective(w), rel=1e-7)
        assert np.allclose(red.gradient(w), full.gradient(w), rtol=1e-6, atol=1e-9 * np.abs(full.gradient(w)).max())
        lr_full, lr_rom = full.lowrank(w), red.lowrank(w)
        x = rng.standard_normal(small.grid.n_dof)
        assert np.allclose(lr_rom.apply_cov(x), lr_full.apply_cov(x), rtol=1e-7, atol=1e-12)


def test_rom_route_requires_preconditioned_rom(small, goal):
    rom = build_rom(small.forward, small.prior, 5, False)
    with pytest.raises(ContractError):
        DesignEvaluator(problem(small, goal, 0.0, ROM), small.ip, rom)
    with pytest.raises(ContractError):
        DesignEvaluator(problem(small, goal, 0.0, ROM), small.ip)


def test_large_alpha_gives_empty_design(small, goal):
    ev = DesignEvaluator(problem(small, goal, 0.0), small.ip)
    gmax = np.abs(ev.gradient(np.zeros(small.cs.n_pos))).max()
    dp = problem(small, goal, alpha=2 * gmax)
    w, hist = optimize_design(dp, dp.weights(np.full(dp.n_weights, 0.5)), small.ip)
    assert np.all(w.w == 0)


def test_optimizer_history_and_stationarity(small, goal):
    dp = problem(small, goal, alpha=0.0)
    w, hist = optimize_design(dp, dp.weights(np.full(dp.n_weights, 0.5)), small.ip, rtol=1e-8)
    assert np.all(np.diff(hist.objective) <= 0)
    assert np.all((w.w >= 0) & (w.w <= 1))
    ev = DesignEvaluator(dp, small.ip)
    pg = projected_gradient(w.w, ev.gradient(w.w))
    assert np.abs(pg).max() <= 1e-8 * (1 + ev.objective(w.w)) * 1.0001 or hist.converged


def test_threshold_design(small):
    E = np.eye(3)
    import scipy.sparse as sp
    w = DesignWeights(np.array([0.9, 0.05, 0.6]), sp.csr_matrix(E))
    t = threshold_design(w, 0.5)
    assert np.array_equal(t.w, [1, 0, 1])
    assert np.array_equal(threshold_design(t, 0.5).w, t.w)
    assert np.all(threshold_design(w.with_w([0.1, 0.2, 0.3])).w == 0)
    with pytest.raises(ContractError):
        threshold_design(w, 1.0)


def test_run_design_and_csv(small, goal, tmp_path):
    dp = problem(small, goal, alpha=1e-3)
    res = run_design(dp, small.ip)
    assert res.n_selected == int(res.binary.w.sum())
    assert res.objective_binary == pytest.approx(DesignEvaluator(dp, small.ip).objective(res.binary.w))
    write_design_csv(tmp_path / "d.csv", small.cs, res.relaxed, res.binary)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "index,x,y,weight,selected" and len(lines) == 1 + small.cs.n_pos


def test_design_problem_contracts(small, goal):
    with pytest.raises(ContractError):
        problem(small, goal, alpha=-1.0)
    with pytest.raises(ContractError):
        DesignProblem(small.cs, goal, 0.0, 0.0, 3)
    with pytest.raises(ContractError):
        DesignProblem(small.cs, goal, 0.0, 0.1, 3, route="bogus")
    with pytest.raises(ContractError):
        DesignProblem(small.cs, goal, 0.0, 0.1, 3, threshold=0.0)


def test_goal_vector_dispatch(small):
    assert np.array_equal(goal_vector(QoiSpec(REGION), small.cfg).c, goal_vector_initial(REGION, small.grid).c)
    assert transport_model(small.cfg) is transport_model(small.cfg)
