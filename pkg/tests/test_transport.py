import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dense_forward
from oedsteer.domain import RegionRect, ScalarField, build_grid, gaussian_blob, potential_flow_wind, uniform_wind
from oedsteer.numcore import ContractError
from oedsteer.scenario import parse_scenario
from oedsteer.transport import (
    CandidateSet, ForwardMap, Observations, TransportConfig, apply_F, apply_F_adjoint,
    observation_times, simulate_measurements, solve_forward, step_forward, transport_model,
)


@pytest.fixture(scope="module")
def grid16():
    g = build_grid(16, 16, (160.0, 160.0), [RegionRect(40, 70, 60, 90), RegionRect(100, 120, 20, 50)])
    cfg = TransportConfig(5.0, 0.5, 6.0, potential_flow_wind(g, 4.0, "south"))
    pos = [(15, 15), (85, 45), (135, 135), (25, 125), (95, 115)]
    cs = CandidateSet.build(cfg, pos, observation_times(0.5, 0.5, 6.0))
    return cfg, cs, ForwardMap.from_candidates(cfg, cs)


def test_zero_is_fixed_point(grid16):
    cfg, _, _ = grid16
    z = ScalarField(cfg.grid, np.zeros(cfg.grid.n_dof))
    assert np.all(step_forward(z, cfg).values == 0)


def test_pure_diffusion_conserves_mass():
    g = build_grid(12, 12, (12.0, 12.0), [RegionRect(4, 7, 3, 6)])
    cfg = TransportConfig(0.3, 0.2, 2.0, uniform_wind(g, 0.0, 0.0))
    u = gaussian_blob(g, (8, 8), 3.0)
    m0 = u.integral()
    for _ in range(10):
        u = step_forward(u, cfg)
        assert u.integral() == pytest.approx(m0, rel=1e-10)


def test_center_of_mass_advects_with_wind():
    g = build_grid(60, 20, (60.0, 20.0))
    v = 1.0
    cfg = TransportConfig(1e-3, 0.5, 5.0, uniform_wind(g, v, 0.0))
    u = gaussian_blob(g, (15.0, 10.0), 4.0, cap=1.0, eps=0.01)

    def com(f):
        return (g.xc @ (g.mass() * f.values)) / f.integral()

    x0 = com(u)
    for _ in range(10):
        u = step_forward(u, cfg)
    assert abs(com(u) - (x0 + 10 * v * cfg.dt)) <= g.dx


def test_linearity_and_zero(grid16):
    _, cs, F = grid16
    rng = np.random.default_rng(0)
    assert np.all(F.apply(np.zeros(F.n_dof)) == 0)
    assert np.all(F.apply_adjoint(np.zeros(F.n_meas)) == 0)
    m1, m2 = rng.standard_normal((2, F.n_dof))
    a = rng.uniform(-5, 5)
    assert np.allclose(F.apply(a * m1), a * F.apply(m1), rtol=1e-10, atol=0)
    lhs = F.apply(m1 + m2)
    assert np.linalg.norm(lhs - F.apply(m1) - F.apply(m2)) <= 1e-10 * np.linalg.norm(lhs)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adjoint_identity(grid16, seed):
    cfg, _, F = grid16
    rng = np.random.default_rng(seed)
    m, y = rng.standard_normal(F.n_dof), rng.standard_normal(F.n_meas)
    fm = apply_F(m, F)
    lhs = fm @ y
    rhs = m @ (cfg.grid.mass() * apply_F_adjoint(y, F))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(fm) * np.linalg.norm(y)


def test_forward_matches_dense_powers(grid16):
    cfg, cs, F = grid16
    dense = dense_forward(cfg, cs)
    m = np.random.default_rng(1).standard_normal(F.n_dof)
    assert np.allclose(F.apply(m), dense @ m, rtol=1e-10, atol=1e-12)
    block = np.random.default_rng(2).standard_normal((F.n_meas, 3))
    assert np.allclose(F.apply_transpose(block), dense.T @ block, atol=1e-11)


def test_adjoint_support_is_backward_reachable(grid16):
    cfg, cs, F = grid16
    j = cs.n_pos * 3 + 1  # sensor 1 at the fourth sampling time
    y = np.zeros(F.n_meas)
    y[j] = 1.0
    p = F.apply_adjoint(y)
    # forward sensitivity: cell i reaches the sensor iff e_i propagated to t_j is non-zero there
    model = transport_model(cfg)
    e = np.eye(F.n_dof)
    for _ in range(cs.meas_steps()[j]):
        e = model.step(e)
    reach = np.abs(e[cs.meas_dofs()[j]]) > 0
    assert np.all(np.abs(p[~reach]) <= 1e-12)
    assert np.allclose(p * cfg.grid.mass(), e[cs.meas_dofs()[j]], atol=1e-14)


def test_max_principle(grid16):
    cfg, _, _ = grid16
    model = transport_model(cfg)
    u = np.random.default_rng(4).uniform(-1, 1, cfg.grid.n_dof)
    for _ in range(5):
        nxt = model.step(u)
        assert np.abs(nxt).max() <= np.abs(u).max() + 1e-12
        u = nxt


def test_desk_mass_non_increasing():
    sc = parse_scenario("oed1")
    model = transport_model(sc.transport)
    u = sc.truth.values
    mass = sc.grid.mass()
    prev = mass @ u
    for _ in range(sc.transport.n_steps):
        u = model.step(u)
        cur = mass @ u
        assert cur <= prev * (1 + 1e-12)
        prev = cur
    assert prev < mass @ sc.truth.values


def test_solve_forward_records(grid16):
    cfg, cs, F = grid16
    m = gaussian_blob(cfg.grid, (30, 30), 30.0)
    traj, obs = solve_forward(m, cfg, cs, stride=4)
    assert len(traj) == 1 + cfg.n_steps // 4
    assert np.allclose(obs, F.apply(m.values), rtol=1e-12)
    zero_traj, zero_obs = solve_forward(ScalarField(cfg.grid, np.zeros(cfg.grid.n_dof)), cfg, cs)
    assert np.all(zero_obs == 0)


def test_simulate_measurements(grid16):
    cfg, cs, F = grid16
    truth = gaussian_blob(cfg.grid, (30, 30), 30.0)
    clean = F.apply(truth.values)
    assert np.array_equal(simulate_measurements(truth, cfg, cs, 0.0, 3).d, clean)
    a = simulate_measurements(truth, cfg, cs, 0.005, 3)
    assert np.array_equal(a.d, simulate_measurements(truth, cfg, cs, 0.005, 3).d)
    with pytest.raises(ContractError):
        simulate_measurements(truth, cfg, cs, -1.0, 3)


def test_noise_variance_monte_carlo():
    g = build_grid(4, 4, (4.0, 4.0))
    cfg = TransportConfig(1.0, 0.5, 0.5, uniform_wind(g, 0.0, 0.0))
    cs = CandidateSet.build(cfg, [(0.5, 0.5), (2.5, 1.5)], [0.5])
    truth = gaussian_blob(g, (2, 2), 2.0)
    clean = ForwardMap.from_candidates(cfg, cs).apply(truth.values)
    res = np.concatenate([simulate_measurements(truth, cfg, cs, 0.005, s).d - clean for s in range(5000)])
    assert res.var() == pytest.approx(0.005 ** 2, rel=0.05)


def test_candidate_set_construction(grid16):
    cfg, _, _ = grid16
    cs = CandidateSet.build(cfg, [(14, 16)], observation_times(0.0, 0.5, 3.0), t_start=1.0, t_cutoff=2.0)
    assert np.allclose(cs.positions, [[15.0, 15.0]])
    assert np.allclose(cs.times, [1.0, 1.5, 2.0])
    st_ = CandidateSet.build(cfg, [(15, 15), (25, 15)], [1.0, 2.0], mode="spacetime")
    assert st_.n_weights == 4 and st_.expansion().shape == (4, 4)
    stat = CandidateSet.build(cfg, [(15, 15), (25, 15)], [1.0, 2.0])
    assert np.array_equal(stat.expansion().toarray(), np.vstack([np.eye(2), np.eye(2)]))
    with pytest.raises(ContractError):
        CandidateSet.build(cfg, [(55, 75)], [1.0])
    with pytest.raises(ContractError):
        CandidateSet.build(cfg, [(15, 15)], [0.3])
    with pytest.raises(ContractError):
        CandidateSet.build(cfg, [(15, 15)], [1.0], t_start=2.0)
    with pytest.raises(ContractError):
        CandidateSet.build(cfg, [(15, 15)], [1.0], mode="bogus")


def test_transport_config_contracts(grid16):
    cfg, cs, F = grid16
    with pytest.raises(ContractError):
        TransportConfig(0.0, 0.1, 1.0, cfg.wind)
    with pytest.raises(ContractError):
        TransportConfig(1.0, 0.3, 1.0, cfg.wind)
    with pytest.raises(ContractError):
        cfg.step_of(0.25)
    with pytest.raises(ContractError):
        F.apply(np.zeros(3))
    with pytest.raises(ContractError):
        Observations(cs, np.zeros(2), 0.1)
