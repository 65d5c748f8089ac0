import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dense_prior
from oedsteer.domain import RegionRect, ScalarField, build_grid
from oedsteer.numcore import ContractError, cg_solve
from oedsteer.prior import BiLaplacianPrior, robin_beta, stiffness, wall_lengths


@pytest.fixture(scope="module")
def p12():
    g = build_grid(12, 12, (120.0, 120.0), [RegionRect(50, 70, 30, 60)])
    pr = BiLaplacianPrior(g, eta=2.0, gamma=300.0)
    return pr, dense_prior(pr)


def test_defaults_and_beta():
    g = build_grid(6, 6, (6.0, 6.0))
    pr = BiLaplacianPrior(g)
    assert (pr.eta, pr.gamma) == (8.0, 800.0)
    assert pr.beta == pytest.approx(np.sqrt(800 * 8) / 1.42)
    assert robin_beta(2.0, 50.0) == pytest.approx(10.0 / 1.42)
    assert np.all(pr.mean.values == 0)


def test_reaction_only_limit():
    g = build_grid(6, 6, (12.0, 12.0))
    pr = BiLaplacianPrior(g, eta=8.0, gamma=0.0, beta=0.0)
    x = np.random.default_rng(0).standard_normal(g.n_dof)
    assert np.allclose(pr.apply_prior_cov(x), x / 64.0, rtol=1e-12)
    assert np.all(pr.apply_prior_cov(np.zeros(g.n_dof)) == 0)


def test_cov_matches_dense(p12):
    pr, d = p12
    x = np.random.default_rng(1).standard_normal(pr.n_dof)
    assert np.allclose(pr.apply_prior_cov(x), d.cov @ (d.M * x), rtol=1e-8)
    assert np.allclose(pr.cov_matrix_apply(x), d.cov @ x, rtol=1e-8)
    assert np.allclose(pr.precision_matrix().toarray(), d.R)


def test_precision_roundtrip(p12):
    pr, _ = p12
    x = np.random.default_rng(2).standard_normal(pr.n_dof)
    assert np.allclose(pr.apply_prior_precision(pr.apply_prior_cov(x)), x, rtol=1e-8, atol=1e-10)
    assert np.allclose(pr.sqrt_precision(pr.sqrt_cov(x)), x, rtol=1e-8, atol=1e-10)
    assert np.all(pr.apply_prior_precision(np.zeros(pr.n_dof)) == 0)


def test_constant_field_pattern():
    g = build_grid(6, 6, (30.0, 30.0))
    pr = BiLaplacianPrior(g, eta=2.0, gamma=10.0, beta=3.0)
    # K annihilates constants, so A 1 = eta M 1 + beta * wall length per cell
    expect = 2.0 * g.mass() + 3.0 * wall_lengths(g)
    assert np.allclose(pr.A @ np.ones(g.n_dof), expect)
    corner = g.locate(2.5, 2.5)
    assert wall_lengths(g)[corner] == pytest.approx(10.0)
    assert np.allclose(stiffness(g) @ np.ones(g.n_dof), 0)


def test_obstacle_faces_are_walls():
    g = build_grid(6, 6, (6.0, 6.0), [RegionRect(2, 4, 2, 4)])
    k = g.locate(1.5, 2.5)  # west of the obstacle, not on the outer boundary
    assert wall_lengths(g)[k] == pytest.approx(1.0)


def test_A_spd_and_cg(p12):
    pr, d = p12
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.standard_normal(pr.n_dof)
        assert x @ (pr.A @ x) > 0
    b = rng.standard_normal(pr.n_dof)
    assert np.allclose(cg_solve(pr.A, b, tol=1e-12), np.linalg.solve(d.A, b), rtol=1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cov_self_adjoint_in_mass_product(p12, seed):
    pr, d = p12
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, pr.n_dof))
    a = pr.apply_prior_cov(x) @ (d.M * y)
    b = x @ (d.M * pr.apply_prior_cov(y))
    assert abs(a - b) <= 1e-9 * max(abs(a), abs(b), 1e-300)


def test_pointwise_variance_exact(p12):
    pr, d = p12
    assert np.allclose(pr.pointwise_variance(block=7), np.diag(d.cov), rtol=1e-10)


def test_sampling_statistics():
    g = build_grid(10, 10, (100.0, 100.0))
    pr = BiLaplacianPrior(g, eta=1.0, gamma=50.0)
    n = 2000
    samples = pr.sample_prior(seed=4, n=n)
    var = np.diag(dense_prior(pr).cov)
    interior = (g.ci > 0) & (g.ci < 9) & (g.cj > 0) & (g.cj < 9)
    emp = samples.var(axis=1, ddof=1)
    assert np.all(np.abs(emp[interior] / var[interior] - 1) <= 0.10)
    mean_err = np.abs(samples.mean(axis=1))
    assert np.all(mean_err <= 3 * np.sqrt(var / n))


def test_sampling_deterministic_and_mean():
    g = build_grid(6, 6, (6.0, 6.0))
    mean = ScalarField(g, np.full(g.n_dof, 2.0))
    pr = BiLaplacianPrior(g, mean=mean)
    a, b = pr.sample_prior(seed=5), pr.sample_prior(seed=5)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, pr.sample_prior(seed=6).values)
    assert abs(pr.sample_prior(1, 400).mean() - 2.0) < 0.1


def test_prior_contracts():
    g = build_grid(6, 6, (6.0, 6.0))
    with pytest.raises(ContractError):
        BiLaplacianPrior(g, eta=0.0)
    with pytest.raises(ContractError):
        BiLaplacianPrior(g, gamma=-1.0)
    with pytest.raises(ContractError):
        BiLaplacianPrior(g, beta=-1.0)
    other = build_grid(6, 6, (6.0, 6.0))
    with pytest.raises(ContractError):
        BiLaplacianPrior(g, mean=ScalarField(other, np.zeros(36)))
