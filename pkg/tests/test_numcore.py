import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from oedsteer.numcore import (
    ContractError, ConvergenceError, LinearMap, cg_solve, metric_orthonormalize,
    probe_residual_norm, randomized_gen_eig, randomized_svd,
)


def spd(n, seed, cond=50.0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.geomspace(1.0, cond, n)) @ q.T


def test_cg_identity_one_iteration():
    v = np.arange(1.0, 6.0)
    hist = []
    x = cg_solve(np.eye(5), v, history=hist)
    assert np.allclose(x, v)
    assert len(hist) == 2


def test_cg_diagonal():
    n = 12
    x = cg_solve(sp.diags(np.arange(1.0, n + 1)), np.ones(n))
    assert np.allclose(x, 1.0 / np.arange(1, n + 1), rtol=1e-9)


def test_cg_matches_dense_solve_5x5():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((5, 5))
    A = B @ B.T + 5 * np.eye(5)
    b = rng.standard_normal(5)
    assert np.allclose(cg_solve(A, b, tol=1e-12), np.linalg.solve(A, b), rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 64), seed=st.integers(0, 10_000))
def test_cg_converges_within_dimension(n, seed):
    # finite termination is an exact-arithmetic property; a mild condition
    # number keeps round-off loss of conjugacy below the tolerance
    A = spd(n, seed, cond=10.0)
    b = np.random.default_rng(seed + 1).standard_normal(n)
    x = cg_solve(A, b, tol=1e-8, maxiter=n)
    assert np.linalg.norm(A @ x - b) <= 1.01e-8 * np.linalg.norm(b)


def test_cg_preconditioner_and_history():
    A = spd(30, 1, cond=1e4)
    b = np.ones(30)
    h_plain, h_pc = [], []
    cg_solve(A, b, history=h_plain)
    x = cg_solve(A, b, precond=np.linalg.inv(A), history=h_pc)
    assert len(h_pc) <= 3 < len(h_plain)
    assert np.allclose(A @ x, b)


def test_cg_zero_rhs_and_errors():
    assert np.all(cg_solve(np.eye(3), np.zeros(3)) == 0)
    with pytest.raises(ConvergenceError):
        cg_solve(-np.eye(3), np.ones(3))
    with pytest.raises(ConvergenceError) as exc:
        cg_solve(spd(40, 2, 1e6), np.ones(40), maxiter=2)
    assert len(exc.value.history) == 3
    with pytest.raises(ContractError):
        cg_solve(np.eye(3), np.ones(4))
    with pytest.raises(ContractError):
        cg_solve(np.eye(3), np.ones(3), tol=0)


def test_rsvd_rank_two_outer_product():
    rng = np.random.default_rng(0)
    a, b = np.linalg.qr(rng.standard_normal((40, 2)))[0], np.linalg.qr(rng.standard_normal((25, 2)))[0]
    mat = 3.0 * np.outer(a[:, 0], b[:, 0]) + 0.5 * np.outer(a[:, 1], b[:, 1])
    _, s, _ = randomized_svd(mat, 2)
    assert np.allclose(s, [3.0, 0.5], atol=1e-10)


def test_rsvd_diagonal():
    _, s, _ = randomized_svd(np.diag(0.5 ** np.arange(12)), 3)
    assert np.allclose(s, [1.0, 0.5, 0.25], atol=1e-8)


def test_rsvd_dense_oracle_and_orthonormality():
    rng = np.random.default_rng(5)
    mat = rng.standard_normal((50, 30)) * 0.7 ** np.arange(30)
    u, s, v = randomized_svd(mat, 10, power_iters=2)
    ref = np.linalg.svd(mat, compute_uv=False)[:10]
    assert np.allclose(s, ref, rtol=1e-6)
    assert np.all(np.diff(s) <= 0)
    assert np.abs(u.T @ u - np.eye(10)).max() < 1e-8
    assert np.abs(v.T @ v - np.eye(10)).max() < 1e-8
    tail = probe_residual_norm(mat, u, s, v, n_iter=50)
    assert tail == pytest.approx(np.linalg.svd(mat, compute_uv=False)[10], rel=1e-3)


def test_rsvd_seeded_and_contracts():
    mat = np.random.default_rng(1).standard_normal((20, 15))
    a, b = randomized_svd(mat, 4, seed=9), randomized_svd(mat, 4, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ContractError):
        randomized_svd(mat, 16)
    with pytest.raises(ContractError):
        randomized_svd(LinearMap((20, 15), lambda x: mat @ x), 3)


def test_gen_eig_identity_pencil_and_zero():
    B = sp.csr_matrix(spd(10, 4))
    eig = randomized_gen_eig(LinearMap.from_matrix(B), B, 3)
    assert np.allclose(eig.values, 1.0)
    zero = LinearMap((10, 10), lambda x: np.zeros_like(x), lambda x: np.zeros_like(x))
    eig0 = randomized_gen_eig(zero, B, 2)
    assert np.allclose(eig0.values, 0.0)
    assert eig0.orthonormality_error() < 1e-8


def test_gen_eig_dense_oracle():
    n = 20
    rng = np.random.default_rng(11)
    G = rng.standard_normal((n, 6)) * np.array([10, 5, 3, 1, 0.3, 0.1])
    H = G @ G.T
    B = spd(n, 12, 10.0)
    eig = randomized_gen_eig(H, sp.csr_matrix(B), 5, power_iters=2)
    ref = sla.eigh(H, B, eigvals_only=True)[::-1][:5]
    assert np.allclose(eig.values, ref, rtol=1e-8)
    assert eig.orthonormality_error() < 1e-8
    res = eig.residuals(LinearMap.from_matrix(H))
    assert np.all(res <= 1e-8 * max(1.0, eig.values[0]))
    assert len(eig.truncate(2)) == 2


def test_metric_orthonormalize_drops_dependent_columns():
    B = spd(8, 3)
    y = np.random.default_rng(0).standard_normal((8, 3))
    y = np.hstack([y, y[:, :1] + y[:, 1:2]])
    q, bq = metric_orthonormalize(y, B)
    assert q.shape[1] == 3
    assert np.allclose(q.T @ B @ q, np.eye(3), atol=1e-10)
    assert np.allclose(bq, B @ q)


def test_linear_map_transpose():
    mat = np.arange(6.0).reshape(2, 3)
    op = LinearMap.from_matrix(mat)
    assert np.allclose(op.T(np.ones(2)), mat.T @ np.ones(2))
    assert op.T.shape == (3, 2)
