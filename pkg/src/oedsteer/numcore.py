"""Sparse operators, Krylov solves and randomized low-rank factorizations.

Everything in the inversion stack goes through three primitives defined here:

* :func:`cg_solve`: preconditioned conjugate gradients with a residual history,
* :func:`randomized_svd`: range-finder SVD of a matrix-free map,
* :func:`randomized_gen_eig`: double-pass eigensolver for a symmetric pencil
  ``H v = lambda B v`` with sparse SPD ``B``.

Operators act on 1-D vectors or on 2-D blocks whose columns are vectors, so the
PDE-backed maps can push a whole probe block through one time integration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_SEED = 20240917


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class ConvergenceError(RuntimeError):
    """Iterative solver failed; ``history`` holds the relative residuals."""

    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


def sparse_operator(rows, cols, values, shape, symmetric: bool = False) -> sp.csr_matrix:
    """Assemble a CSR matrix from triplets, summing duplicate entries.

    With ``symmetric=True`` the assembled matrix is checked entry-wise against
    its transpose (relative tolerance 1e-12).
    """
    if shape[0] <= 0 or shape[1] <= 0:
        raise ContractError(f"operator dimensions must be positive, got {shape}")
    mat = sp.coo_matrix((values, (rows, cols)), shape=shape).tocsr()
    mat.sum_duplicates()
    if symmetric:
        check_symmetric(mat)
    return mat


def check_symmetric(mat: sp.spmatrix, rtol: float = 1e-12) -> None:
    if mat.shape[0] != mat.shape[1]:
        raise ContractError("symmetric operator must be square")
    diff = abs(mat - mat.T)
    scale = abs(mat).max() if mat.nnz else 0.0
    if diff.nnz and diff.max() > rtol * scale:
        raise ContractError(f"operator not symmetric: max |A - A^T| = {diff.max():.3e}")


@dataclass(frozen=True, eq=False)
class LinearMap:
    """Matrix-free linear map ``R^n -> R^m``.

    ``apply`` (and ``apply_adjoint``, the Euclidean transpose) accept a vector
    of length ``n`` or a block of shape ``(n, k)``.
    """

    shape: tuple[int, int]
    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)

    @property
    def T(self) -> "LinearMap":
        if self.apply_adjoint is None:
            raise ContractError("linear map has no adjoint")
        return LinearMap((self.shape[1], self.shape[0]), self.apply_adjoint, self.apply)

    @classmethod
    def from_matrix(cls, mat) -> "LinearMap":
        return cls(tuple(mat.shape), lambda x: mat @ x, lambda y: mat.T @ y)

    @classmethod
    def identity(cls, n: int) -> "LinearMap":
        return cls((n, n), lambda x: np.array(x, dtype=float), lambda x: np.array(x, dtype=float))


def as_linear_map(op) -> LinearMap:
    if isinstance(op, LinearMap):
        return op
    if sp.issparse(op) or isinstance(op, np.ndarray):
        return LinearMap.from_matrix(op)
    if callable(op):
        raise ContractError("bare callables need an explicit LinearMap with a shape")
    raise TypeError(f"cannot interpret {type(op).__name__} as a linear map")


@dataclass
class EigenPairs:
    """Eigenpairs of ``H v = lambda B v``; vectors are ``B``-orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray
    metric: sp.spmatrix

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.values) > 0):
            raise ContractError("eigenvalues must be sorted in descending order")
        if self.vectors.shape[1] != self.values.size:
            raise ContractError("one eigenvector column per eigenvalue expected")

    def __len__(self) -> int:
        return self.values.size

    def orthonormality_error(self) -> float:
        if len(self) == 0:
            return 0.0
        gram = self.vectors.T @ (self.metric @ self.vectors)
        return float(np.abs(gram - np.eye(len(self))).max())

    def residuals(self, misfit_action: LinearMap) -> np.ndarray:
        """Pencil residual norms ``||H v_i - lambda_i B v_i||``."""
        if len(self) == 0:
            return np.zeros(0)
        hv = misfit_action.apply(self.vectors)
        bv = self.metric @ self.vectors
        return np.linalg.norm(hv - bv * self.values, axis=0)

    def truncate(self, rank: int) -> "EigenPairs":
        return EigenPairs(self.values[:rank], self.vectors[:, :rank], self.metric)


def cg_solve(
    op,
    rhs: np.ndarray,
    tol: float = 1e-10,
    maxiter: Optional[int] = None,
    precond=None,
    x0: Optional[np.ndarray] = None,
    history: Optional[list] = None,
) -> np.ndarray:
    """Preconditioned conjugate gradients for a symmetric positive definite ``op``.

    Stops when ``||op(x) - rhs|| <= tol * ||rhs||`` (recursively updated
    residual). No restarts: a non-positive curvature ``p^T op p`` aborts with
    :class:`ConvergenceError`, as does exhausting ``maxiter``.

    Args:
        op: ``LinearMap``, dense or sparse matrix.
        rhs: right-hand side vector.
        tol: relative residual target, must be positive.
        maxiter: iteration cap (default ``10 * n``).
        precond: optional SPD preconditioner applied to residuals.
        x0: starting guess.
        history: if given, relative residuals are appended per iteration.
    """
    op = as_linear_map(op)
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    if op.shape != (n, n):
        raise ContractError(f"operator shape {op.shape} does not match rhs of length {n}")
    if tol <= 0:
        raise ContractError("tol must be positive")
    apply_m = (lambda r: r) if precond is None else as_linear_map(precond).apply
    maxiter = 10 * n if maxiter is None else maxiter
    hist = [] if history is None else history

    bnorm = np.linalg.norm(rhs)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        hist.append(0.0)
        return np.zeros(n)
    r = rhs - op.apply(x) if x0 is not None else rhs.copy()
    rel = np.linalg.norm(r) / bnorm
    hist.append(rel)
    if rel <= tol:
        return x
    z = apply_m(r)
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        ap = op.apply(p)
        curv = p @ ap
        if curv <= 0.0:
            raise ConvergenceError(
                f"CG breakdown: p^T A p = {curv:.3e} (operator not positive definite)", hist)
        alpha = rz / curv
        x += alpha * p
        r -= alpha * ap
        rel = np.linalg.norm(r) / bnorm
        hist.append(rel)
        if rel <= tol:
            return x
        z = apply_m(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG did not reach relative residual {tol:.1e} in {maxiter} iterations "
        f"(last {rel:.3e})", hist)


def _orthonormal_basis(y: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(y)
    return q


def randomized_svd(
    op,
    rank: int,
    oversample: int = 10,
    power_iters: int = 1,
    seed: int = DEFAULT_SEED,
):
    """Truncated SVD ``op ~ U diag(S) V^T`` by a Gaussian range finder.

    ``rank + oversample`` probe columns are pushed through ``op`` (with
    ``power_iters`` rounds of ``op op^T`` to sharpen the spectrum), the range
    is orthonormalized and the small projected matrix is factored densely.
    Oversampling is clipped so that the probe count never exceeds
    ``min(op.shape)``.

    Returns:
        ``(U, S, V)`` with ``U`` of shape ``(m, rank)``, ``S`` descending and
        ``V`` of shape ``(n, rank)``.
    """
    op = as_linear_map(op)
    if op.apply_adjoint is None:
        raise ContractError("randomized_svd needs apply_adjoint")
    m, n = op.shape
    if rank < 1 or rank > min(m, n):
        raise ContractError(f"rank {rank} outside [1, {min(m, n)}]")
    k = min(rank + max(oversample, 0), m, n)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, k))
    q = _orthonormal_basis(op.apply(omega))
    for _ in range(power_iters):
        z = _orthonormal_basis(op.apply_adjoint(q))
        q = _orthonormal_basis(op.apply(z))
    bt = op.apply_adjoint(q)  # B^T with B = Q^T op
    vb, s, ubt = np.linalg.svd(bt, full_matrices=False)
    u = q @ ubt.T
    return u[:, :rank], s[:rank], vb[:, :rank]


def probe_residual_norm(op, u, s, v, n_iter: int = 20, seed: int = DEFAULT_SEED) -> float:
    """Power-iteration estimate of ``||op - U diag(S) V^T||_2``."""
    op = as_linear_map(op)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(n_iter):
        y = op.apply(x) - u @ (s * (v.T @ x))
        est = np.linalg.norm(y)
        if est == 0.0:
            return 0.0
        xt = op.apply_adjoint(y) - v @ (s * (u.T @ y))
        nrm = np.linalg.norm(xt)
        if nrm == 0.0:
            return est
        x = xt / nrm
    return float(est)


def metric_orthonormalize(y: np.ndarray, metric, drop_tol: float = 1e-10):
    """Columns spanning ``range(y)``, orthonormal in ``<a, b> = a^T B b``.

    Block-free classical Gram-Schmidt with one re-orthogonalization pass.
    Columns whose norm collapses below ``drop_tol`` times their original norm
    are dropped, so rank-deficient inputs give a narrower basis.
    """
    n, k = y.shape
    q = np.zeros((n, k))
    bq = np.zeros((n, k))
    m = 0
    for j in range(k):
        col = y[:, j].copy()
        bcol = metric @ col
        nrm0 = np.sqrt(max(col @ bcol, 0.0))
        if nrm0 == 0.0:
            continue
        for _ in range(2):
            if m:
                coef = bq[:, :m].T @ col
                col -= q[:, :m] @ coef
            bcol = metric @ col
        nrm = np.sqrt(max(col @ bcol, 0.0))
        if nrm <= drop_tol * nrm0:
            continue
        q[:, m] = col / nrm
        bq[:, m] = bcol / nrm
        m += 1
    return q[:, :m], bq[:, :m]


def randomized_gen_eig(
    misfit_action,
    metric,
    rank: int,
    oversample: int = 10,
    power_iters: int = 1,
    seed: int = DEFAULT_SEED,
    metric_solve: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> EigenPairs:
    """Dominant eigenpairs of ``H v = lambda B v`` by a double-pass randomized method.

    ``H`` (``misfit_action``) is symmetric positive semi-definite and only
    available through its action; ``B`` (``metric``) is sparse SPD. Solves
    with ``B`` use ``metric_solve`` when supplied, otherwise a sparse LU of
    ``B``. Returns ``rank`` pairs with ``B``-orthonormal eigenvectors.

    If the sampled range of ``B^{-1} H`` is narrower than ``rank`` the
    remaining vectors are completed ``B``-orthogonally from fresh random
    directions; they lie in the null space of ``H`` and carry eigenvalue 0.
    """
    h = as_linear_map(misfit_action)
    metric = sp.csr_matrix(metric)
    n = metric.shape[0]
    if h.shape != (n, n):
        raise ContractError(f"misfit shape {h.shape} does not match metric of size {n}")
    if rank < 0 or rank > n:
        raise ContractError(f"rank {rank} exceeds dimension {n}")
    if rank == 0:
        return EigenPairs(np.zeros(0), np.zeros((n, 0)), metric)
    if metric_solve is None:
        lu = spla.splu(sp.csc_matrix(metric))
        metric_solve = lu.solve

    k = min(rank + max(oversample, 0), n)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, k))
    y = metric_solve(h.apply(omega))
    for _ in range(power_iters):
        q, _ = metric_orthonormalize(y, metric)
        if q.shape[1] == 0:
            break
        y = metric_solve(h.apply(q))
    q, _ = metric_orthonormalize(y, metric)

    if q.shape[1] < rank:
        extra = rng.standard_normal((n, n if rank == n else min(n, 2 * (rank - q.shape[1]) + 5)))
        q, _ = metric_orthonormalize(np.hstack([q, extra]), metric)
        q = q[:, :max(rank, 0)]
    hq = h.apply(q)
    t = q.T @ hq
    t = 0.5 * (t + t.T)
    vals, vecs = sla.eigh(t)
    order = np.argsort(vals)[::-1]
    vals = vals[order][:rank]
    vecs = q @ vecs[:, order][:, :rank]
    return EigenPairs(vals, vecs, metric)
