"""Gaussian prior with covariance ``A^{-1} M A^{-1} M``.

``A`` discretizes ``eta I - gamma Laplacian`` with the Robin condition
``gamma dm/dn + beta m = 0`` on every wall, outer or obstacle. On the
finite-volume grid ``A = eta M + gamma K + beta Bnd`` with ``K`` the two-point
stiffness matrix and ``Bnd`` the diagonal of wall lengths per cell.

As operators on ``(R^n, <.,.>_M)`` the covariance factors as
``Gamma = S S`` with the self-adjoint square root ``S = A^{-1} M``; the
coefficient-space covariance matrix is ``A^{-1} M A^{-1}``, whose inverse
``R = A M^{-1} A`` is the precision matrix.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Grid, ScalarField, _face_lists
from .numcore import ContractError

DEFAULT_ETA = 8.0
DEFAULT_GAMMA = 800.0


def robin_beta(eta: float, gamma: float) -> float:
    return float(np.sqrt(gamma * eta) / 1.42)


def wall_lengths(grid: Grid) -> np.ndarray:
    """Per-dof length of cell faces lying on the outer boundary or on obstacles."""
    g = grid
    solid = np.pad(g.mask, 1, constant_values=True)
    fluid = ~g.mask
    walls = np.zeros((g.ny, g.nx))
    walls += solid[1:-1, :-2] * g.dy  # west neighbour
    walls += solid[1:-1, 2:] * g.dy   # east
    walls += solid[:-2, 1:-1] * g.dx  # south
    walls += solid[2:, 1:-1] * g.dx   # north
    return (walls * fluid).ravel()[g.cells]


def stiffness(grid: Grid) -> sp.csr_matrix:
    g = grid
    av, bv, ah, bh = _face_lists(g)
    cv, ch = g.dy / g.dx, g.dx / g.dy
    a = np.concatenate([av, ah])
    b = np.concatenate([bv, bh])
    c = np.concatenate([np.full(av.size, cv), np.full(ah.size, ch)])
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([c, c, -c, -c])
    return sp.csr_matrix((vals, (rows, cols)), shape=(g.n_dof, g.n_dof))


class BiLaplacianPrior:
    """Trace-class Gaussian prior; all covariance actions go through a sparse factor of ``A``."""

    def __init__(self, grid: Grid, eta: float = DEFAULT_ETA, gamma: float = DEFAULT_GAMMA,
                 beta: Optional[float] = None, mean: Optional[ScalarField] = None):
        if eta <= 0:
            raise ContractError("eta must be positive")
        if gamma < 0:
            raise ContractError("gamma must be non-negative")
        beta = robin_beta(eta, gamma) if beta is None else beta
        if beta < 0:
            raise ContractError("beta must be non-negative")
        self.grid = grid
        self.eta, self.gamma, self.beta = float(eta), float(gamma), float(beta)
        self.M = grid.mass()
        self.A = (sp.diags(eta * self.M) + gamma * stiffness(grid)
                  + sp.diags(beta * wall_lengths(grid))).tocsc()
        self._lu = spla.splu(self.A)
        if mean is None:
            mean = ScalarField(grid, np.zeros(grid.n_dof))
        if mean.grid is not grid:
            raise ContractError("prior mean lives on a different grid")
        self.mean = mean

    @property
    def n_dof(self) -> int:
        return self.grid.n_dof

    def _mcol(self, x):
        return self.M if x.ndim == 1 else self.M[:, None]

    def solve_A(self, x: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.ascontiguousarray(x, dtype=float))

    def sqrt_cov(self, x: np.ndarray) -> np.ndarray:
        """Self-adjoint square root ``A^{-1} M x`` of the covariance operator."""
        return self.solve_A(self._mcol(x) * x)

    def sqrt_precision(self, x: np.ndarray) -> np.ndarray:
        """``M^{-1} A x``, inverse of :meth:`sqrt_cov`."""
        return (self.A @ x) / self._mcol(x)

    def apply_prior_cov(self, x: np.ndarray) -> np.ndarray:
        """``Gamma_pr x = A^{-1} M A^{-1} M x``."""
        return self.sqrt_cov(self.sqrt_cov(x))

    def apply_prior_precision(self, x: np.ndarray) -> np.ndarray:
        """``Gamma_pr^{-1} x = M^{-1} A M^{-1} A x``."""
        return self.sqrt_precision(self.sqrt_precision(x))

    def cov_matrix_apply(self, x: np.ndarray) -> np.ndarray:
        """Coefficient covariance ``A^{-1} M A^{-1} x`` (= ``R^{-1} x``)."""
        return self.solve_A(self._mcol(x) * self.solve_A(x))

    def precision_matrix(self) -> sp.csr_matrix:
        """``R = A M^{-1} A``, the metric of the prior-preconditioned eigenproblem."""
        return (self.A @ sp.diags(1.0 / self.M) @ self.A).tocsr()

    def sample_prior(self, seed: int = 0, n: Optional[int] = None) -> ScalarField | np.ndarray:
        """Draw ``mean + A^{-1} M^{1/2} xi``; ``n`` returns an ``(n_dof, n)`` block instead."""
        rng = np.random.default_rng(seed)
        if n is None:
            xi = rng.standard_normal(self.n_dof)
            return ScalarField(self.grid, self.mean.values + self.solve_A(np.sqrt(self.M) * xi))
        xi = rng.standard_normal((self.n_dof, n))
        return self.mean.values[:, None] + self.solve_A(np.sqrt(self.M)[:, None] * xi)

    def pointwise_variance(self, block: int = 256) -> np.ndarray:
        """Exact ``diag(A^{-1} M A^{-1})`` by blocked solves with ``A``."""
        n = self.n_dof
        diag = np.zeros(n)
        for start in range(0, n, block):
            cols = np.arange(start, min(start + block, n))
            e = np.zeros((n, cols.size))
            e[cols, np.arange(cols.size)] = 1.0
            x = self.solve_A(e)  # columns of A^{-1} = rows, A symmetric
            diag += (x ** 2) @ self.M[cols]
        return diag
