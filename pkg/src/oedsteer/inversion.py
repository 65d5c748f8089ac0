"""Design-weighted Bayesian inversion for the initial concentration.

Conventions. ``F`` is the Euclidean matrix of the parameter-to-observable map
(see :class:`~oedsteer.transport.ForwardMap`), ``M`` the lumped mass and
``A`` the prior operator. With per-measurement weights ``W`` the Hessian in
the mass inner product is ``H = F* sigma^-2 W F + Gamma_pr^-1``; in matrix form

    ``M H = F^T sigma^-2 W F + R``,   ``R = A M^-1 A``.

``M H`` is symmetric positive definite in the Euclidean product and is what
the CG solves see. The posterior covariance operator is ``(M H)^-1 M``.

The low-rank posterior uses the generalized eigenpairs
``F^T sigma^-2 W F v = lambda R v`` with ``V^T R V = I``:

    ``(M H)^-1 ~ R^-1 - V D V^T``,   ``D = diag(lambda / (1 + lambda))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .domain import ScalarField
from .numcore import (
    DEFAULT_SEED,
    ContractError,
    ConvergenceError,
    EigenPairs,
    LinearMap,
    cg_solve,
    randomized_gen_eig,
)
from .prior import BiLaplacianPrior
from .transport import CandidateSet, Observations

EIG_FLOOR = 1e-10


@dataclass(eq=False)
class DesignWeights:
    """Relaxed design ``w`` in ``[0, 1]^p`` plus its expansion to measurements.

    Per-measurement weights are ``E w + fixed``: ``E`` (``n_meas x p``) shares
    stationary weights over time, and ``fixed`` holds weights of measurements
    outside design control (already taken, or from fixed sensors).
    """

    w: np.ndarray
    expansion: sp.csr_matrix
    fixed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).copy()
        if self.w.ndim != 1 or self.w.size != self.expansion.shape[1]:
            raise ContractError(f"expected {self.expansion.shape[1]} weights, got shape {self.w.shape}")
        if np.any(self.w < -1e-12) or np.any(self.w > 1 + 1e-12):
            raise ContractError("design weights must lie in [0, 1]")
        self.w = np.clip(self.w, 0.0, 1.0)
        if self.fixed is not None:
            self.fixed = np.asarray(self.fixed, dtype=float)
            if self.fixed.shape != (self.expansion.shape[0],):
                raise ContractError("fixed weights must have one entry per measurement")

    @classmethod
    def for_candidates(cls, cs: CandidateSet, w=None, fixed=None) -> "DesignWeights":
        w = np.ones(cs.n_weights) if w is None else w
        return cls(np.asarray(w, dtype=float), cs.expansion(), fixed)

    @property
    def n_meas(self) -> int:
        return self.expansion.shape[0]

    def with_w(self, w) -> "DesignWeights":
        return DesignWeights(w, self.expansion, self.fixed)

    def meas_weights(self) -> np.ndarray:
        out = self.expansion @ self.w
        if self.fixed is not None:
            out = out + self.fixed
        return out


class InverseProblem:
    """Context bundling the forward map, the prior and the noise level.

    ``forward`` may be a :class:`~oedsteer.transport.ForwardMap` or any object
    with the same ``apply``/``apply_transpose``/``restrict`` interface (a ROM
    view, for instance). Restrictions to the measurements with non-zero
    weight are cached so zero-weight rows cost nothing.
    """

    def __init__(self, forward, prior: BiLaplacianPrior, sigma: float):
        if sigma <= 0:
            raise ContractError("likelihood noise level sigma must be positive")
        if forward.n_dof != prior.n_dof:
            raise ContractError("forward map and prior live on different grids")
        self.forward = forward
        self.prior = prior
        self.sigma = float(sigma)
        self._restricted = {}
        self._R = None

    @property
    def n_dof(self) -> int:
        return self.prior.n_dof

    @property
    def M(self) -> np.ndarray:
        return self.prior.M

    @property
    def R(self) -> sp.csr_matrix:
        if self._R is None:
            self._R = self.prior.precision_matrix()
        return self._R

    def active(self, wm: np.ndarray):
        """``(rows, F_rows, weights)`` for measurements with non-zero weight."""
        wm = np.asarray(wm, dtype=float)
        if wm.shape != (self.forward.n_meas,):
            raise ContractError(f"need {self.forward.n_meas} measurement weights, got {wm.shape}")
        rows = np.flatnonzero(wm != 0.0)
        key = rows.tobytes()
        fr = self._restricted.get(key)
        if fr is None:
            fr = self.forward if rows.size == wm.size else self.forward.restrict(rows)
            if len(self._restricted) > 8:
                self._restricted.clear()
            self._restricted[key] = fr
        return rows, fr, wm[rows]

    def misfit_matrix_action(self, w: DesignWeights) -> LinearMap:
        """Euclidean ``K x = F^T sigma^-2 W F x`` restricted to active rows."""
        rows, fr, wa = self.active(w.meas_weights())
        n = self.n_dof
        scale = wa / self.sigma ** 2

        def apply(x):
            if rows.size == 0:
                return np.zeros_like(np.asarray(x, dtype=float))
            y = fr.apply(x)
            y = scale * y if y.ndim == 1 else scale[:, None] * y
            return fr.apply_transpose(y)

        return LinearMap((n, n), apply, apply)

    def hessian_matrix_action(self, w: DesignWeights) -> LinearMap:
        """Euclidean ``M H x = K x + A M^-1 A x``."""
        k = self.misfit_matrix_action(w)
        A, mass = self.prior.A, self.M

        def apply(x):
            mm = mass if np.ndim(x) == 1 else mass[:, None]
            return k.apply(x) + A @ ((A @ x) / mm)

        return LinearMap(k.shape, apply, apply)


def hessian_action(m: np.ndarray, w: DesignWeights, ctx: InverseProblem) -> np.ndarray:
    """``H m = F*(sigma^-2 W F m) + Gamma_pr^-1 m`` in the mass inner product."""
    m = np.asarray(m, dtype=float)
    if m.shape[0] != ctx.n_dof:
        raise ContractError("parameter vector has the wrong length")
    out = ctx.hessian_matrix_action(w).apply(m)
    return out / ctx.M if out.ndim == 1 else out / ctx.M[:, None]


def _prior_precond(ctx: InverseProblem) -> LinearMap:
    n = ctx.n_dof
    return LinearMap((n, n), ctx.prior.cov_matrix_apply, ctx.prior.cov_matrix_apply)


@dataclass
class MapResult:
    field: ScalarField
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def solve_map(obs: Observations, w: DesignWeights, ctx: InverseProblem,
              lowrank: Optional["LowRankPosterior"] = None, tol: float = 1e-10,
              maxiter: Optional[int] = None, full_output: bool = False):
    """MAP point of the weighted posterior.

    Solves ``M H m = F^T sigma^-2 W d + R m_pr`` as one inexact Newton step
    from the prior mean: the Newton system ``M H delta = -g(m_pr)`` is solved
    by CG, preconditioned by the low-rank posterior when given and by the
    prior covariance otherwise, and the final residual is checked.

    Returns:
        The MAP :class:`ScalarField`, or a :class:`MapResult` with
        ``full_output=True``.
    """
    if obs.d.shape != (ctx.forward.n_meas,):
        raise ContractError("observations are not aligned with the forward map")
    wm = w.meas_weights()
    rows, fr, wa = ctx.active(wm)
    h = ctx.hessian_matrix_action(w)
    m_pr = ctx.prior.mean.values
    data_rhs = fr.apply_transpose(wa * obs.d[rows] / ctx.sigma ** 2) if rows.size else 0.0
    grad = h.apply(m_pr) - (data_rhs + ctx.R @ m_pr)
    precond = _prior_precond(ctx) if lowrank is None else lowrank.cov_matrix_map()
    hist: list = []
    delta = cg_solve(h, -grad, tol=tol, maxiter=maxiter, precond=precond, history=hist)
    m = m_pr + delta
    rhs = data_rhs + ctx.R @ m_pr
    rnorm = np.linalg.norm(rhs)
    res = float(np.linalg.norm(h.apply(m) - rhs) / rnorm) if rnorm else 0.0
    if res > max(1e-8, 10 * tol):
        raise ConvergenceError(f"MAP residual {res:.2e} above tolerance", hist)
    out = ScalarField(ctx.prior.grid, m)
    if full_output:
        return MapResult(out, len(hist) - 1, res, hist)
    return out


class LowRankPosterior:
    """Posterior covariance ``(R^-1 - V D V^T) M`` from generalized eigenpairs."""

    def __init__(self, prior: BiLaplacianPrior, eigs: EigenPairs,
                 design: Optional[DesignWeights] = None):
        if len(eigs) and eigs.values.min() < -1e-10 * max(1.0, eigs.values.max()):
            raise ContractError("misfit eigenvalues must be non-negative")
        self.prior = prior
        self.eigs = eigs
        self.design = design
        lam = np.maximum(eigs.values, 0.0)
        self.d = lam / (1.0 + lam)

    @property
    def rank(self) -> int:
        return len(self.eigs)

    @property
    def V(self) -> np.ndarray:
        return self.eigs.vectors

    def cov_matrix_apply(self, x: np.ndarray) -> np.ndarray:
        """Euclidean ``(M H)^-1 x ~ (R^-1 - V D V^T) x``."""
        out = self.prior.cov_matrix_apply(x)
        if self.rank:
            vx = self.V.T @ x
            out = out - self.V @ (self.d * vx if vx.ndim == 1 else self.d[:, None] * vx)
        return out

    def cov_matrix_map(self) -> LinearMap:
        n = self.prior.n_dof
        return LinearMap((n, n), self.cov_matrix_apply, self.cov_matrix_apply)

    def apply_cov(self, x: np.ndarray) -> np.ndarray:
        mm = self.prior.M if np.ndim(x) == 1 else self.prior.M[:, None]
        return self.cov_matrix_apply(mm * x)

    def variance_exact(self) -> np.ndarray:
        """Exact diagonal of the represented covariance matrix."""
        diag = self.prior.pointwise_variance()
        if self.rank:
            diag = diag - (self.V ** 2) @ self.d
        return diag

    def save(self, path) -> None:
        fmt = lambda a: " ".join(repr(float(v)) for v in a)  # noqa: E731
        lines = [f"LRPOST {self.rank} {self.prior.n_dof}", fmt(self.eigs.values)]
        lines += [fmt(self.V[:, i]) for i in range(self.rank)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, prior: BiLaplacianPrior) -> "LowRankPosterior":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 3 or head[0] != "LRPOST":
            raise ValueError(f"{path}: missing LRPOST header")
        r, n = int(head[1]), int(head[2])
        if n != prior.n_dof:
            raise ContractError(f"{path}: stored n_dof {n} does not match the prior ({prior.n_dof})")
        if len(lines) < 2 + r:
            raise ValueError(f"{path}: expected {r} vector lines")
        vals = np.array([float(v) for v in lines[1].split()]) if r else np.zeros(0)
        vecs = np.zeros((n, r))
        for i in range(r):
            col = np.array([float(v) for v in lines[2 + i].split()])
            if col.size != n:
                raise ValueError(f"{path}: vector {i} has {col.size} entries, expected {n}")
            vecs[:, i] = col
        return cls(prior, EigenPairs(vals, vecs, prior.precision_matrix()))


def build_lowrank(w: DesignWeights, rank: int, ctx: InverseProblem, oversample: int = 10,
                  power_iters: int = 1, seed: int = DEFAULT_SEED,
                  floor: float = EIG_FLOOR) -> LowRankPosterior:
    """Randomized generalized eigenpairs of ``(F^T sigma^-2 W F, R)``.

    ``rank`` may not exceed ``n_dof``; it is clipped to the number of
    measurements with non-zero weight, beyond which the pencil has only zero
    eigenvalues. Pairs below ``floor`` are dropped.
    """
    if rank < 0 or rank > ctx.n_dof:
        raise ContractError(f"rank {rank} outside [0, {ctx.n_dof}]")
    rows, _, _ = ctx.active(w.meas_weights())
    rank = min(rank, rows.size)
    eigs = randomized_gen_eig(ctx.misfit_matrix_action(w), ctx.R, rank, oversample=oversample,
                              power_iters=power_iters, seed=seed,
                              metric_solve=ctx.prior.cov_matrix_apply)
    keep = int(np.sum(eigs.values >= floor))
    return LowRankPosterior(ctx.prior, eigs.truncate(keep), w)


def apply_posterior_cov(x: np.ndarray, lr: LowRankPosterior) -> np.ndarray:
    """``Gamma_post x ~ (A^-1 M A^-1 - V D V^T) M x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != lr.prior.n_dof:
        raise ContractError("vector has the wrong length")
    return lr.apply_cov(x)


@dataclass
class VarianceEstimate:
    field: ScalarField
    rel_error: float
    method: str


def pointwise_variance(lr: LowRankPosterior, n_probe: int = 200, seed: int = DEFAULT_SEED,
                       method: str = "hutchinson") -> VarianceEstimate:
    """Diagonal of the posterior covariance matrix.

    ``hutchinson`` averages ``z * C z`` over Rademacher probes and reports the
    median relative standard error; ``exact`` combines the blocked prior
    diagonal with the exact diagonal of the low-rank correction.
    """
    if n_probe < 1:
        raise ContractError("n_probe must be at least 1")
    grid = lr.prior.grid
    if method == "exact":
        return VarianceEstimate(ScalarField(grid, lr.variance_exact()), 0.0, method)
    if method != "hutchinson":
        raise ContractError(f"unknown variance method {method!r}")
    rng = np.random.default_rng(seed)
    n = lr.prior.n_dof
    acc = np.zeros(n)
    acc2 = np.zeros(n)
    block = 64
    done = 0
    while done < n_probe:
        k = min(block, n_probe - done)
        z = rng.choice([-1.0, 1.0], size=(n, k))
        s = z * lr.cov_matrix_apply(z)
        acc += s.sum(axis=1)
        acc2 += (s ** 2).sum(axis=1)
        done += k
    mean = acc / n_probe
    if n_probe > 1:
        var = np.maximum(acc2 / n_probe - mean ** 2, 0.0) * n_probe / (n_probe - 1)
        stderr = np.sqrt(var / n_probe)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(np.abs(mean) > 0, stderr / np.abs(mean), 0.0)
        rel_error = float(np.median(rel))
    else:
        rel_error = float("inf")
    return VarianceEstimate(ScalarField(grid, mean), rel_error, method)


def goal_variance_exact(c: np.ndarray, w: DesignWeights, ctx: InverseProblem,
                        tol: float = 1e-10) -> float:
    """``c^T M (M H)^-1 M c`` by one prior-preconditioned CG solve."""
    mc = ctx.M * np.asarray(c, dtype=float)
    if not mc.any():
        return 0.0
    x = cg_solve(ctx.hessian_matrix_action(w), mc, tol=tol, precond=_prior_precond(ctx))
    return float(mc @ x)
