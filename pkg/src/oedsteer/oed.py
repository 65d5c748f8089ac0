"""Goal-oriented (C-optimal) sensor placement.

The design objective for a goal vector ``c`` is

    ``J(w) = <c, Gamma_post(w) c>_M + alpha * sum(w)``

and its data-term derivative with respect to a per-measurement weight is
``-sigma^-2 (F q)_i^2`` with ``q = Gamma_post(w) c``; stationary weights sum
these over their time samples.

Two evaluation routes are available:

``full``
    rebuild the low-rank posterior with the PDE-backed forward map for each
    ``w`` (exact at full rank; used on small problems).
``rom``
    use a prior-preconditioned ROM ``F ~ V S U^T A``. The pencil then
    reduces to the ``r x r`` matrix ``K(w) = sum_i w_i sigma^-2 s_i s_i^T``
    with ``s_i = S * V[i, :]``, which makes objective and gradient cost
    ``O(q r^2)`` per evaluation, exact for the surrogate.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt
import scipy.sparse as sp

from .domain import QoiSpec, RegionRect, region_indicator
from .fileio import write_csv
from .inversion import (
    EIG_FLOOR,
    DesignWeights,
    InverseProblem,
    LowRankPosterior,
    build_lowrank,
)
from .numcore import DEFAULT_SEED, ContractError, EigenPairs
from .rom import RomOperator
from .transport import CandidateSet, TransportConfig, transport_model

FULL = "full"
ROM = "rom"


@dataclass(eq=False)
class GoalVector:
    """Representer ``c`` of the QoI functional: ``QoI(m) = <m, c>_M``."""

    c: np.ndarray
    qoi: QoiSpec

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if not np.all(np.isfinite(self.c)):
            raise ValueError("goal vector must be finite")


def goal_vector_initial(region: RegionRect, grid) -> GoalVector:
    """Indicator of ``region``: the QoI is the integral of the initial condition over it."""
    grid = getattr(grid, "grid", grid)
    return GoalVector(region_indicator(grid, region).values, QoiSpec(region))


def _window_weights(cfg: TransportConfig, t_start: float, t_end: float) -> dict:
    """Trapezoid weights on the time grid for ``int_{t_start}^{t_end} dt``."""
    if not 0 <= t_start <= t_end <= cfg.T + 1e-9:
        raise ContractError("QoI window must satisfy 0 <= t_start <= t_end <= T")
    k0, k1 = cfg.step_of(t_start), cfg.step_of(t_end)
    if k1 == k0:
        return {}
    wts = {k: cfg.dt for k in range(k0, k1 + 1)}
    wts[k0] = wts[k1] = 0.5 * cfg.dt
    return wts


def spacetime_qoi(m: np.ndarray, qoi: QoiSpec, cfg: TransportConfig) -> float:
    """Forward evaluation of ``int_{T0}^{T1} int_P u dx dt`` (trapezoid in time)."""
    grid = cfg.grid
    model = transport_model(cfg)
    chi_m = region_indicator(grid, qoi.region).values * grid.mass()
    wts = _window_weights(cfg, qoi.t_start, qoi.t_end)
    u = np.asarray(m, dtype=float).copy()
    total = wts.get(0, 0.0) * (chi_m @ u)
    for k in range(1, max(wts, default=0) + 1):
        u = model.step(u)
        if k in wts:
            total += wts[k] * (chi_m @ u)
    return float(total)


def goal_vector_spacetime(qoi: QoiSpec, cfg: TransportConfig) -> GoalVector:
    """Representer of the space-time QoI by one backward sweep.

    The QoI is ``sum_k w_k (M chi)^T P^k m`` with ``P = B^-1 M`` the implicit
    Euler propagator, so ``M c = sum_k (P^T)^k w_k M chi``.
    """
    grid = cfg.grid
    chi_m = region_indicator(grid, qoi.region).values * grid.mass()
    wts = _window_weights(cfg, qoi.t_start, qoi.t_end)
    sources = {k: wk * chi_m for k, wk in wts.items()}
    mc = transport_model(cfg).adjoint_sweep(sources)
    return GoalVector(mc / grid.mass(), qoi)


def goal_vector(qoi: QoiSpec, cfg: TransportConfig) -> GoalVector:
    if qoi.is_initial:
        return goal_vector_initial(qoi.region, cfg.grid)
    return goal_vector_spacetime(qoi, cfg)


@dataclass(eq=False)
class DesignProblem:
    candidate_set: CandidateSet
    goal: GoalVector
    alpha: float
    sigma: float
    rank: int
    threshold: float = 0.5
    fixed: Optional[np.ndarray] = None
    route: str = FULL
    oversample: int = 10
    seed: int = DEFAULT_SEED
    expansion: Optional[sp.csr_matrix] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if not 0 < self.threshold < 1:
            raise ContractError("threshold must lie in (0, 1)")
        if self.sigma <= 0:
            raise ContractError("sigma must be positive")
        if self.rank < 0:
            raise ContractError("rank must be non-negative")
        if self.route not in (FULL, ROM):
            raise ContractError(f"unknown evaluation route {self.route!r}")
        if self.expansion is None:
            self.expansion = self.candidate_set.expansion()
        elif self.expansion.shape[0] != self.candidate_set.n_meas:
            raise ContractError("expansion rows must match the candidate measurements")

    @property
    def n_weights(self) -> int:
        return self.expansion.shape[1]

    def weights(self, w) -> DesignWeights:
        return DesignWeights(np.asarray(w, dtype=float), self.expansion, self.fixed)


class DesignEvaluator:
    """Objective and gradient of a :class:`DesignProblem`, cached on the last ``w``."""

    def __init__(self, dp: DesignProblem, ctx: InverseProblem, rom: Optional[RomOperator] = None):
        if ctx.forward.n_meas != dp.candidate_set.n_meas:
            raise ContractError("forward map rows do not match the candidate set")
        self.dp = dp
        self.ctx = ctx if ctx.sigma == dp.sigma else InverseProblem(ctx.forward, ctx.prior, dp.sigma)
        self.E = dp.expansion
        self.c = dp.goal.c
        self.mc = self.ctx.M * self.c
        self._cache: dict = {}
        if dp.route == ROM:
            if rom is None or not rom.preconditioned:
                raise ContractError("the ROM route needs a prior-preconditioned ROM")
            if rom.n_meas != dp.candidate_set.n_meas or rom.n_dof != ctx.n_dof:
                raise ContractError("ROM dimensions do not match the design problem")
            self.rom = rom
            prior = self.ctx.prior
            a = prior.sqrt_cov(self.c)
            self._aMa = float(a @ (prior.M * a))
            self._b = rom.U.T @ (prior.M * a)
            self._s = rom.V * rom.S  # row i is s_i

    def evaluate(self, w: np.ndarray):
        """Return ``(data_term, gradient_of_data_term)``."""
        w = np.asarray(w, dtype=float)
        key = w.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.dp.route == ROM:
            out = self._eval_rom(w)
        else:
            out = self._eval_full(w)
        if len(self._cache) > 16:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _eval_full(self, w):
        dw = self.dp.weights(w)
        if not self.c.any():
            return 0.0, np.zeros(w.size)
        lr = build_lowrank(dw, self.dp.rank, self.ctx, oversample=self.dp.oversample,
                           seed=self.dp.seed)
        q = lr.apply_cov(self.c)
        data = float(self.mc @ q)
        fq = self.ctx.forward.apply(q)
        g_meas = -(fq ** 2) / self.dp.sigma ** 2
        return data, np.asarray(self.E.T @ g_meas)

    def _eval_rom(self, w):
        wm = self.dp.weights(w).meas_weights()
        rows = np.flatnonzero(wm)
        s = self._s
        sa = s[rows]
        k = (sa.T * (wm[rows] / self.dp.sigma ** 2)) @ sa
        lam, Q = sla.eigh(0.5 * (k + k.T))
        lam = np.maximum(lam, 0.0)
        qb = Q.T @ self._b
        d = lam / (1.0 + lam)
        data = self._aMa - float(qb @ (d * qb))
        q_red = self._b - Q @ (d * qb)
        g_meas = -((s @ q_red) ** 2) / self.dp.sigma ** 2
        return data, np.asarray(self.E.T @ g_meas)

    def lowrank(self, w) -> LowRankPosterior:
        """Low-rank posterior for ``w`` on this evaluator's route.

        On the ROM route the eigenvectors are ``A^-1 M U Q`` with ``Q`` the
        eigenvectors of the reduced pencil; they are ``R``-orthonormal.
        """
        dw = self.dp.weights(w)
        if self.dp.route == FULL:
            return build_lowrank(dw, self.dp.rank, self.ctx, oversample=self.dp.oversample,
                                 seed=self.dp.seed)
        wm = dw.meas_weights()
        rows = np.flatnonzero(wm)
        sa = self._s[rows]
        k = (sa.T * (wm[rows] / self.dp.sigma ** 2)) @ sa
        lam, Q = sla.eigh(0.5 * (k + k.T))
        order = np.argsort(lam)[::-1]
        lam, Q = lam[order], Q[:, order]
        keep = lam >= EIG_FLOOR
        prior = self.ctx.prior
        vecs = prior.sqrt_cov(self.rom.U @ Q[:, keep])
        return LowRankPosterior(prior, EigenPairs(lam[keep], vecs, self.ctx.R), dw)

    def objective(self, w) -> float:
        data, _ = self.evaluate(w)
        return data + self.dp.alpha * float(np.sum(w))

    def gradient(self, w) -> np.ndarray:
        _, g = self.evaluate(w)
        return g + self.dp.alpha


def trace_objective(w: DesignWeights, dp: DesignProblem, ctx: InverseProblem,
                    rom: Optional[RomOperator] = None) -> float:
    """``<c, Gamma_post(w) c>_M + alpha * ||w||_1``."""
    return DesignEvaluator(dp, ctx, rom).objective(w.w)


def trace_gradient(w: DesignWeights, dp: DesignProblem, ctx: InverseProblem,
                   rom: Optional[RomOperator] = None) -> np.ndarray:
    """Gradient of :func:`trace_objective` with respect to the design weights."""
    return DesignEvaluator(dp, ctx, rom).gradient(w.w)


def projected_gradient(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    pg = g.copy()
    pg[(w <= 0.0) & (g > 0)] = 0.0
    pg[(w >= 1.0) & (g < 0)] = 0.0
    return pg


@dataclass
class OptimizeHistory:
    objective: list = field(default_factory=list)
    projected_grad: float = float("nan")
    iterations: int = 0
    evaluations: int = 0
    converged: bool = False
    warning: bool = False
    message: str = ""


def optimize_design(dp: DesignProblem, w0: DesignWeights, ctx: InverseProblem,
                    rom: Optional[RomOperator] = None, maxiter: int = 500,
                    rtol: float = 1e-6, evaluator: Optional[DesignEvaluator] = None):
    """Minimize the design objective over the box ``[0, 1]^p`` with L-BFGS-B.

    Stops once the infinity norm of the projected gradient is at most
    ``rtol * (1 + |J|)`` or after ``maxiter`` iterations. The L-BFGS-B run is
    restarted from its last iterate when it stops on its own criteria before
    that test holds. A line-search failure returns the best iterate seen with
    ``history.warning`` set.

    Returns:
        ``(w_opt, history)``.
    """
    ev = evaluator or DesignEvaluator(dp, ctx, rom)
    hist = OptimizeHistory()
    x = np.clip(np.asarray(w0.w, dtype=float), 0.0, 1.0)
    f = ev.objective(x)
    hist.objective.append(f)
    best = (f, x.copy())
    nfev = 0

    def fun(z):
        nonlocal best, nfev
        nfev += 1
        val = ev.objective(z)
        if val < best[0]:
            best = (val, z.copy())
        return val, ev.gradient(z)

    def callback(xk):
        val = ev.objective(xk)
        if val <= hist.objective[-1]:
            hist.objective.append(val)

    bounds = [(0.0, 1.0)] * x.size
    while True:
        f = ev.objective(x)
        pg = np.abs(projected_gradient(x, ev.gradient(x))).max(initial=0.0)
        hist.projected_grad = float(pg)
        if pg <= rtol * (1.0 + abs(f)):
            hist.converged = True
            break
        left = maxiter - hist.iterations
        if left <= 0:
            hist.message = "iteration limit reached"
            break
        res = sopt.minimize(fun, x, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                            options=dict(maxiter=left, gtol=rtol * (1.0 + abs(f)), ftol=1e-15,
                                         maxcor=20, maxls=40))
        hist.iterations += max(int(res.nit), 0)
        hist.message = str(res.message)
        x_new = np.clip(res.x, 0.0, 1.0)
        if "ABNORMAL" in hist.message.upper() or res.status == 2:
            hist.warning = True
            x = best[1]
            break
        if res.nit == 0 or ev.objective(x_new) >= f:
            x = best[1] if best[0] < ev.objective(x_new) else x_new
            pg = np.abs(projected_gradient(x, ev.gradient(x))).max(initial=0.0)
            hist.projected_grad = float(pg)
            hist.converged = pg <= rtol * (1.0 + abs(ev.objective(x)))
            break
        x = x_new
    if best[0] < ev.objective(x):
        x = best[1]
    hist.evaluations = nfev
    if hist.warning:
        warnings.warn(f"L-BFGS-B line search failed: {hist.message}", RuntimeWarning, stacklevel=2)
    return dp.weights(x), hist


def threshold_design(w: DesignWeights, threshold: float = 0.5) -> DesignWeights:
    """Binary design: weights at or above ``threshold`` become 1, others 0."""
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    return w.with_w((w.w >= threshold).astype(float))


@dataclass
class DesignResult:
    relaxed: DesignWeights
    binary: DesignWeights
    history: OptimizeHistory
    objective_relaxed: float
    objective_binary: float
    route: str

    @property
    def n_selected(self) -> int:
        return int(self.binary.w.sum())


def run_design(dp: DesignProblem, ctx: InverseProblem, rom: Optional[RomOperator] = None,
               w0: Optional[DesignWeights] = None, maxiter: int = 500) -> DesignResult:
    """Optimize, threshold, and re-evaluate the binary design with the same route."""
    ev = DesignEvaluator(dp, ctx, rom)
    w0 = w0 or dp.weights(np.full(dp.n_weights, 0.5))
    w_opt, hist = optimize_design(dp, w0, ctx, rom, maxiter=maxiter, evaluator=ev)
    wb = threshold_design(w_opt, dp.threshold)
    return DesignResult(w_opt, wb, hist, ev.objective(w_opt.w), ev.objective(wb.w), dp.route)


def design_rows(cs: CandidateSet, relaxed: DesignWeights, binary: DesignWeights):
    xy = cs.positions if cs.mode == "stationary" else cs.meas_xy()
    return [(i, float(xy[i, 0]), float(xy[i, 1]), float(relaxed.w[i]), int(binary.w[i]))
            for i in range(relaxed.w.size)]


def write_design_csv(path, cs: CandidateSet, relaxed: DesignWeights, binary: DesignWeights) -> None:
    write_csv(path, ["index", "x", "y", "weight", "selected"], design_rows(cs, relaxed, binary))


def prior_goal_variance(goal: GoalVector, ctx: InverseProblem) -> float:
    """``<c, Gamma_pr c>_M``."""
    a = ctx.prior.sqrt_cov(goal.c)
    return float(a @ (ctx.M * a))


__all__ = [
    "GoalVector", "DesignProblem", "DesignEvaluator", "DesignResult", "OptimizeHistory",
    "goal_vector_initial", "goal_vector_spacetime", "goal_vector", "spacetime_qoi",
    "trace_objective", "trace_gradient", "optimize_design", "threshold_design", "run_design",
    "write_design_csv", "prior_goal_variance", "projected_gradient",
]

