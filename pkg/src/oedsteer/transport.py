"""Advection-diffusion transport and the parameter-to-observable map.

The semi-discrete model is ``M du/dt + L u = 0`` on fluid cells, with ``M``
the cell areas and ``L`` the finite-volume operator: first-order upwind
advection with face velocities from a :class:`~oedsteer.domain.WindField`
plus two-point diffusion. Boundary faces are classified from the sign of the
outward normal velocity:

* outflow (``v.n > 0``): upwinded advective outflux, no diffusive flux;
* inflow (``v.n < 0``): homogeneous Dirichlet value, diffusive flux over the
  half-cell distance;
* tangential faces and obstacle walls: no flux.

Implicit Euler gives ``B u_{k+1} = M u_k`` with ``B = M + dt L``; ``B`` is
factored once per configuration and the adjoint sweep reuses the factor with
``trans='T'``, so the discrete adjoint is the exact transpose of the forward
propagation.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Grid, ScalarField, WindField
from .numcore import ContractError, LinearMap

STATIONARY = "stationary"
SPACETIME = "spacetime"


@dataclass(frozen=True, eq=False)
class TransportConfig:
    kappa: float
    dt: float
    T: float
    wind: WindField

    def __post_init__(self):
        if self.kappa <= 0:
            raise ContractError("kappa must be positive")
        if not 0 < self.dt <= self.T:
            raise ContractError("need 0 < dt <= T")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 4 * np.spacing(ratio):
            raise ContractError(f"T / dt = {ratio!r} is not an integer")

    @property
    def grid(self) -> Grid:
        return self.wind.grid

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def step_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ContractError(f"time {t} is not on the time grid (dt = {self.dt})")
        return k


def assemble_transport(grid: Grid, wind: WindField, kappa: float) -> sp.csr_matrix:
    """Finite-volume operator ``L`` (fluxes, i.e. already multiplied by face lengths)."""
    g = grid
    n = g.n_dof
    idx = g.active_index
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # interior faces: a -> b is the positive coordinate direction
    for a, b, un, length, dist in (
        (idx[:, :-1], idx[:, 1:], wind.u_face[:, 1:-1], g.dy, g.dx),
        (idx[:-1, :], idx[1:, :], wind.v_face[1:-1, :], g.dx, g.dy),
    ):
        a, b, un = a.ravel(), b.ravel(), un.ravel()
        keep = (a >= 0) & (b >= 0)
        a, b, un = a[keep], b[keep], un[keep]
        fpos = np.maximum(un, 0.0) * length
        fneg = np.maximum(-un, 0.0) * length
        add(a, a, fpos)
        add(b, a, -fpos)
        add(b, b, fneg)
        add(a, b, -fneg)
        gdiff = np.full(a.size, kappa * length / dist)
        add(a, a, gdiff)
        add(b, b, gdiff)
        add(a, b, -gdiff)
        add(b, a, -gdiff)

    # outer boundary: outward normal velocity per fluid boundary cell
    vmax = max(wind.max_speed(), 1e-300)
    for dofs, un_out, length, dist in (
        (idx[:, 0], -wind.u_face[:, 0], g.dy, g.dx),
        (idx[:, -1], wind.u_face[:, -1], g.dy, g.dx),
        (idx[0, :], -wind.v_face[0, :], g.dx, g.dy),
        (idx[-1, :], wind.v_face[-1, :], g.dx, g.dy),
    ):
        keep = dofs >= 0
        dofs, un_out = dofs[keep], un_out[keep]
        outflow = un_out > 1e-12 * vmax
        inflow = un_out < -1e-12 * vmax
        add(dofs[outflow], dofs[outflow], un_out[outflow] * length)
        add(dofs[inflow], dofs[inflow], np.full(inflow.sum(), kappa * length / (0.5 * dist)))

    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    L.sum_duplicates()
    return L


class TransportModel:
    """Assembled and factored implicit-Euler propagator for one configuration."""

    def __init__(self, cfg: TransportConfig):
        self.cfg = cfg
        self.grid = cfg.grid
        self.mass = self.grid.mass()
        self.L = assemble_transport(self.grid, cfg.wind, cfg.kappa)
        self.B = (sp.diags(self.mass) + cfg.dt * self.L).tocsc()
        self._lu = spla.splu(self.B)

    def step(self, u: np.ndarray) -> np.ndarray:
        """``u_{k+1} = B^{-1} M u_k`` (vector or column block)."""
        mu = self.mass * u if u.ndim == 1 else self.mass[:, None] * u
        return self._lu.solve(np.ascontiguousarray(mu))

    def step_transpose(self, p: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`step`: ``M B^{-T} p``."""
        z = self._lu.solve(np.ascontiguousarray(p), trans="T")
        return self.mass * z if z.ndim == 1 else self.mass[:, None] * z

    def residual(self, u_new: np.ndarray, u_old: np.ndarray) -> float:
        """Relative residual of one implicit step."""
        rhs = self.mass * u_old
        nrm = np.linalg.norm(rhs)
        return float(np.linalg.norm(self.B @ u_new - rhs) / nrm) if nrm else 0.0

    def adjoint_sweep(self, sources: Dict[int, np.ndarray], shape_tail=()) -> np.ndarray:
        """``sum_k (B^{-1} M)^{kT} s_k`` by one backward sweep (Horner form)."""
        p = np.zeros((self.grid.n_dof,) + tuple(shape_tail))
        if not sources:
            return p
        for k in range(max(sources), 0, -1):
            if k in sources:
                p += sources[k]
            if p.any():
                p = self.step_transpose(p)
        if 0 in sources:
            p += sources[0]
        return p


_MODELS: "weakref.WeakKeyDictionary[TransportConfig, TransportModel]" = weakref.WeakKeyDictionary()


def transport_model(cfg: TransportConfig) -> TransportModel:
    model = _MODELS.get(cfg)
    if model is None:
        model = TransportModel(cfg)
        _MODELS[cfg] = model
    return model


@dataclass(eq=False)
class CandidateSet:
    """Space-time measurement candidates.

    Measurement ``it * n_pos + ip`` samples position ``ip`` at time ``it``. In
    ``stationary`` mode one design weight per position is shared over all
    times; in ``spacetime`` mode every measurement has its own weight.
    """

    grid: Grid
    positions: np.ndarray  # (n_pos, 2), snapped to cell centers
    dofs: np.ndarray
    times: np.ndarray
    steps: np.ndarray
    mode: str = STATIONARY

    @classmethod
    def build(cls, cfg: TransportConfig, positions, times, mode: str = STATIONARY,
              t_start: float = 0.0, t_cutoff: Optional[float] = None) -> "CandidateSet":
        """Snap positions to fluid cell centers and times to the time grid.

        Times before ``t_start`` or after ``t_cutoff`` (default ``cfg.T``) are
        dropped.
        """
        if mode not in (STATIONARY, SPACETIME):
            raise ContractError(f"unknown candidate mode {mode!r}")
        g = cfg.grid
        pos = np.atleast_2d(np.asarray(positions, dtype=float))
        dofs = np.array([g.locate(x, y) for x, y in pos], dtype=np.int64)
        snapped = np.column_stack([g.xc[dofs], g.yc[dofs]]) if dofs.size else pos
        t_cutoff = cfg.T if t_cutoff is None else t_cutoff
        times = np.asarray(times, dtype=float)
        steps = np.array([cfg.step_of(t) for t in times], dtype=np.int64)
        t_grid = steps * cfg.dt
        keep = (t_grid >= t_start - 1e-9) & (t_grid <= t_cutoff + 1e-9) & (steps > 0)
        steps = steps[keep]
        if np.any(steps > cfg.n_steps):
            raise ContractError("measurement time beyond the final time")
        cs = cls(g, snapped, dofs, t_grid[keep], steps, mode)
        if cs.n_meas < 1:
            raise ContractError("candidate set is empty")
        return cs

    @property
    def n_pos(self) -> int:
        return self.dofs.size

    @property
    def n_times(self) -> int:
        return self.steps.size

    @property
    def n_meas(self) -> int:
        return self.n_pos * self.n_times

    @property
    def n_weights(self) -> int:
        return self.n_pos if self.mode == STATIONARY else self.n_meas

    def meas_steps(self) -> np.ndarray:
        return np.repeat(self.steps, self.n_pos)

    def meas_dofs(self) -> np.ndarray:
        return np.tile(self.dofs, self.n_times)

    def meas_times(self) -> np.ndarray:
        return np.repeat(self.times, self.n_pos)

    def meas_xy(self) -> np.ndarray:
        return np.tile(self.positions, (self.n_times, 1))

    def expansion(self) -> sp.csr_matrix:
        """0/1 matrix mapping design weights to per-measurement weights."""
        if self.mode == SPACETIME:
            return sp.identity(self.n_meas, format="csr")
        rows = np.arange(self.n_meas)
        cols = np.tile(np.arange(self.n_pos), self.n_times)
        return sp.csr_matrix((np.ones(self.n_meas), (rows, cols)), shape=(self.n_meas, self.n_pos))


def observation_times(t_start: float, dt_obs: float, t_cutoff: float) -> np.ndarray:
    """Sampling instants ``t_start, t_start + dt_obs, ...`` up to ``t_cutoff``."""
    n = int(np.floor((t_cutoff - t_start) / dt_obs + 1e-9))
    return t_start + dt_obs * np.arange(n + 1)


class ForwardMap:
    """Discrete parameter-to-observable map ``F`` for a list of measurements.

    ``apply`` maps initial conditions to readings, ``apply_transpose`` is the
    Euclidean transpose ``F^T`` and ``apply_adjoint`` the adjoint in the mass
    inner product, ``F* = M^{-1} F^T``, so that
    ``<F m, y> = <m, F* y>_M``.
    """

    def __init__(self, cfg: TransportConfig, steps: np.ndarray, dofs: np.ndarray):
        self.cfg = cfg
        self.model = transport_model(cfg)
        self.grid = cfg.grid
        self.steps = np.asarray(steps, dtype=np.int64)
        self.dofs = np.asarray(dofs, dtype=np.int64)
        if self.steps.shape != self.dofs.shape:
            raise ContractError("steps and dofs must align")
        if self.steps.size and (self.steps.min() < 0 or self.steps.max() > cfg.n_steps):
            raise ContractError("measurement step outside the simulated window")
        self._groups: Dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for k in np.unique(self.steps):
            rows = np.flatnonzero(self.steps == k)
            self._groups[int(k)] = (rows, self.dofs[rows])

    @classmethod
    def from_candidates(cls, cfg: TransportConfig, cs: CandidateSet) -> "ForwardMap":
        return cls(cfg, cs.meas_steps(), cs.meas_dofs())

    @property
    def n_meas(self) -> int:
        return self.steps.size

    @property
    def n_dof(self) -> int:
        return self.grid.n_dof

    @property
    def last_step(self) -> int:
        return int(self.steps.max()) if self.steps.size else 0

    def restrict(self, rows) -> "ForwardMap":
        rows = np.asarray(rows, dtype=np.int64)
        return ForwardMap(self.cfg, self.steps[rows], self.dofs[rows])

    def _check(self, x, n, what):
        if x.shape[0] != n:
            raise ContractError(f"{what} has leading dimension {x.shape[0]}, expected {n}")

    def apply(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        self._check(m, self.n_dof, "parameter")
        out = np.zeros((self.n_meas,) + m.shape[1:])
        u = m.copy()
        if 0 in self._groups:
            rows, dofs = self._groups[0]
            out[rows] = u[dofs]
        for k in range(1, self.last_step + 1):
            u = self.model.step(u)
            if k in self._groups:
                rows, dofs = self._groups[k]
                out[rows] = u[dofs]
        return out

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        self._check(y, self.n_meas, "observation vector")
        tail = y.shape[1:]
        sources = {}
        for k, (rows, dofs) in self._groups.items():
            s = np.zeros((self.n_dof,) + tail)
            np.add.at(s, dofs, y[rows])
            sources[k] = s
        return self.model.adjoint_sweep(sources, tail)

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        p = self.apply_transpose(y)
        return p / self.model.mass if p.ndim == 1 else p / self.model.mass[:, None]

    def as_linear_map(self) -> LinearMap:
        """Euclidean view ``F`` with transpose ``F^T``."""
        return LinearMap((self.n_meas, self.n_dof), self.apply, self.apply_transpose)


@dataclass(eq=False)
class Observations:
    """Readings at a candidate set; ``sigma`` is the noise level used to generate them."""

    candidate_set: CandidateSet
    d: np.ndarray
    sigma: float

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        if self.sigma < 0:
            raise ContractError("noise level sigma must be non-negative")
        if self.d.shape != (self.candidate_set.n_meas,):
            raise ContractError("data length must equal the number of measurements")
        if not np.all(np.isfinite(self.d)):
            raise ValueError("data must be finite")


def step_forward(u: ScalarField, cfg: TransportConfig) -> ScalarField:
    """One implicit Euler step of the transport equation."""
    if u.grid is not cfg.grid:
        raise ContractError("field is not defined on the configuration's grid")
    return ScalarField(u.grid, transport_model(cfg).step(u.values))


def solve_forward(m: ScalarField, cfg: TransportConfig, record: Optional[CandidateSet] = None,
                  stride: Optional[int] = 1):
    """Integrate from ``u(0) = m`` to ``T``.

    Returns the trajectory (every ``stride``-th state, ``stride=None`` keeps
    only the initial state) and the readings at ``record``'s measurements.
    """
    if m.grid is not cfg.grid:
        raise ContractError("field is not defined on the configuration's grid")
    model = transport_model(cfg)
    u = m.values.copy()
    traj = [ScalarField(cfg.grid, u)]
    obs = np.zeros(record.n_meas if record is not None else 0)
    if record is not None:
        steps, dofs = record.meas_steps(), record.meas_dofs()
    for k in range(1, cfg.n_steps + 1):
        u = model.step(u)
        if stride and k % stride == 0:
            traj.append(ScalarField(cfg.grid, u))
        if record is not None:
            hit = steps == k
            obs[hit] = u[dofs[hit]]
    return traj, obs


def apply_F(m: np.ndarray, ctx: ForwardMap) -> np.ndarray:
    return ctx.apply(m)


def apply_F_adjoint(y: np.ndarray, ctx: ForwardMap) -> np.ndarray:
    return ctx.apply_adjoint(y)


def simulate_measurements(truth_m: ScalarField, cfg: TransportConfig, cs: CandidateSet,
                          sigma: float, seed: int = 0) -> Observations:
    """Noisy synthetic data ``d = F(m_true) + sigma * xi`` with a seeded ``xi``."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    clean = ForwardMap.from_candidates(cfg, cs).apply(truth_m.values)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.size)
    return Observations(cs, clean + sigma * noise, sigma)
