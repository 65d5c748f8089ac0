"""Closed-loop steering of one mobile sensor alongside fixed sensors.

Each cycle measures, inverts for the MAP initial condition, centers a QoI
square on the MAP maximum, designs weights for the mobile sensor over the
lookahead window and moves the sensor one lattice step.

All readings come from one simulated data vector over a fixed measurement
universe (fixed + mobile positions at every sampling instant), so runs with
the same seed see identical readings at identical space-time points. This is
what makes a mobile/stationary-only comparison paired.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .domain import QoiSpec, RegionRect, ScalarField
from .fileio import write_csv
from .inversion import DesignWeights, InverseProblem, solve_map
from .numcore import DEFAULT_SEED, ContractError, ConvergenceError
from .oed import ROM, DesignEvaluator, DesignProblem, GoalVector, goal_vector_initial, \
    goal_vector_spacetime, optimize_design
from .prior import BiLaplacianPrior
from .rom import RomOperator, build_rom
from .transport import CandidateSet, ForwardMap, Observations, TransportConfig, \
    observation_times, simulate_measurements

QOI_INITIAL = "initial"
QOI_LOOKAHEAD = "lookahead"


@dataclass(frozen=True)
class SteeringConfig:
    t0: float
    t_end: float
    dt_obs: float = 0.2
    lookahead: float = 2.0
    qoi_side: float = 40.0
    qoi_mode: str = QOI_LOOKAHEAD
    alpha: float = 0.1
    rank: int = 150
    threshold: float = 0.5
    neighborhood: int = 8
    kernel_width: Optional[float] = None
    mobile: bool = True
    use_rom_map: bool = False
    design_maxiter: int = 200

    def __post_init__(self):
        problems = []
        if self.dt_obs <= 0:
            problems.append("dt_obs must be positive")
        if self.lookahead < self.dt_obs - 1e-12:
            problems.append("lookahead must be at least dt_obs")
        if self.qoi_side <= 0:
            problems.append("qoi_side must be positive")
        if self.t_end < self.t0:
            problems.append("t_end must not precede t0")
        if self.t0 <= 0:
            problems.append("t0 must be positive (no readings at the initial instant)")
        if self.neighborhood not in (4, 8):
            problems.append("neighborhood must be 4 or 8")
        if self.qoi_mode not in (QOI_INITIAL, QOI_LOOKAHEAD):
            problems.append(f"qoi_mode must be {QOI_INITIAL!r} or {QOI_LOOKAHEAD!r}")
        if problems:
            raise ContractError("; ".join(problems))

    @property
    def n_cycles(self) -> int:
        return int(round((self.t_end - self.t0) / self.dt_obs))


@dataclass(eq=False)
class MobileLattice:
    """Admissible mobile positions on a regular lattice; solid nodes removed."""

    positions: np.ndarray  # (k, 2)
    ij: np.ndarray  # (k, 2) lattice coordinates
    spacing: float

    @classmethod
    def build(cls, grid, origin: Sequence[float], spacing: float, shape: Sequence[int]) -> "MobileLattice":
        if spacing < max(grid.dx, grid.dy) - 1e-9:
            raise ContractError("mobile lattice spacing must be at least one cell")
        pos, ij = [], []
        for j in range(shape[1]):
            for i in range(shape[0]):
                x, y = origin[0] + i * spacing, origin[1] + j * spacing
                try:
                    grid.locate(x, y)
                except ContractError:
                    continue
                pos.append((x, y))
                ij.append((i, j))
        if not pos:
            raise ContractError("mobile lattice has no admissible node")
        return cls(np.array(pos, dtype=float), np.array(ij, dtype=np.int64), float(spacing))

    @property
    def size(self) -> int:
        return self.ij.shape[0]

    def nearest(self, x: float, y: float) -> int:
        d = np.hypot(self.positions[:, 0] - x, self.positions[:, 1] - y)
        return int(np.argmin(d))

    def neighbors(self, k: int, neighborhood: int = 8) -> np.ndarray:
        """Indices of nodes adjacent to ``k`` (including ``k``), ascending."""
        dij = np.abs(self.ij - self.ij[k])
        if neighborhood == 8:
            ok = (dij[:, 0] <= 1) & (dij[:, 1] <= 1)
        else:
            ok = dij.sum(axis=1) <= 1
        return np.flatnonzero(ok)


class SteeringSetup:
    """Offline part of a steering run: universe, truth data, ROM and contexts."""

    def __init__(self, cfg: SteeringConfig, transport: TransportConfig, prior: BiLaplacianPrior,
                 truth: ScalarField, stationary: np.ndarray, lattice: MobileLattice,
                 start: Sequence[float], sigma: float, seed: int = DEFAULT_SEED,
                 rom: Optional[RomOperator] = None):
        self.cfg, self.transport, self.prior = cfg, transport, prior
        self.truth, self.lattice, self.sigma, self.seed = truth, lattice, float(sigma), seed
        self.stationary = np.zeros((0, 2)) if stationary is None else np.atleast_2d(
            np.asarray(stationary, dtype=float)).reshape(-1, 2)
        self.start = lattice.nearest(*start)
        self.ns = self.stationary.shape[0]
        t_last = cfg.t_end + cfg.lookahead
        if t_last > transport.T + 1e-9:
            raise ContractError("simulation horizon T must cover t_end + lookahead")
        times = observation_times(cfg.t0, cfg.dt_obs, t_last)
        positions = np.vstack([self.stationary, lattice.positions])
        self.universe = CandidateSet.build(transport, positions, times, mode="spacetime")
        if self.universe.n_times != times.size:
            raise ContractError("sampling instants must lie on the time grid")
        self.forward = ForwardMap.from_candidates(transport, self.universe)
        self.data = simulate_measurements(truth, transport, self.universe, sigma, seed).d
        noise_sigma = sigma if sigma > 0 else 1e-3
        self.ctx = InverseProblem(self.forward, prior, noise_sigma)
        rank = min(cfg.rank, prior.n_dof, self.universe.n_meas)
        self.rom = rom if rom is not None else build_rom(self.forward, prior, rank, True, seed=seed)
        self.map_ctx = (InverseProblem(self.rom.forward_view(prior), prior, noise_sigma)
                        if cfg.use_rom_map else self.ctx)
        self.source_xy = np.array(truth.grid.center(int(np.argmax(truth.values))))
        self.kernel = cfg.kernel_width if cfg.kernel_width else 2.0 * lattice.spacing

    def row(self, it: int, pos_index: int) -> int:
        return it * self.universe.n_pos + pos_index

    def time_index(self, t: float) -> int:
        return int(round((t - self.cfg.t0) / self.cfg.dt_obs))

    def initial_state(self) -> "SteeringState":
        x, y = self.lattice.positions[self.start]
        return SteeringState(self.cfg.t0, [(self.cfg.t0, float(x), float(y))], self.start,
                             np.zeros(self.universe.n_meas, dtype=bool))


@dataclass(eq=False)
class SteeringState:
    t_step: float
    trajectory: List[tuple]
    mobile_index: int
    measured: np.ndarray
    cycle: int = 0
    m_map: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    qoi: Optional[RegionRect] = None
    flagged: bool = False

    def copy(self) -> "SteeringState":
        return replace(self, trajectory=list(self.trajectory), measured=self.measured.copy())


@dataclass
class CycleMetrics:
    cycle: int
    t: float
    l2_error: float
    dist_to_source: float
    goal_variance: float


def _qoi_region(setup: SteeringSetup, m_map: np.ndarray) -> RegionRect:
    grid = setup.prior.grid
    k = int(np.argmax(m_map))
    cx, cy = grid.center(k)
    return RegionRect.centered(cx, cy, setup.cfg.qoi_side).clip(grid.bounds)


def _goal(setup: SteeringSetup, region: RegionRect, t_step: float) -> GoalVector:
    if setup.cfg.qoi_mode == QOI_INITIAL:
        return goal_vector_initial(region, setup.prior.grid)
    t1 = min(t_step + setup.cfg.lookahead, setup.transport.T)
    return goal_vector_spacetime(QoiSpec(region, t_step, t1), setup.transport)


def _design_problem(setup: SteeringSetup, goal: GoalVector, fixed: np.ndarray, expansion,
                    alpha: float) -> DesignProblem:
    cfg = setup.cfg
    return DesignProblem(setup.universe, goal, alpha, setup.ctx.sigma, setup.rom.rank,
                         cfg.threshold, fixed.astype(float), ROM, expansion=expansion)


def _mobile_expansion(setup: SteeringSetup, it_lo: int, it_hi: int) -> sp.csr_matrix:
    nm = setup.lattice.size
    rows, cols = [], []
    for it in range(it_lo, min(it_hi, setup.universe.n_times - 1) + 1):
        rows.extend(setup.row(it, setup.ns + np.arange(nm)))
        cols.extend(range(nm))
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(setup.universe.n_meas, nm))


def _move(setup: SteeringSetup, k: int, weights: np.ndarray) -> int:
    """Adjacent lattice node maximizing the kernel-smoothed weight field."""
    lat = setup.lattice
    nbrs = lat.neighbors(k, setup.cfg.neighborhood)
    if weights is None or not np.any(weights > 0):
        return int(nbrs[0]) if k not in nbrs else k
    d2 = ((lat.positions[nbrs, None, :] - lat.positions[None, :, :]) ** 2).sum(axis=2)
    score = np.exp(-d2 / (2.0 * setup.kernel ** 2)) @ weights
    top = score.max()
    if top <= 1e-12 * weights.max():
        # weight mass out of kernel reach: head for the heaviest node
        target = lat.positions[int(np.argmax(weights))]
        dist = np.hypot(*(lat.positions[nbrs] - target).T)
        return int(nbrs[int(np.argmin(dist))])
    return int(nbrs[int(np.flatnonzero(score >= top - 1e-12 * abs(top))[0])])


def steering_cycle(state: SteeringState, setup: SteeringSetup) -> tuple[SteeringState, CycleMetrics]:
    """One measure / invert / recenter / design / move iteration."""
    cfg = setup.cfg
    new = state.copy()
    it = setup.time_index(state.t_step)
    for ip in range(setup.ns):
        new.measured[setup.row(it, ip)] = True
    if cfg.mobile:
        new.measured[setup.row(it, setup.ns + state.mobile_index)] = True

    w_meas = DesignWeights(np.zeros(0), sp.csr_matrix((setup.universe.n_meas, 0)),
                           new.measured.astype(float))
    obs = Observations(setup.universe, np.where(new.measured, setup.data, 0.0), setup.sigma)
    try:
        m_map = solve_map(obs, w_meas, setup.map_ctx).values
    except ConvergenceError:
        flagged = state.copy()
        flagged.flagged = True
        return flagged, CycleMetrics(state.cycle + 1, state.t_step, float("nan"), float("nan"),
                                     float("nan"))

    region = _qoi_region(setup, m_map)
    goal = _goal(setup, region, state.t_step)
    empty = sp.csr_matrix((setup.universe.n_meas, 0))
    now = DesignEvaluator(_design_problem(setup, goal, new.measured, empty, 0.0), setup.ctx, setup.rom)
    goal_var = now.objective(np.zeros(0))

    k = state.mobile_index
    weights = None
    if cfg.mobile:
        lo = it + 1
        hi = it + int(round(cfg.lookahead / cfg.dt_obs))
        fixed = new.measured.copy()
        for jt in range(lo, min(hi, setup.universe.n_times - 1) + 1):
            for ip in range(setup.ns):
                fixed[setup.row(jt, ip)] = True
        dp = _design_problem(setup, goal, fixed, _mobile_expansion(setup, lo, hi), cfg.alpha)
        ev = DesignEvaluator(dp, setup.ctx, setup.rom)
        w_opt, _ = optimize_design(dp, dp.weights(np.full(dp.n_weights, 0.5)), setup.ctx,
                                   setup.rom, maxiter=cfg.design_maxiter, evaluator=ev)
        weights = w_opt.w
        k = _move(setup, k, weights)

    t_next = cfg.t0 + (it + 1) * cfg.dt_obs
    x, y = setup.lattice.positions[k]
    new.t_step = t_next
    new.trajectory.append((t_next, float(x), float(y)))
    new.mobile_index = k
    new.cycle = state.cycle + 1
    new.m_map, new.weights, new.qoi = m_map, weights, region

    err = m_map - setup.truth.values
    l2 = float(np.sqrt(err @ (setup.prior.M * err)))
    dist = float(np.hypot(x - setup.source_xy[0], y - setup.source_xy[1])) if cfg.mobile else float("nan")
    return new, CycleMetrics(new.cycle, state.t_step, l2, dist, float(goal_var))


@dataclass
class SteeringRun:
    state: SteeringState
    source_xy: tuple
    metrics: List[CycleMetrics] = field(default_factory=list)
    snapshots: List[np.ndarray] = field(default_factory=list)

    def distance(self, index: int) -> float:
        """Distance of trajectory point ``index`` to the true source maximum."""
        _, x, y = self.state.trajectory[index]
        return float(np.hypot(x - self.source_xy[0], y - self.source_xy[1]))


def run_steering(setup: SteeringSetup, keep_snapshots: bool = False) -> SteeringRun:
    """Iterate :func:`steering_cycle` from ``t0`` until ``t_end``."""
    state = setup.initial_state()
    run = SteeringRun(state, tuple(float(v) for v in setup.source_xy))
    for _ in range(setup.cfg.n_cycles):
        state, met = steering_cycle(state, setup)
        run.metrics.append(met)
        if state.flagged:
            break
        if keep_snapshots:
            run.snapshots.append(state.m_map)
    run.state = state
    return run


def write_trajectory_csv(path, run: SteeringRun) -> None:
    rows = [(i, t, x, y) for i, (t, x, y) in enumerate(run.state.trajectory)]
    write_csv(path, ["cycle", "t", "x", "y"], rows)


def write_metrics_csv(path, run: SteeringRun) -> None:
    rows = [(m.cycle, m.t, m.l2_error, m.dist_to_source, m.goal_variance) for m in run.metrics]
    write_csv(path, ["cycle", "t", "l2_error", "dist_to_source", "goal_variance"], rows)

