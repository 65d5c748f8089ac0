"""Shared small problems and dense oracles."""
from types import SimpleNamespace

import numpy as np
import pytest

from oedsteer.domain import RegionRect, build_grid, potential_flow_wind
from oedsteer.inversion import InverseProblem
from oedsteer.prior import BiLaplacianPrior
from oedsteer.transport import (
    CandidateSet, ForwardMap, TransportConfig, assemble_transport, observation_times,
)


def dense_forward(cfg, cs):
    """F assembled densely from ``P = (M + dt L)^-1 M`` powers, independent of the sparse solver."""
    g = cfg.grid
    mass = g.mass()
    L = assemble_transport(g, cfg.wind, cfg.kappa).toarray()
    P = np.linalg.solve(np.diag(mass) + cfg.dt * L, np.diag(mass))
    steps, dofs = cs.meas_steps(), cs.meas_dofs()
    rows = np.zeros((steps.size, g.n_dof))
    Pk = np.eye(g.n_dof)
    for k in range(steps.max() + 1):
        hit = np.flatnonzero(steps == k)
        rows[hit] = Pk[dofs[hit]]
        Pk = P @ Pk
    return rows


def dense_prior(prior):
    A = prior.A.toarray()
    M = prior.M
    Ainv = np.linalg.inv(A)
    return SimpleNamespace(A=A, M=M, cov=Ainv @ np.diag(M) @ Ainv, R=A @ np.diag(1 / M) @ A)


def make_problem(nx=10, obstacle=True, sigma=0.05, positions=None, times=None, kappa=20.0):
    obst = [RegionRect(40, 60, 40, 60)] if obstacle else []
    g = build_grid(nx, nx, (100.0, 100.0), obst)
    wind = potential_flow_wind(g, 2.0, "south")
    cfg = TransportConfig(kappa, 0.5, 4.0, wind)
    prior = BiLaplacianPrior(g, eta=1.0, gamma=50.0)
    if positions is None:
        positions = [(15, 15), (85, 25), (25, 85), (75, 75), (15, 55), (85, 55)]
    if times is None:
        times = observation_times(1.0, 1.0, 4.0)
    cs = CandidateSet.build(cfg, positions, times)
    fwd = ForwardMap.from_candidates(cfg, cs)
    ip = InverseProblem(fwd, prior, sigma)
    F = dense_forward(cfg, cs)
    return SimpleNamespace(grid=g, cfg=cfg, prior=prior, cs=cs, forward=fwd, ip=ip, F=F,
                           dp=dense_prior(prior), sigma=sigma)


def dense_hessian(p, wm):
    """Euclidean ``M H = F^T sigma^-2 W F + A M^-1 A``."""
    return p.F.T @ (wm[:, None] / p.sigma ** 2 * p.F) + p.dp.R


@pytest.fixture(scope="session")
def small():
    return make_problem()


@pytest.fixture(scope="session")
def small_rng():
    return np.random.default_rng(7)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion" not in nodeid or rep.when not in ("setup", "call"):
                continue
            props = dict(rep.user_properties)
            name = rep.nodeid.split("::")[-1]
            if "acceptance" in props:
                lines[name] = props["acceptance"]
            elif rep.failed:
                lines.setdefault(name, f"{name}: FAIL ({rep.when} raised)")
    if lines:
        terminalreporter.section("acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(lines[name])
