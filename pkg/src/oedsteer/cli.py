"""Command-line entry point ``oedsteer``.

Every subcommand writes its artifacts plus ``manifest.json`` (config hash,
seed, library versions and a digest of every artifact) into ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .domain import ScalarField
from .fileio import FileFormatError, write_csv, write_field, write_observations
from .numcore import ContractError, ConvergenceError
from .scenario import Scenario, ScenarioError, parse_scenario

FORMATS = {
    ".field": "FIELD",
    ".csv": "CSV",
    ".rom": "ROM",
    ".lrpost": "LRPOST",
    ".ppm": "P6",
    ".json": "JSON",
}


class Run:
    """Output directory plus manifest bookkeeping for one command."""

    def __init__(self, command: str, out: Path, argv: List[str], scenario: Optional[Scenario] = None,
                 inputs: Optional[List[Path]] = None):
        self.command, self.out, self.argv, self.scenario = command, Path(out), argv, scenario
        self.inputs = [Path(p) for p in inputs or []]
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: List[Path] = []
        self.summary: Dict[str, object] = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def config_hash(self) -> str:
        if self.scenario is not None:
            h = hashlib.sha256(self.scenario.config_hash().encode())
        else:
            h = hashlib.sha256()
        for p in self.inputs:
            h.update(p.read_bytes())
        return h.hexdigest()

    def finish(self) -> None:
        summary = self.path("summary.json")
        summary.write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config_hash": self.config_hash(),
            "seed": self.scenario.seed if self.scenario is not None else None,
            "scenario": self.scenario.source if self.scenario is not None else None,
            "versions": {"oedsteer": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
            "artifacts": {
                str(p.relative_to(self.out)): {
                    "format": FORMATS.get(p.suffix, "TEXT"),
                    "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                }
                for p in sorted(set(self.artifacts))
            },
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
        for key in sorted(self.summary):
            print(f"{key}: {self.summary[key]}")


def _load(args) -> Scenario:
    overrides = {"run.seed": str(args.seed)} if getattr(args, "seed", None) is not None else None
    return parse_scenario(args.scenario, overrides)


def _read_selected(path, n: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n or (rows and "selected" not in rows[0]):
        raise FileFormatError(f"{path}: expected {n} rows with a 'selected' column")
    return np.array([float(r["selected"]) for r in rows])


def _design_weights(sc: Scenario, design_csv):
    from .inversion import DesignWeights

    cs = sc.candidates
    w = None if design_csv is None else _read_selected(design_csv, cs.n_weights)
    return DesignWeights.for_candidates(cs, w)


# ---- subcommands ----------------------------------------------------------

def cmd_forward(args, run: Run) -> None:
    from .transport import simulate_measurements, solve_forward

    sc = run.scenario
    stride = sc["transport.snapshot_stride"]
    traj, _ = solve_forward(sc.truth, sc.transport, None, stride)
    for k, u in enumerate(traj):
        write_field(run.path(f"snapshots/u_{k:04d}.field"), u, k * stride * sc.transport.dt)
    obs = simulate_measurements(sc.truth, sc.transport, sc.candidates, sc["noise.sigma"], sc.seed)
    xy = sc.candidates.meas_xy()
    write_observations(run.path("observations.csv"), sc.candidates.meas_times(), xy[:, 0], xy[:, 1], obs.d)
    run.summary.update(n_snapshots=len(traj), n_observations=int(obs.d.size))


def cmd_invert(args, run: Run) -> None:
    from .inversion import solve_map
    from .transport import simulate_measurements

    sc = run.scenario
    w = _design_weights(sc, args.design)
    obs = simulate_measurements(sc.truth, sc.transport, sc.candidates, sc["noise.sigma"], sc.seed)
    res = solve_map(obs, w, sc.inverse_problem, full_output=True)
    write_field(run.path("map.field"), res.field)
    write_field(run.path("truth.field"), sc.truth)
    err = res.field.values - sc.truth.values
    run.summary.update(l2_error=float(np.sqrt(err @ (sc.prior.M * err))), cg_iterations=res.iterations,
                       n_sensors=int(np.count_nonzero(w.w)))


def cmd_oed(args, run: Run) -> None:
    from dataclasses import replace

    from .oed import ROM, prior_goal_variance, run_design, write_design_csv
    from .inversion import goal_variance_exact

    sc = run.scenario
    if sc.kind not in ("oed1", "oed2"):
        raise ContractError(f"oed needs an oed1/oed2 scenario, got {sc.kind}")
    dp = sc.design_problem()
    dp = replace(dp, alpha=sc["oed.alpha"] if args.alpha is None else args.alpha,
                 rank=sc["oed.rank"] if args.rank is None else args.rank,
                 threshold=sc["oed.threshold"] if args.threshold is None else args.threshold,
                 expansion=None)
    rom = None
    if dp.route == ROM:
        rom = _rom_from_args(args, sc, dp.rank)
    res = run_design(dp, sc.inverse_problem, rom, maxiter=sc["oed.maxiter"])
    write_design_csv(run.path("design.csv"), sc.candidates, res.relaxed, res.binary)
    run.summary.update(
        n_selected=res.n_selected, route=dp.route, alpha=dp.alpha, rank=dp.rank,
        threshold=dp.threshold, objective_relaxed=res.objective_relaxed,
        goal_variance_binary=res.objective_binary - dp.alpha * res.n_selected,
        prior_goal_variance=prior_goal_variance(sc.goal, sc.inverse_problem),
        iterations=res.history.iterations, converged=res.history.converged)
    if args.exact:
        run.summary["goal_variance_binary_exact"] = goal_variance_exact(sc.goal.c, res.binary,
                                                                        sc.inverse_problem)


def _rom_from_args(args, sc: Scenario, rank: int):
    from .rom import RomOperator

    if getattr(args, "rom_file", None):
        rom = RomOperator.load(args.rom_file, sc.prior.M)
        return rom if rank >= rom.rank else rom.truncate(rank)
    return sc.rom(rank)


def cmd_steer(args, run: Run) -> None:
    from .steering import run_steering, write_metrics_csv, write_trajectory_csv

    sc = run.scenario
    if sc.kind != "steer":
        raise ContractError(f"steer needs a steer scenario, got {sc.kind}")
    setup = sc.steering_setup(mobile=not args.no_mobile, use_rom_map=args.rom)
    result = run_steering(setup, keep_snapshots=args.snapshots)
    write_trajectory_csv(run.path("trajectory.csv"), result)
    write_metrics_csv(run.path("metrics.csv"), result)
    for k, m in enumerate(result.snapshots):
        write_field(run.path(f"snapshots/map_{k + 1:04d}.field"), ScalarField(sc.grid, m),
                    result.metrics[k].t)
    last = result.metrics[-1] if result.metrics else None
    run.summary.update(
        cycles=len(result.metrics), mobile=not args.no_mobile,
        final_l2_error=last.l2_error if last else float("nan"),
        initial_distance=result.distance(0), final_distance=result.distance(-1),
        flagged=result.state.flagged)


def cmd_rom_build(args, run: Run) -> None:
    from .rom import build_rom

    sc = run.scenario
    rank = sc["rom.rank"] if args.rank is None else args.rank
    pre = sc["rom.preconditioned"] if args.preconditioned is None else args.preconditioned
    rom = build_rom(sc.forward, sc.prior, rank, pre, sc["rom.oversample"], sc["rom.power_iters"], sc.seed)
    rom.save(run.path("operator.rom"))
    write_csv(run.path("singular_values.csv"), ["k", "sigma"], [(k + 1, float(s)) for k, s in enumerate(rom.S)])
    run.summary.update(rank=rom.rank, preconditioned=pre, truncation_error=rom.truncation_error,
                       build_seconds=round(rom.build_seconds, 3))


def cmd_rom_eval(args, run: Run) -> None:
    from .rom import RomOperator, rom_forward

    sc = run.scenario
    rom = RomOperator.load(args.rom_file, sc.prior.M)
    if rom.n_meas != sc.forward.n_meas:
        raise ContractError("ROM measurement count does not match the scenario")
    probes = sc.prior.sample_prior(sc.seed, args.n_probe)
    full = np.empty((rom.n_meas, args.n_probe))
    t0 = time.perf_counter()
    for k in range(args.n_probe):
        full[:, k] = sc.forward.apply(probes[:, k])
    t_full = time.perf_counter() - t0
    approx = np.empty_like(full)
    t0 = time.perf_counter()
    for k in range(args.n_probe):
        approx[:, k] = rom_forward(probes[:, k], rom, sc.prior)
    t_rom = time.perf_counter() - t0
    err = np.linalg.norm(approx - full, axis=0) / np.linalg.norm(full, axis=0)
    write_csv(run.path("rom_eval.csv"), ["probe", "rel_error"], [(k, float(e)) for k, e in enumerate(err)])
    run.summary.update(max_rel_error=float(err.max()), mean_rel_error=float(err.mean()),
                       speedup=round(t_full / max(t_rom, 1e-12), 1), rank=rom.rank)


def cmd_variance(args, run: Run) -> None:
    from .inversion import build_lowrank, pointwise_variance

    sc = run.scenario
    w = _design_weights(sc, args.design)
    rank = min(sc["oed.rank"] if args.rank is None else args.rank, sc.grid.n_dof)
    lr = build_lowrank(w, rank, sc.inverse_problem, seed=sc.seed)
    method = args.method or sc["variance.method"]
    est = pointwise_variance(lr, sc["variance.n_probe"], sc.seed, method)
    prior_var = sc.prior.pointwise_variance()
    write_field(run.path("posterior_variance.field"), est.field)
    write_field(run.path("prior_variance.field"), ScalarField(sc.grid, prior_var))
    if args.save_posterior:
        lr.save(run.path("posterior.lrpost"))
    run.summary.update(method=est.method, rel_error=est.rel_error, rank=lr.rank,
                       mean_variance_ratio=float(np.mean(est.field.values / prior_var)))


def cmd_render(args, run: Run) -> None:
    from .render import render_field

    render_field(args.field, run.path(Path(args.image).name), args.scale)


# ---- argument parsing -----------------------------------------------------

def _scenario_args(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--scenario", required=True, help="scenario file or shipped name (oed1, oed2, steer)")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oedsteer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("forward", help="simulate the truth and record candidate readings")
    _scenario_args(p, "out/forward")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("invert", help="MAP estimate from simulated candidate data")
    _scenario_args(p, "out/invert")
    p.add_argument("--design", help="design CSV; only rows with selected = 1 are used")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("oed", help="sparse goal-oriented sensor placement")
    _scenario_args(p, "out/oed")
    p.add_argument("--alpha", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--rom-file", help="reuse a persisted ROM instead of building one")
    p.add_argument("--exact", action="store_true", help="also report the CG goal variance")
    p.set_defaults(func=cmd_oed)

    p = sub.add_parser("steer", help="closed-loop mobile sensor steering")
    _scenario_args(p, "out/steer")
    p.add_argument("--no-mobile", action="store_true", help="stationary sensors only")
    p.add_argument("--rom", action="store_true", help="use the ROM for MAP solves")
    p.add_argument("--snapshots", action="store_true", help="write the MAP field of every cycle")
    p.set_defaults(func=cmd_steer)

    p = sub.add_parser("rom", help="build or evaluate a reduced-order model")
    rsub = p.add_subparsers(dest="rom_command")
    b = rsub.add_parser("build")
    _scenario_args(b, "out/rom")
    b.add_argument("--rank", type=int)
    g = b.add_mutually_exclusive_group()
    g.add_argument("--preconditioned", dest="preconditioned", action="store_true", default=None)
    g.add_argument("--no-preconditioned", dest="preconditioned", action="store_false")
    b.set_defaults(func=cmd_rom_build)
    e = rsub.add_parser("eval")
    _scenario_args(e, "out/rom_eval")
    e.add_argument("--rom-file", required=True)
    e.add_argument("--n-probe", type=int, default=20)
    e.set_defaults(func=cmd_rom_eval)
    p.set_defaults(func=None, subparser=p)

    p = sub.add_parser("variance", help="pointwise posterior variance")
    _scenario_args(p, "out/variance")
    p.add_argument("--design", help="design CSV; only rows with selected = 1 are used")
    p.add_argument("--rank", type=int)
    p.add_argument("--method", choices=("exact", "hutchinson"))
    p.add_argument("--save-posterior", action="store_true")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("render", help="render a field file as a PPM image")
    p.add_argument("field")
    p.add_argument("image")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    if args.func is None:
        args.subparser.print_help(sys.stderr)
        return 2
    command = args.command + (f" {args.rom_command}" if args.command == "rom" else "")
    try:
        if args.command == "render":
            run = Run(command, Path(args.image).parent, argv, inputs=[Path(args.field)])
        else:
            run = Run(command, Path(args.out), argv, _load(args))
        args.func(args, run)
        run.finish()
    except ScenarioError as exc:
        print("scenario errors:", file=sys.stderr)
        for line in exc.problems:
            print(f"  {line}", file=sys.stderr)
        return 2
    except (ContractError, ConvergenceError, FileFormatError, ValueError, OSError) as exc:
        print(f"oedsteer {command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
