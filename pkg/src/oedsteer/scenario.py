"""Scenario files: flat ``section.key = value`` configuration.

Lines are ``key = value``; ``#`` starts a comment. Vector values are
whitespace separated. Indexed families (``obstacle.N``, ``blob.N``,
``sensor.N``) take an integer suffix. Unknown keys, type errors and range
violations are collected and reported together before anything is computed.
Relative file paths resolve against the scenario file's directory.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .domain import QoiSpec, RegionRect, ScalarField, build_grid, gaussian_blob, \
    potential_flow_wind, uniform_wind
from .fileio import read_field, read_wind
from .transport import CandidateSet, ForwardMap, TransportConfig, observation_times

KINDS = ("oed1", "oed2", "steer", "forward")


class ScenarioError(ValueError):
    """Parse or validation failure; ``problems`` lists every violation."""

    def __init__(self, problems: List[str]):
        super().__init__("\n".join(problems))
        self.problems = list(problems)


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 < x < 1


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool | vec<n> | path
    default: Any = None
    required: bool = False
    check: Optional[Callable[[Any], bool]] = None
    what: str = ""
    choices: Tuple[str, ...] = ()


SCHEMA: Dict[str, Key] = {
    "experiment.kind": Key("str", required=True, choices=KINDS),
    "run.seed": Key("int", 20240917, check=_nonneg, what=">= 0"),
    "grid.nx": Key("int", required=True, check=lambda v: v >= 4, what=">= 4"),
    "grid.ny": Key("int", required=True, check=lambda v: v >= 4, what=">= 4"),
    "grid.width": Key("float", required=True, check=_pos, what="> 0"),
    "grid.height": Key("float", required=True, check=_pos, what="> 0"),
    "grid.x0": Key("float", 0.0),
    "grid.y0": Key("float", 0.0),
    "wind.kind": Key("str", "potential", choices=("potential", "uniform", "file")),
    "wind.speed": Key("float", 10.0, check=_pos, what="> 0"),
    "wind.side": Key("str", "south", choices=("south", "north", "east", "west")),
    "wind.u": Key("float", 0.0),
    "wind.v": Key("float", 0.0),
    "wind.file": Key("path"),
    "transport.kappa": Key("float", required=True, check=_pos, what="> 0"),
    "transport.dt": Key("float", 0.1, check=_pos, what="> 0"),
    "transport.T": Key("float", required=True, check=_pos, what="> 0"),
    "transport.snapshot_stride": Key("int", 10, check=_pos, what="> 0"),
    "truth.cap": Key("float", 0.5, check=_pos, what="> 0"),
    "truth.eps": Key("float", 0.001, check=_unit, what="in (0, 1)"),
    "truth.file": Key("path"),
    "prior.eta": Key("float", 8.0, check=_pos, what="> 0"),
    "prior.gamma": Key("float", 800.0, check=_nonneg, what=">= 0"),
    "prior.beta": Key("float", None, check=_nonneg, what=">= 0"),
    "prior.mean_file": Key("path"),
    "noise.sigma": Key("float", 0.005, check=_pos, what="> 0"),
    "obs.t_start": Key("float", 2.0, check=_nonneg, what=">= 0"),
    "obs.dt": Key("float", 0.2, check=_pos, what="> 0"),
    "obs.cutoff": Key("float", None, check=_pos, what="> 0"),
    "candidates.origin": Key("vec2", (0.0, 0.0)),
    "candidates.spacing": Key("vec2", (25.0, 25.0), check=lambda v: min(v) > 0, what="> 0"),
    "candidates.shape": Key("vec2", (1, 1), check=lambda v: min(v) >= 1 and all(float(x).is_integer() for x in v),
                            what="positive integers"),
    "candidates.mode": Key("str", "stationary", choices=("stationary", "spacetime")),
    "qoi.region": Key("vec4"),
    "qoi.t_start": Key("float", 0.0, check=_nonneg, what=">= 0"),
    "qoi.t_end": Key("float", 0.0, check=_nonneg, what=">= 0"),
    "oed.alpha": Key("float", 0.1, check=_nonneg, what=">= 0"),
    "oed.rank": Key("int", 150, check=_pos, what="> 0"),
    "oed.threshold": Key("float", 0.5, check=_unit, what="in (0, 1)"),
    "oed.route": Key("str", "rom", choices=("rom", "full")),
    "oed.maxiter": Key("int", 500, check=_pos, what="> 0"),
    "rom.rank": Key("int", 150, check=_pos, what="> 0"),
    "rom.preconditioned": Key("bool", True),
    "rom.oversample": Key("int", 10, check=_nonneg, what=">= 0"),
    "rom.power_iters": Key("int", 1, check=_nonneg, what=">= 0"),
    "variance.method": Key("str", "exact", choices=("exact", "hutchinson")),
    "variance.n_probe": Key("int", 200, check=_pos, what="> 0"),
    "steer.t0": Key("float", 2.0, check=_pos, what="> 0"),
    "steer.t_end": Key("float", 7.0, check=_pos, what="> 0"),
    "steer.dt_obs": Key("float", 0.2, check=_pos, what="> 0"),
    "steer.lookahead": Key("float", 2.0, check=_pos, what="> 0"),
    "steer.qoi_side": Key("float", 40.0, check=_pos, what="> 0"),
    "steer.qoi": Key("str", "lookahead", choices=("lookahead", "initial")),
    "steer.alpha": Key("float", 0.1, check=_nonneg, what=">= 0"),
    "steer.rank": Key("int", 150, check=_pos, what="> 0"),
    "steer.neighborhood": Key("int", 8, check=lambda v: v in (4, 8), what="4 or 8"),
    "steer.kernel_width": Key("float", None, check=_pos, what="> 0"),
    "steer.mobile_origin": Key("vec2", (0.0, 0.0)),
    "steer.mobile_spacing": Key("float", 10.0, check=_pos, what="> 0"),
    "steer.mobile_shape": Key("vec2", (1, 1), check=lambda v: min(v) >= 1 and all(float(x).is_integer() for x in v),
                              what="positive integers"),
    "steer.start": Key("vec2", (0.0, 0.0)),
    "steer.design_maxiter": Key("int", 200, check=_pos, what="> 0"),
}

FAMILIES = {
    "obstacle": Key("vec4", what="xmin xmax ymin ymax"),
    "blob": Key("vec3", what="x y radius"),
    "sensor": Key("vec2", what="x y"),
}

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def _convert(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in ("str", "path"):
        if not raw:
            raise ValueError("empty value")
        return raw
    if kind.startswith("vec"):
        n = int(kind[3:])
        parts = raw.replace(",", " ").split()
        if len(parts) != n:
            raise ValueError(f"expected {n} numbers, got {len(parts)}")
        return tuple(float(p) for p in parts)
    raise AssertionError(kind)


def parse_text(text: str, source: str = "<string>", base_dir: Optional[Path] = None,
               overrides: Optional[Dict[str, str]] = None) -> "Scenario":
    problems: List[str] = []
    raw: Dict[str, Tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        m = _LINE.match(body)
        if not m:
            problems.append(f"{source}:{lineno}: cannot parse line {line.strip()!r}")
            continue
        key, val = m.group(1), m.group(2)
        if key in raw:
            problems.append(f"{source}:{lineno}: duplicate key {key!r} (first on line {raw[key][0]})")
            continue
        raw[key] = (lineno, val)
    for key, val in (overrides or {}).items():
        raw[key] = (0, str(val))

    values: Dict[str, Any] = {}
    families: Dict[str, Dict[int, tuple]] = {name: {} for name in FAMILIES}
    for key, (lineno, val) in raw.items():
        where = f"{source}:{lineno}" if lineno else "override"
        head, _, tail = key.rpartition(".")
        if key in SCHEMA:
            entry = SCHEMA[key]
        elif head in FAMILIES and tail.isdigit():
            entry = FAMILIES[head]
        else:
            problems.append(f"{where}: unknown key {key!r}")
            continue
        try:
            v = _convert(entry.kind, val)
        except ValueError as exc:
            problems.append(f"{where}: {key}: {exc}")
            continue
        if entry.choices and v not in entry.choices:
            problems.append(f"{where}: {key}: {v!r} not one of {', '.join(entry.choices)}")
            continue
        if entry.check is not None and not entry.check(v):
            problems.append(f"{where}: {key}: value {val!r} must be {entry.what}")
            continue
        if key in SCHEMA:
            values[key] = v
        else:
            families[head][int(tail)] = v
    for key, entry in SCHEMA.items():
        if key not in values:
            if key in raw:
                continue  # present but invalid, already reported
            if entry.required:
                problems.append(f"{source}: missing required key {key!r}")
            else:
                values[key] = entry.default
    base = Path(base_dir) if base_dir is not None else Path(".")
    for key, entry in SCHEMA.items():
        if entry.kind == "path" and values.get(key) is not None:
            p = Path(values[key])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                problems.append(f"{source}: {key}: file {str(p)!r} does not exist")
            values[key] = p
    if not problems:
        problems.extend(_semantic_checks(values, families))
    if problems:
        raise ScenarioError(problems)
    return Scenario(values, {k: dict(sorted(v.items())) for k, v in families.items()}, source)


def _semantic_checks(v: Dict[str, Any], fam) -> List[str]:
    out = []
    for i, (x0, x1, y0, y1) in fam["obstacle"].items():
        if not (x0 < x1 and y0 < y1):
            out.append(f"obstacle.{i}: need xmin < xmax and ymin < ymax")
    for i, (_, _, r) in fam["blob"].items():
        if r <= 0:
            out.append(f"blob.{i}: radius must be positive")
    if v["qoi.region"] is not None:
        x0, x1, y0, y1 = v["qoi.region"]
        if not (x0 < x1 and y0 < y1):
            out.append("qoi.region: need xmin < xmax and ymin < ymax")
    if not v["qoi.t_start"] <= v["qoi.t_end"] <= v["transport.T"]:
        out.append("qoi window must satisfy t_start <= t_end <= transport.T")
    if v["transport.dt"] > v["transport.T"]:
        out.append("transport.dt must not exceed transport.T")
    else:
        ratio = v["transport.T"] / v["transport.dt"]
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            out.append("transport.T must be an integer multiple of transport.dt")
    cutoff = v["obs.cutoff"] if v["obs.cutoff"] is not None else v["transport.T"]
    if cutoff > v["transport.T"] + 1e-12:
        out.append("obs.cutoff must not exceed transport.T")
    if v["obs.t_start"] > cutoff:
        out.append("obs.t_start must not exceed the observation cutoff")
    kind = v["experiment.kind"]
    if kind in ("oed1", "oed2") and v["qoi.region"] is None:
        out.append(f"experiment {kind} needs qoi.region")
    if kind == "steer":
        if v["steer.t_end"] < v["steer.t0"]:
            out.append("steer.t_end must not precede steer.t0")
        if v["steer.t_end"] + v["steer.lookahead"] > v["transport.T"] + 1e-9:
            out.append("transport.T must cover steer.t_end + steer.lookahead")
        if v["steer.lookahead"] < v["steer.dt_obs"]:
            out.append("steer.lookahead must be at least steer.dt_obs")
    if not fam["blob"] and v["truth.file"] is None:
        out.append("truth needs at least one blob.N or truth.file")
    if v["wind.kind"] == "file" and v["wind.file"] is None:
        out.append("wind.kind = file needs wind.file")
    return out


def parse_scenario(path, overrides: Optional[Dict[str, str]] = None) -> "Scenario":
    """Parse and validate a scenario file (see module docstring)."""
    p = Path(path)
    if not p.is_file():
        shipped = shipped_scenario(str(path))
        if shipped is None:
            raise ScenarioError([f"{path}: no such scenario file"])
        p = shipped
    return parse_text(p.read_text(encoding="utf-8"), str(p), p.parent, overrides)


def shipped_scenario(name: str) -> Optional[Path]:
    """Path of a scenario shipped with the package (``oed1.scn`` etc.)."""
    base = resources.files("oedsteer") / "scenarios"
    cand = base / (name if name.endswith(".scn") else name + ".scn")
    return Path(str(cand)) if cand.is_file() else None


@dataclass(eq=False)
class Scenario:
    values: Dict[str, Any]
    families: Dict[str, Dict[int, tuple]]
    source: str = "<string>"
    _cache: Dict[str, Any] = field(default_factory=dict, repr=False)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["experiment.kind"]

    @property
    def seed(self) -> int:
        return int(self.values["run.seed"])

    def referenced_files(self) -> List[Path]:
        return [self.values[k] for k, s in SCHEMA.items() if s.kind == "path" and self.values[k] is not None]

    def canonical(self) -> str:
        """Stable text form of the parsed configuration."""
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            lines.append(f"{key} = {v.name if isinstance(v, Path) else v!r}")
        for name in sorted(self.families):
            for i, v in self.families[name].items():
                lines.append(f"{name}.{i} = {v!r}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        h = hashlib.sha256(self.canonical().encode())
        for p in self.referenced_files():
            h.update(Path(p).read_bytes())
        return h.hexdigest()

    # ---- builders -----------------------------------------------------

    @cached_property
    def obstacles(self) -> List[RegionRect]:
        return [RegionRect(*v) for v in self.families["obstacle"].values()]

    @cached_property
    def grid(self):
        v = self.values
        return build_grid(v["grid.nx"], v["grid.ny"], (v["grid.width"], v["grid.height"]),
                          self.obstacles, (v["grid.x0"], v["grid.y0"]))

    @cached_property
    def wind(self):
        v = self.values
        if v["wind.kind"] == "file":
            return read_wind(v["wind.file"], self.grid)
        if v["wind.kind"] == "uniform":
            return uniform_wind(self.grid, v["wind.u"], v["wind.v"])
        return potential_flow_wind(self.grid, v["wind.speed"], v["wind.side"])

    @cached_property
    def transport(self) -> TransportConfig:
        v = self.values
        return TransportConfig(v["transport.kappa"], v["transport.dt"], v["transport.T"], self.wind)

    @cached_property
    def truth(self) -> ScalarField:
        v = self.values
        if v["truth.file"] is not None:
            return read_field(v["truth.file"], self.grid)
        total = np.zeros(self.grid.n_dof)
        for x, y, r in self.families["blob"].values():
            total += gaussian_blob(self.grid, (x, y), r, v["truth.cap"], v["truth.eps"]).values
        return ScalarField(self.grid, total)

    @cached_property
    def prior(self):
        from .prior import BiLaplacianPrior

        v = self.values
        mean = read_field(v["prior.mean_file"], self.grid) if v["prior.mean_file"] is not None else None
        return BiLaplacianPrior(self.grid, v["prior.eta"], v["prior.gamma"], v["prior.beta"], mean)

    def lattice_positions(self) -> np.ndarray:
        v = self.values
        (ox, oy), (sx, sy), (nx, ny) = v["candidates.origin"], v["candidates.spacing"], v["candidates.shape"]
        return np.array([(ox + i * sx, oy + j * sy) for j in range(int(ny)) for i in range(int(nx))])

    @cached_property
    def candidates(self) -> CandidateSet:
        v = self.values
        cutoff = v["obs.cutoff"] if v["obs.cutoff"] is not None else v["transport.T"]
        times = observation_times(v["obs.t_start"], v["obs.dt"], cutoff)
        return CandidateSet.build(self.transport, self.lattice_positions(), times,
                                  v["candidates.mode"], t_start=v["obs.t_start"], t_cutoff=cutoff)

    @cached_property
    def forward(self) -> ForwardMap:
        return ForwardMap.from_candidates(self.transport, self.candidates)

    @cached_property
    def inverse_problem(self):
        from .inversion import InverseProblem

        return InverseProblem(self.forward, self.prior, self.values["noise.sigma"])

    @cached_property
    def qoi(self) -> QoiSpec:
        v = self.values
        return QoiSpec(RegionRect(*v["qoi.region"]), v["qoi.t_start"], v["qoi.t_end"])

    @cached_property
    def goal(self):
        from .oed import goal_vector

        return goal_vector(self.qoi, self.transport)

    def rom(self, rank: Optional[int] = None):
        from .rom import build_rom

        v = self.values
        key = f"rom{rank}"
        if key not in self._cache:
            r = min(rank or v["rom.rank"], self.grid.n_dof, self.forward.n_meas)
            self._cache[key] = build_rom(self.forward, self.prior, r, v["rom.preconditioned"],
                                         v["rom.oversample"], v["rom.power_iters"], seed=self.seed)
        return self._cache[key]

    def design_problem(self):
        from .oed import DesignProblem

        v = self.values
        return DesignProblem(self.candidates, self.goal, v["oed.alpha"], v["noise.sigma"],
                             v["oed.rank"], v["oed.threshold"], route=v["oed.route"], seed=self.seed)

    def steering_config(self, mobile: bool = True, use_rom_map: bool = False):
        from .steering import SteeringConfig

        v = self.values
        return SteeringConfig(
            t0=v["steer.t0"], t_end=v["steer.t_end"], dt_obs=v["steer.dt_obs"],
            lookahead=v["steer.lookahead"], qoi_side=v["steer.qoi_side"], qoi_mode=v["steer.qoi"],
            alpha=v["steer.alpha"], rank=v["steer.rank"], threshold=v["oed.threshold"],
            neighborhood=v["steer.neighborhood"], kernel_width=v["steer.kernel_width"],
            mobile=mobile, use_rom_map=use_rom_map, design_maxiter=v["steer.design_maxiter"])

    def steering_setup(self, mobile: bool = True, rom=None, use_rom_map: bool = False):
        from .steering import MobileLattice, SteeringSetup

        v = self.values
        lattice = MobileLattice.build(self.grid, v["steer.mobile_origin"], v["steer.mobile_spacing"],
                                      tuple(int(n) for n in v["steer.mobile_shape"]))
        stationary = np.array(list(self.families["sensor"].values()), dtype=float).reshape(-1, 2)
        return SteeringSetup(self.steering_config(mobile, use_rom_map), self.transport, self.prior, self.truth,
                             stationary, lattice, v["steer.start"], v["noise.sigma"], self.seed, rom=rom)
