"""Scenario configuration: fields, validation and YAML loading."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .channel import PRESETS, PdrProfile

MODES = ("stationary", "host_dynamic", "full_dynamic")
FUSIONS = ("none", "centralized", "decentralized_opt", "decentralized_rand", "constant_alpha", "max_degree")
TOPOLOGIES = ("proximity", "ring")
_ALPHA_RE = re.compile(r"^constant_alpha\(\s*([0-9.eE+-]+)\s*\)$")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Mechanism:
    kind: str
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in FUSIONS:
            raise ValueError(f"unknown fusion {self.kind!r}; expected one of {', '.join(FUSIONS)}")
        if (self.kind == "constant_alpha") != (self.alpha is not None):
            raise ValueError("alpha is required for constant_alpha and only for it")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def label(self) -> str:
        return f"constant_alpha({self.alpha:g})" if self.kind == "constant_alpha" else self.kind

    @classmethod
    def parse(cls, text: str, alpha: float | None = None) -> "Mechanism":
        m = _ALPHA_RE.match(text.strip())
        if m:
            return cls("constant_alpha", float(m.group(1)))
        return cls(text.strip(), alpha)


@dataclass
class ScenarioConfig:
    # road map: "synthetic" grid or a map YAML path
    map: str = "synthetic"
    map_extent_m: float = 3000.0
    map_spacing_m: float = 250.0
    lane_half_width_m: float = 1.75
    kernel_sigma_m: float = 1.0
    # trajectories: "synthetic" or a CSV path
    trajectories: str = "synthetic"
    speed_range_mps: tuple = (8.0, 15.0)
    # synthetic networks are redrawn until the starting graph is connected
    connected_network: bool = True
    n_vehicles: int = 24
    mode: str = "stationary"
    fusion: str = "decentralized_opt"
    alpha: float | None = None
    # "lossless", a preset name, or {er_m, mr_m, pdr_er, pdr_mr}
    channel: object = "lossless"
    topology: str = "proximity"
    comm_range_m: float = 1000.0
    max_neighbors: int = 30
    n_steps: int = 3000
    dt: float = 0.1
    n_sats: int = 8
    constellation_seed: int = 0
    initial_bias_sigma_m: float = 10.0
    bias_drift_sigma: float = 0.1
    noncommon_sigma_m: float = 3.0
    n_particles: int = 100
    # centralized filter size; default n_vehicles * n_particles, the network's total budget
    central_particles: int | None = None
    filter_bias_drift_sigma: float = 1.0
    accel_sigma: float = 0.5
    road_constraints: bool = True
    provenance_window: int = 10
    seed: int = 0

    @property
    def mechanism(self) -> Mechanism:
        return Mechanism.parse(self.fusion, self.alpha)

    @property
    def central_particle_count(self) -> int:
        return self.central_particles or self.n_vehicles * self.n_particles

    @property
    def pdr_profile(self) -> PdrProfile | None:
        ch = self.channel
        if ch == "lossless":
            return None
        if isinstance(ch, str):
            return PRESETS[ch]
        return PdrProfile(float(ch["er_m"]), float(ch["mr_m"]), float(ch["pdr_er"]), float(ch["pdr_mr"]))

    @property
    def channel_label(self) -> str:
        if isinstance(self.channel, str):
            return self.channel
        p = self.pdr_profile
        return f"pdr({p.er:g},{p.mr:g},{p.p_er:g},{p.p_mr:g})"

    def problems(self) -> list:
        out = []
        if self.n_steps < 1:
            out.append("n_steps must be >= 1")
        if not self.dt > 0:
            out.append("dt must be > 0")
        if self.n_vehicles < 1:
            out.append("n_vehicles must be >= 1")
        if self.mode not in MODES:
            out.append(f"mode must be one of {', '.join(MODES)}")
        if self.topology not in TOPOLOGIES:
            out.append(f"topology must be one of {', '.join(TOPOLOGIES)}")
        if self.topology == "ring" and self.mode != "stationary":
            out.append("the fixed ring topology requires mode: stationary")
        try:
            self.mechanism
        except ValueError as exc:
            out.append(str(exc))
        try:
            self.pdr_profile
        except (KeyError, TypeError, ValueError) as exc:
            out.append(f"bad channel {self.channel!r}: {exc}")
        if not self.comm_range_m > 0:
            out.append("comm_range_m must be > 0")
        if self.max_neighbors < 1:
            out.append("max_neighbors must be >= 1")
        if self.n_sats < 4:
            out.append("n_sats must be >= 4")
        if self.n_particles < 2:
            out.append("n_particles must be >= 2")
        if self.central_particles is not None and self.central_particles < 2:
            out.append("central_particles must be >= 2")
        for name in ("initial_bias_sigma_m", "bias_drift_sigma", "filter_bias_drift_sigma", "accel_sigma"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if not self.noncommon_sigma_m > 0:
            out.append("noncommon_sigma_m must be > 0")
        lo, hi = self.speed_range_mps
        if not 0 <= lo <= hi:
            out.append("speed_range_mps must satisfy 0 <= low <= high")
        if self.map != "synthetic" and not Path(self.map).exists():
            out.append(f"map file not found: {self.map}")
        if self.trajectories != "synthetic" and not Path(self.trajectories).exists():
            out.append(f"trajectory file not found: {self.trajectories}")
        if self.trajectories != "synthetic" and abs(self.dt - 0.1) > 1e-12:
            out.append("trajectory files are sampled at 0.1 s, so dt must be 0.1")
        if self.topology == "ring" and self.n_vehicles < 2:
            out.append("the ring topology needs n_vehicles >= 2")
        if self.provenance_window < 1:
            out.append("provenance_window must be >= 1")
        if self.seed < 0:
            out.append("seed must be >= 0")
        return out

    def validate(self) -> "ScenarioConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["speed_range_mps"] = list(self.speed_range_mps)
        return d

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ScenarioConfig))
_INT_FIELDS = ("n_vehicles", "max_neighbors", "n_steps", "n_sats", "constellation_seed", "n_particles",
               "provenance_window", "seed", "central_particles")
_FLOAT_FIELDS = ("map_extent_m", "map_spacing_m", "lane_half_width_m", "kernel_sigma_m", "alpha",
                 "comm_range_m", "dt", "initial_bias_sigma_m", "bias_drift_sigma", "noncommon_sigma_m",
                 "filter_bias_drift_sigma", "accel_sigma")
_STR_FIELDS = ("map", "trajectories", "mode", "fusion", "topology")


def _type_problems(doc: dict) -> list:
    out = []
    for k, v in doc.items():
        if v is None and k in ("alpha", "central_particles"):
            continue
        if k in _INT_FIELDS and (isinstance(v, bool) or not isinstance(v, int)):
            out.append(f"{k} must be an integer, got {v!r}")
        elif k in _FLOAT_FIELDS and (isinstance(v, bool) or not isinstance(v, (int, float))):
            out.append(f"{k} must be a number, got {v!r}")
        elif k in _STR_FIELDS and not isinstance(v, str):
            out.append(f"{k} must be a string, got {v!r}")
        elif k in ("road_constraints", "connected_network") and not isinstance(v, bool):
            out.append(f"{k} must be true or false, got {v!r}")
        elif k == "speed_range_mps" and not (
                isinstance(v, (list, tuple)) and len(v) == 2
                and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            out.append(f"speed_range_mps must be [low, high], got {v!r}")
        elif k == "channel" and not isinstance(v, (str, dict)):
            out.append(f"channel must be a preset name or a mapping, got {v!r}")
    return out


def config_from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a mapping"])
    unknown = sorted(set(doc) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError([f"unknown key(s): {', '.join(unknown)}"])
    bad = _type_problems(doc)
    if bad:
        raise ConfigError(bad)
    doc = dict(doc)
    if "speed_range_mps" in doc:
        doc["speed_range_mps"] = tuple(doc["speed_range_mps"])
    try:
        cfg = ScenarioConfig(**doc)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from exc
    return cfg.validate()


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML: {exc}"]) from exc
    return config_from_dict(doc or {})


def save_config(cfg: ScenarioConfig, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path
