"""Experiment configuration: strict YAML schema plus dotted overrides.

The file mirrors the nested sections below; unknown keys anywhere are hard
errors so a typo cannot silently drop a setting.  All physical quantities
are SI; reporting converts to cm/degrees only at the output edge.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .mpc import SmoothingConfig, TrackingConfig

CONTROLLERS = ("smoothing", "is-tracking", "open-loop-is", "none")


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass
class SweepSection:
    duration: float = 3.0
    dt: float = 1e-3
    profile: str = "linear_ramp"


@dataclass
class SimSection:
    # None means "model default": dt_sim 1e-5 (planar) / 1e-4 (spatial),
    # dt_control 1e-3, duration = sweep duration.
    duration: float | None = None
    dt_sim: float | None = None
    dt_control: float | None = None
    integrator: str = "euler"
    noise: bool = False
    noise_pose: float = 1e-5
    noise_velocity: float = 1e-4
    seed: int = 0


@dataclass
class InvstatSection:
    c_min: float = 0.5
    stacking: str = "planar6"


@dataclass
class ExperimentConfig:
    model: str = "2d-default"
    controller: str = "none"
    sweep: SweepSection = field(default_factory=SweepSection)
    sim: SimSection = field(default_factory=SimSection)
    invstat: InvstatSection = field(default_factory=InvstatSection)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def validate(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}")
        if self.sweep.duration <= 0 or self.sweep.dt <= 0:
            raise ConfigError("sweep duration and dt must be positive")
        if self.sim.integrator not in ("euler", "rk4"):
            raise ConfigError("integrator must be euler or rk4")
        if self.invstat.stacking not in ("planar6", "collapsed"):
            raise ConfigError("stacking must be planar6 or collapsed")

    def resolved_sim(self, model_d: int, sweep_duration: float) -> SimSection:
        """Fill model-dependent simulation defaults."""
        sim = SimSection(**asdict(self.sim))
        if sim.dt_sim is None:
            sim.dt_sim = 1e-5 if model_d == 2 else 1e-4
        if sim.dt_control is None:
            sim.dt_control = 1e-3
        if sim.duration is None:
            sim.duration = sweep_duration
        return sim

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {
    "sweep": SweepSection,
    "sim": SimSection,
    "invstat": InvstatSection,
    "smoothing": SmoothingConfig,
    "tracking": TrackingConfig,
}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys under '{path}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{path}' section: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    top_known = {"model", "controller"} | set(_SECTION_TYPES)
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    if "model" in data:
        kwargs["model"] = str(data["model"])
    if "controller" in data:
        kwargs["controller"] = str(data["controller"])
    for name, cls in _SECTION_TYPES.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"'{name}' must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def apply_override(data: dict, assignment: str) -> dict:
    """Apply one 'dotted.key=value' override to a plain config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    if isinstance(value, str):
        # YAML 1.1 misses floats like "1e-4"; accept plain numeric strings.
        try:
            value = int(value)
        except ValueError:
            try:
                value = float(value)
            except ValueError:
                pass
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path '{key}' crosses a scalar")
    node[parts[-1]] = value
    return data


def resolve_config(path=None, overrides=()) -> ExperimentConfig:
    """Load (or default) a config, apply overrides, validate strictly."""
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be a mapping")
    else:
        raw = {}
    for assignment in overrides:
        apply_override(raw, assignment)
    return config_from_dict(raw)


def config_header_lines(cfg: ExperimentConfig, extra: dict | None = None) -> list[str]:
    """Deterministic '#'-comment header echoing the resolved config."""
    payload = cfg.to_dict()
    if extra:
        payload = {**payload, **extra}
    dumped = yaml.safe_dump(payload, sort_keys=True, default_flow_style=True, width=10**6)
    return [line for line in dumped.strip().splitlines()]
