"""Run configuration: one YAML file with a section per component.

Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .learning import TrainConfig
from .powerflow import ConfigError, ScenarioParams
from .snfg import ObservationModel
from .studies import DEFAULT_P2_GRID, DEFAULT_P3_GRID, DEFAULT_TRAIN_PS, WelfareParams


@dataclass(frozen=True)
class SweepConfig:
    train_ps: tuple = DEFAULT_TRAIN_PS
    sim_ps: tuple = DEFAULT_TRAIN_PS
    p2_grid: tuple = DEFAULT_P2_GRID
    p3_grid: tuple = DEFAULT_P3_GRID
    n_eval_episodes: int = 2000
    p3_cutoff: float = 1.5
    fixed_p3: Optional[float] = None  # design sweep: hold generator output instead of tracking p3_max


@dataclass(frozen=True)
class SimulateConfig:
    p: float = 1.0
    episodes: int = 1
    steps: int = 100
    attack_at_step: Optional[int] = None


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    observation: ObservationModel = field(default_factory=ObservationModel)
    training: TrainConfig = field(default_factory=TrainConfig)
    welfare: WelfareParams = field(default_factory=WelfareParams)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    master_seed: int = 0
    output_dir: str = "out"
    threads: int = 1

    def to_dict(self) -> dict:
        return _plain(asdict(self))


_SECTIONS = {
    "scenario": ScenarioParams,
    "observation": ObservationModel,
    "training": TrainConfig,
    "welfare": WelfareParams,
    "sweep": SweepConfig,
    "simulate": SimulateConfig,
}
_TOP_LEVEL = {"master_seed", "output_dir", "threads"}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section [{section}] must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(_SECTIONS) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw = {name: _build(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data}
    for key in _TOP_LEVEL:
        if key in data:
            kw[key] = data[key]
    cfg = RunConfig(**kw)
    if not isinstance(cfg.master_seed, int) or not 0 <= cfg.master_seed < 2 ** 64:
        raise ConfigError("master_seed must be a 64-bit nonnegative integer")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def override(cfg: RunConfig, section: Optional[str] = None, **changes) -> RunConfig:
    """Copy of `cfg` with keys of one section (or top-level keys) replaced."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    data = cfg.to_dict()
    if section is None:
        data.update(changes)
    else:
        data[section].update(changes)
    return config_from_dict(data)
