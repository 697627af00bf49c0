"""Experiment configuration: TOML files with nested sections plus dotted overrides."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import BaselineConfig
from .critic import CriticTrainConfig
from .planner import CemConfig
from .policy import PolicyTrainConfig

METHODS = ("laeo", "oril", "purl", "bc")
QUALITY_BANDS = {"medium": (0.45, 0.55), "hard": (0.08, 0.12)}
SWEEP_AXES = ("n_success", "n_trajectories", "quality")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    n_trajectories: int = 2000
    quality: str = "medium"
    seed: int = 0
    path: str = ""  # existing dataset file; generated when empty
    noise_std: float | None = None  # skip calibration when set
    calibration_iters: int = 12


@dataclass
class SweepSpec:
    axis: str = "n_success"
    values: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    env_id: str = "reach2d"
    method: str = "laeo"
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_episodes: int = 100
    n_success_examples: int = 200
    out_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    critic: CriticTrainConfig = field(default_factory=CriticTrainConfig)
    policy: PolicyTrainConfig = field(default_factory=PolicyTrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    planner: CemConfig = field(default_factory=CemConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dataset.quality not in QUALITY_BANDS:
            raise ConfigError(f"dataset.quality must be one of {tuple(QUALITY_BANDS)}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of non-negative integers")
        if self.eval_episodes < 1 or self.n_success_examples < 1:
            raise ConfigError("eval_episodes and n_success_examples must be positive")
        if self.sweep.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where or 'top level'}]: {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"[{name}] must be a section")
            kwargs[name] = _build(type(current), value, name)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'top level'}] {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def parse_override(text: str) -> tuple[list[str], object]:
    """``"critic.steps=500"`` -> ``(["critic", "steps"], 500)``; values use TOML syntax, bare words are strings."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-section")
        node[path[-1]] = value
    return data


def load_config(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    data = apply_overrides(data, overrides)
    cfg = from_dict(data)
    if seed is not None:
        cfg = replace(cfg, seeds=[seed])
    if out is not None:
        cfg = replace(cfg, out_dir=out)
    return cfg


def dump_toml(cfg: ExperimentConfig) -> str:
    """Minimal TOML writer for the resolved config (scalars, lists and one level of sections)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    top, sections = [], []
    for k, v in cfg.to_dict().items():
        if isinstance(v, dict):
            body = [f"{kk} = {fmt(vv)}" for kk, vv in v.items() if vv is not None]
            sections.append(f"[{k}]\n" + "\n".join(body))
        elif v is not None:
            top.append(f"{k} = {fmt(v)}")
    return "\n".join(top) + "\n\n" + "\n\n".join(sections) + "\n"
