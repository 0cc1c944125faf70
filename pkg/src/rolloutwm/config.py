"""Run configuration: one YAML tree with a strict schema built from the module configs."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig
from .errors import ConfigError, ContractViolation
from .srr import BaseConfig, SrrConfig
from .trd import TrdConfig
from .worldsim import WorldConfig


@dataclass(frozen=True)
class DataConfig:
    train_clips: int = 256
    test_clips: int = 32
    frames: int = 48


@dataclass(frozen=True)
class EvalConfig:
    n_chunks: int = 10
    chunk: int = 4
    sampler_steps: int = 16
    cumulative: bool = True


@dataclass(frozen=True)
class ClosedLoopConfig:
    n_chunks: int = 50
    chunk: int = 4
    sampler_steps: int = 16
    controller: str = "pursuit"

    def __post_init__(self):
        if self.controller not in ("pursuit", "zero"):
            raise ConfigError(f"unknown controller {self.controller!r}")


@dataclass(frozen=True)
class PathConfig:
    """Relative paths resolve against ``RunConfig.out``."""

    dataset: str = "train.hdds"
    test_dataset: str = "test.hdds"
    base_checkpoint: str = "base.hdwm"
    srr_checkpoint: str = "srr.hdwm"
    student_checkpoint: str = "student.hdwm"
    rollout: str = "rollout.npz"
    report: str = "report.csv"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    stage: str = "all"
    data: DataConfig = field(default_factory=DataConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    srr: SrrConfig = field(default_factory=SrrConfig)
    trd: TrdConfig = field(default_factory=TrdConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    closed_loop: ClosedLoopConfig = field(default_factory=ClosedLoopConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def __post_init__(self):
        T = self.base.T
        if self.srr.T != T or self.trd.T != T:
            raise ConfigError(f"history length differs across stages: base {T}, srr {self.srr.T}, trd {self.trd.T}")
        if self.model.latent_dim != self.world.latent_dim or self.model.layout_dim != self.world.layout_dim:
            raise ConfigError("model latent/layout dims do not match the world")
        frames = self.data.frames
        needs = {
            "base windows": T + max(self.base.chunk_sizes),
            "srr windows": T + self.srr.cache_depth * self.srr.K + max(self.srr.chunk_sizes),
            "distillation": T + self.trd.n_chunks * self.trd.k_student,
            "evaluation": T + self.eval.n_chunks * self.eval.chunk,
        }
        for what, n in needs.items():
            if n > frames:
                raise ConfigError(f"{what} need {n} frames per clip, data has {frames}")
        longest = T + max(max(self.base.chunk_sizes), max(self.srr.chunk_sizes), self.trd.k_teacher)
        if longest > self.model.max_frames:
            raise ConfigError(f"windows of {longest} frames exceed model max_frames {self.model.max_frames}")

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else Path(self.out) / p

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return build(hint, value, where)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _coerce(value, hint, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = typing.get_args(hint)
        inner = args[0] if args else object
        return tuple(_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def build(cls, data, where: str = "config"):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ContractViolation, ConfigError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return build(RunConfig, data)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text, overrides)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
