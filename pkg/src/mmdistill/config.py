"""Run configuration: nested dataclasses with JSON load/save and a resolved snapshot."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from mmdistill.data import DatasetSpec
from mmdistill.denoiser import ArchDescriptor
from mmdistill.distill import DistillConfig
from mmdistill.optim import AdamConfig
from mmdistill.sampler import SamplerConfig
from mmdistill.schedule import Schedule
from mmdistill.teacher import TeacherConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 5000
    n_reference: int = 5000
    n_perm: int = 200
    moment_n: int = 20000
    knn: int = 32
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: Schedule = field(default_factory=Schedule)
    arch: ArchDescriptor = field(default_factory=ArchDescriptor)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def resolved(self) -> "RunConfig":
        """Copy with every sub-seed derived from ``seed`` and the teacher schedule tied to its step count."""
        s = self.seed
        t = self.teacher
        adam = replace(t.adam, total_steps=t.steps) if t.steps else t.adam
        return replace(
            self,
            teacher=replace(t, seed=s, adam=adam),
            distill=replace(self.distill, seed=s + 1),
            sampler=replace(self.sampler, seed=s + 2),
            eval=replace(self.eval, seed=s + 3),
        )

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")


def override(cfg, **changes):
    """``replace`` that skips ``None`` values (unset CLI flags)."""
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def _dataclass_in(tp):
    """The dataclass type inside ``tp`` (which may be ``X | None``), else None."""
    if dataclasses.is_dataclass(tp):
        return tp
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            if dataclasses.is_dataclass(arg):
                return arg
    return None


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _dataclass_in(hints[name])
        if sub is not None and value is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list) and typing.get_origin(hints[name]) is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return RunConfig.from_dict(d)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def toy_config(out_dir: str = "runs/toy", steps: int = 200) -> RunConfig:
    """A small configuration that runs end to end in seconds."""
    return RunConfig(
        arch=ArchDescriptor(hidden_dims=(32, 32), time_embed_dim=8),
        teacher=TeacherConfig(steps=steps, batch_size=64, adam=AdamConfig(lr=1e-3, warmup_steps=20)),
        distill=DistillConfig(total_steps=steps, batch_size=64, opt_eta=AdamConfig(lr=1e-4, warmup_steps=20),
                              opt_phi=AdamConfig(lr=1e-4, warmup_steps=20)),
        eval=EvalConfig(n_samples=500, n_reference=500, n_perm=50, moment_n=2000),
        out_dir=out_dir,
    )
