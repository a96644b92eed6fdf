"""Experiment configuration: dataclasses plus a strict YAML loader."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..data import AugmentationSpec, ConfigError, MixerSpec, TaskSpec
from ..losses import LossConfig
from ..models import EncoderSpec, HeadSpec, head_hidden_size
from ..train import OptimizerSpec, TrainConfig

SCHEMA_VERSION = 1

PROCEDURES = (
    "probe-teacher",
    "finetune-teacher",
    "probe-student",
    "finetune-student",
    "distill",
    "distill+sd",
    "self-distill",
    "distill-finetuned-teacher",
    "distill-hard-label",
    "distill-dkd",
    "ablations",
)


@dataclass
class HeadChoice:
    kind: str = "mlp"
    regime: str = "student"
    n_hidden: int | None = None

    def resolve(self, n_in: int, n_out: int) -> HeadSpec:
        if self.kind == "linear":
            return HeadSpec("linear", n_in, n_out)
        hidden = self.n_hidden or head_hidden_size(n_in, n_out, self.regime)
        return HeadSpec("mlp", n_in, n_out, hidden)


@dataclass
class GridSpec:
    lr: list[float] = field(default_factory=lambda: [1e-3])
    weight_decay: list[float] = field(default_factory=lambda: [1e-4])

    def points(self) -> list[tuple[float, float]]:
        return [(lr, wd) for lr in self.lr for wd in self.weight_decay]


def _adamw(lr: float, wd: float) -> OptimizerSpec:
    return OptimizerSpec("adamw", lr, wd)


_JITTER = 0.1


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher_encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(64, [640], 64))
    student_encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(64, [64], 32))
    teacher_head: HeadChoice = field(default_factory=lambda: HeadChoice("mlp", "large-teacher"))
    student_head: HeadChoice = field(default_factory=lambda: HeadChoice("mlp", "student"))
    pretrain_teacher: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, batch_size=64, optimizer=_adamw(3e-3, 1e-4))
    )
    pretrain_student: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=1, batch_size=64, optimizer=_adamw(3e-3, 1e-4))
    )
    probe: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            epochs=30,
            batch_size=16,
            optimizer=_adamw(3e-3, 1e-1),
            augmentation=AugmentationSpec(jitter_sigma=_JITTER, mixup_alpha=0.0),
        )
    )
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            epochs=80,
            batch_size=16,
            optimizer=_adamw(1e-3, 1e-4),
            augmentation=AugmentationSpec(jitter_sigma=_JITTER, mixup_alpha=0.2),
        )
    )
    distill: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            epochs=80,
            batch_size=16,
            optimizer=_adamw(1e-3, 1e-4),
            loss=LossConfig("combined", temperature=2.0, alpha=0.5),
            augmentation=AugmentationSpec(jitter_sigma=_JITTER, mixup_alpha=0.2),
        )
    )
    mixer: MixerSpec = field(default_factory=MixerSpec)
    multiplier: int = 10
    grids: dict[str, GridSpec] = field(
        default_factory=lambda: {
            "finetune-student": GridSpec([1e-3, 3e-3], [1e-4]),
            "distill": GridSpec([1e-3, 3e-3], [1e-4]),
        }
    )
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    teacher_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    runs_per_teacher: int | None = 3
    pairing: str = "cross"
    strict_batches: bool = False
    procedures: list[str] = field(
        default_factory=lambda: [
            "probe-teacher",
            "probe-student",
            "finetune-student",
            "distill",
            "distill+sd",
        ]
    )

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        self.task.validate()
        for name in ("teacher_encoder", "student_encoder"):
            enc: EncoderSpec = getattr(self, name)
            enc.validate()
            if enc.input_dim != self.task.d_in:
                raise ConfigError(f"{name}.input_dim {enc.input_dim} != task.d_in {self.task.d_in}")
        for name in ("pretrain_teacher", "pretrain_student", "probe", "finetune", "distill"):
            getattr(self, name).validate()
        self.mixer.validate()
        if not self.seeds or not self.teacher_seeds:
            raise ConfigError("seeds and teacher_seeds must be non-empty")
        if self.pairing not in ("cross", "paired"):
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.pairing == "paired" and len(self.seeds) != len(self.teacher_seeds):
            raise ConfigError("paired mode needs as many teacher seeds as student seeds")
        unknown = set(self.procedures) - set(PROCEDURES)
        if unknown:
            raise ConfigError(f"unknown procedures {sorted(unknown)}")
        for name, grid in self.grids.items():
            if not grid.points():
                raise ConfigError(f"grid for {name!r} is empty")

    @property
    def student_seeds(self) -> list[int]:
        if self.runs_per_teacher is None:
            return list(self.seeds)
        return list(self.seeds[: self.runs_per_teacher])


# ---------------------------------------------------------------------------
# (de)serialization


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(non_none[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin is list:
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin is dict:
        return {k: _coerce(args[1], v, f"{where}.{k}") for k, v in value.items()}
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def from_dict(cls, data: dict, where: str = "config"):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if "schema_version" not in raw:
            raise ConfigError("config is missing schema_version")
        cfg = from_dict(ExperimentConfig, raw)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return path
