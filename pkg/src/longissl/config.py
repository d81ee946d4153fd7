"""Run configuration: nested dataclasses loaded from YAML with ``key.path=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentParams, DownstreamAugmentParams, NormMode, scale_translation
from .data import DESK_RESOLUTION, DIAGNOSES, MAX_GAP_YEARS, MAX_SEQUENCE_LENGTH, MIN_GAP_YEARS, TaskKind, ValidationError
from .nets import CLASSIFIER_HIDDEN, ConfigError, EncoderConfig
from .objectives import DEFAULT_TEMPERATURE, EPS
from .synth import PhantomSpec

METHODS = ("TOV", "TOP", "TOPC", "SUPERVISED")


@dataclass
class DataConfig:
    manifest: str | None = None
    splits: str | None = None
    min_gap: float = MIN_GAP_YEARS
    max_gap: float = MAX_GAP_YEARS
    max_len: int = MAX_SEQUENCE_LENGTH
    norm_mode: str = NormMode.ZSCORE.value


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    temperature: float = DEFAULT_TEMPERATURE
    negatives: str = "all"
    contrastive_weight: float = 1.0
    order_weight: float = 1.0
    eps: float = EPS
    augment: AugmentParams = field(default_factory=AugmentParams)


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_encoder: float = 1e-5
    lr_head: float = 1e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    augment: DownstreamAugmentParams = field(default_factory=DownstreamAugmentParams)


@dataclass
class TaskConfig:
    kind: str = "STABLE_CLASSIFICATION"
    num_images: int = 1
    from_label: str = "MCI"
    to_label: str = "AD"


@dataclass
class RunConfig:
    method: str = "TOP"
    seed: int = 0
    resolution: tuple[int, int, int] = DESK_RESOLUTION
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    hidden: tuple[int, ...] = CLASSIFIER_HIDDEN
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    num_trials: int = 3
    run_root: str = "runs"
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.method = str(self.method).upper()
        self.resolution = tuple(int(v) for v in self.resolution)
        self.hidden = tuple(int(v) for v in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}, got {self.method!r}")
        checks = {
            "pretrain.epochs": self.pretrain.epochs,
            "pretrain.batch_size": self.pretrain.batch_size,
            "pretrain.temperature": self.pretrain.temperature,
            "finetune.epochs": self.finetune.epochs,
            "finetune.batch_size": self.finetune.batch_size,
            "num_trials": self.num_trials,
        }
        for name, v in checks.items():
            if not v > 0:
                raise ConfigError(f"{name}: must be > 0, got {v}")
        # a zero learning rate is allowed (optimizer sanity runs)
        for name, v in {"pretrain.lr": self.pretrain.lr, "finetune.lr_encoder": self.finetune.lr_encoder, "finetune.lr_head": self.finetune.lr_head}.items():
            if not v >= 0:
                raise ConfigError(f"{name}: must be >= 0, got {v}")
        for name, opt in (("pretrain.optimizer", self.pretrain.optimizer), ("finetune.optimizer", self.finetune.optimizer)):
            if opt not in ("adam", "adamw", "sgd"):
                raise ConfigError(f"{name}: unknown optimizer {opt!r}")
        if len(self.resolution) != 3 or min(self.resolution) < 8:
            raise ConfigError(f"resolution: expected three sizes >= 8, got {self.resolution}")
        if not 1 <= self.task.num_images <= 3:
            raise ConfigError("task.num_images: must be 1, 2 or 3")
        try:
            NormMode(self.data.norm_mode)
        except ValueError:
            raise ConfigError(f"data.norm_mode: unknown mode {self.data.norm_mode!r}") from None
        if self.task.kind not in {k.value for k in TaskKind}:
            raise ConfigError(f"task.kind: unknown task {self.task.kind!r}")
        for name in ("from_label", "to_label"):
            if getattr(self.task, name) not in {d.value for d in DIAGNOSES}:
                raise ConfigError(f"task.{name}: must be one of CN, MCI, AD")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def desk_config(**overrides) -> RunConfig:
    """Desk-scale defaults: 32^3 volumes, slim encoder, translation bounds rescaled."""
    cfg = RunConfig()
    cfg.pretrain.augment.translation_max_vox = scale_translation(15.0, cfg.resolution)
    cfg.finetune.augment.translation_max_vox = scale_translation(5.0, cfg.resolution)
    return apply_overrides(cfg, overrides) if overrides else cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{prefix}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if _is_dataclass_type(tp):
            kwargs[key] = _build(tp, value or {}, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(tp, value, f"{prefix}{key}")
    try:
        return cls(**kwargs)
    except (ValidationError, ConfigError, TypeError, ValueError) as exc:
        msg = str(exc)
        if prefix and not msg.startswith(prefix):
            msg = f"{prefix.rstrip('.')}: {msg}"
        raise ConfigError(msg) from None


def _coerce(tp, value, name: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    try:
        if origin is tuple:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            inner = args[0] if args else float
            return tuple(inner(v) for v in value)
        if tp is bool:
            return bool(value)
        if tp in (int, float, str):
            if tp is int and isinstance(value, float) and not value.is_integer():
                raise TypeError
            return tp(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {getattr(tp, '__name__', tp)}") from None
    return value


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {})


def load_config(path: str | Path | None, overrides: dict[str, Any] | list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file {path} does not exist")
        data = yaml.safe_load(path.read_text()) or {}
    base = desk_config().to_dict()
    merged = _deep_merge(base, data)
    for key, value in _parse_overrides(overrides).items():
        _set_path(merged, key, value)
    return config_from_dict(merged)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any] | list[str]) -> RunConfig:
    data = cfg.to_dict()
    for key, value in _parse_overrides(overrides).items():
        _set_path(data, key, value)
    return config_from_dict(data)


def _parse_overrides(overrides) -> dict[str, Any]:
    if not overrides:
        return {}
    if isinstance(overrides, dict):
        return dict(overrides)
    out = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _set_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"{dotted}: unknown field")
    node[parts[-1]] = value


def _deep_merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
