"""Training configuration, JSON (de)serialization with strict key checking, profiles."""

from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .losses import LossConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class ModelConfig:
    dim: int = 384
    d_in: int | None = None
    hidden: int | None = None
    enc_depth: int = 12
    dec_depth: int = 4
    heads: int = 6
    dfg_heads: int = 6
    embed_hidden: int = 64
    pos_hidden: int = 128
    coef_hidden: int = 64
    head_hidden: int = 256
    drop_path: float = 0.0

    @property
    def token_in(self) -> int:
        return self.d_in or self.dim

    @property
    def adapter_hidden(self) -> int:
        return self.hidden or self.token_in


@dataclass
class PatchConfig:
    g: int = 128
    k: int = 32
    n_points: int = 4096
    mask_ratio: float = 0.6
    fps_start: int = 0


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])


@dataclass
class ScheduleConfig:
    epochs: int = 300
    warmup_epochs: int = 10


@dataclass
class PathsConfig:
    corpus: str | None = None
    val_corpus: str | None = None
    probe_corpus: str | None = None
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    metrics_out: str | None = None
    report_out: str | None = None


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    model: ModelConfig = field(default_factory=ModelConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 512
    seed: int = 0
    task_domain: str | None = None
    n_classes: int | None = None
    use_hda: bool = True
    use_dfg: bool = True
    freeze_hda: bool = True
    allow_fusion_checkpoint: bool = False
    augment: bool = True
    precision: str = "float32"
    eval_seed: int = 12345
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "TrainConfig":
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}", "phase")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}", "precision")
        positive = {
            "model.dim": self.model.dim, "model.enc_depth": self.model.enc_depth,
            "model.dec_depth": self.model.dec_depth, "model.heads": self.model.heads,
            "model.dfg_heads": self.model.dfg_heads, "patch.g": self.patch.g, "patch.k": self.patch.k,
            "patch.n_points": self.patch.n_points, "batch_size": self.batch_size,
            "schedule.epochs": self.schedule.epochs, "model.head_hidden": self.model.head_hidden,
        }
        for key, val in positive.items():
            if val <= 0:
                raise ConfigError(f"{key} must be positive, got {val}", key)
        if self.schedule.warmup_epochs < 0:
            raise ConfigError("schedule.warmup_epochs must be >= 0", "schedule.warmup_epochs")
        if self.model.dim % self.model.heads:
            raise ConfigError("model.dim must be divisible by model.heads", "model.heads")
        if self.model.dim % self.model.dfg_heads:
            raise ConfigError("model.dim must be divisible by model.dfg_heads", "model.dfg_heads")
        if not 0.0 <= self.patch.mask_ratio < 1.0:
            raise ConfigError("patch.mask_ratio must lie in [0, 1)", "patch.mask_ratio")
        if self.patch.g > self.patch.n_points or self.patch.k > self.patch.n_points:
            raise ConfigError("patch.g and patch.k must not exceed patch.n_points", "patch.g")
        if self.optimizer.lr < 0:
            raise ConfigError("optimizer.lr must be nonnegative", "optimizer.lr")
        if len(self.optimizer.betas) != 2:
            raise ConfigError("optimizer.betas needs two values", "optimizer.betas")
        try:
            LossConfig.__post_init__(self.loss)
        except ValueError as exc:
            raise ConfigError(str(exc), "loss") from None
        if self.phase == "finetune":
            if self.task_domain is None:
                raise ConfigError("finetune requires task_domain", "task_domain")
            if not self.n_classes or self.n_classes < 2:
                raise ConfigError("finetune requires n_classes >= 2", "n_classes")
        if self.task_domain is not None:
            from .geometry import DomainId
            try:
                DomainId.parse(self.task_domain)
            except (ValueError, KeyError):
                raise ConfigError(f"unknown task_domain {self.task_domain!r}", "task_domain") from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def copy(self, **overrides) -> "TrainConfig":
        cfg = copy.deepcopy(self)
        for key, val in overrides.items():
            set_path(cfg, key, val)
        return cfg


def _check_type(value, tp, key):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _check_type(value, arg, key)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0]
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}", key)
        (inner,) = typing.get_args(tp)
        return [_check_type(v, inner, key) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}", key)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key)
        return value
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, key)
    return value


def _from_dict(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object", prefix or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}", path)
        kwargs[key] = _check_type(val, hints[key], path)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}", prefix or None) from None


def from_dict(data: dict, validate: bool = True) -> TrainConfig:
    cfg = _from_dict(TrainConfig, data)
    return cfg.validate() if validate else cfg


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg, dotted: str, value) -> None:
    """Assign ``value`` at a dotted path, type-checked against the field annotation."""
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {dotted!r}", dotted)
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}", dotted)
    tp = typing.get_type_hints(type(obj))[leaf]
    setattr(obj, leaf, _check_type(value, tp, dotted))


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", item)
        key, text = item.split("=", 1)
        set_path(cfg, key.strip(), _parse_scalar(text.strip()))
    return cfg.validate()


def desk_config(phase: str = "pretrain", **overrides) -> TrainConfig:
    """Desk-scale profile: minutes on a laptop CPU, every mechanism exercised."""
    cfg = TrainConfig(
        phase=phase,
        model=ModelConfig(dim=96, enc_depth=3, dec_depth=2, heads=4, dfg_heads=4),
        patch=PatchConfig(g=32, k=32, n_points=512, mask_ratio=0.6),
        optimizer=OptimizerConfig(lr=1e-3),
        schedule=ScheduleConfig(epochs=30, warmup_epochs=1),
        batch_size=16,
    )
    if phase == "finetune":
        # 200 clouds x 30 epochs is ~200 steps: a higher rate, and neither drop path
        # nor scale jitter (which hides the curvature cue the task depends on)
        cfg.optimizer.lr = 1e-3
        cfg.batch_size = 32
        cfg.model.drop_path = 0.0
        cfg.augment = False
        cfg.patch.n_points = 256
        cfg.task_domain = "object"
        cfg.n_classes = 4
    return cfg.copy(**overrides).validate()


def tiny_config(**overrides) -> TrainConfig:
    """Gradient-check dimensions: D=8, G=6, k=4, B=3, double precision."""
    cfg = TrainConfig(
        model=ModelConfig(dim=8, enc_depth=2, dec_depth=1, heads=2, dfg_heads=2,
                          coef_hidden=8, head_hidden=16),
        patch=PatchConfig(g=6, k=4, n_points=32, mask_ratio=0.5),
        schedule=ScheduleConfig(epochs=1, warmup_epochs=0),
        batch_size=3,
        precision="float64",
        task_domain="object",
        n_classes=4,
        loss=LossConfig(w1=1.0, w2=1.0),
    )
    return cfg.copy(**overrides).validate()


def finetune_defaults(cfg: TrainConfig) -> TrainConfig:
    """Full-scale classification fine-tune settings applied on top of ``cfg``."""
    cfg = copy.deepcopy(cfg)
    cfg.phase = "finetune"
    cfg.optimizer.lr = 5e-5
    cfg.batch_size = 32
    cfg.schedule = ScheduleConfig(epochs=300, warmup_epochs=10)
    cfg.model.drop_path = 0.1
    cfg.patch.n_points = 2048
    cfg.patch.g, cfg.patch.k = 128, 32
    return cfg
