"""Configuration dataclasses, strict JSON (de)serialization, and overrides.

All run artifacts echo their effective config; the hash of the canonical
JSON form identifies a configuration in reports.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import SceneConfig
from .fusion import ResoBlendConfig


class ConfigError(ValueError):
    pass


@dataclass
class DecoderConfig:
    num_queries: int = 20
    depth: int = 3
    embed_dim: int = 64
    heads: int = 4
    mask_dim: int = 64
    no_entity_weight: float = 0.1
    cost_class: float = 2.0
    cost_bce: float = 5.0
    cost_dice: float = 5.0
    loss_entity: float = 1.0
    loss_bce: float = 1.0
    loss_dice: float = 1.0

    @property
    def cost_weights(self) -> tuple[float, float, float]:
        return (self.cost_class, self.cost_bce, self.cost_dice)

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.loss_entity, self.loss_bce, self.loss_dice)


@dataclass
class AssociationConfig:
    width: int = 64
    head: str = "fc"  # "fc" | "fc_relu_fc"
    tau_a: float = 0.5
    tau_e: float = 0.5


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    vision_width: int = 64
    vision_depth: int = 2
    vision_heads: int = 4
    lang_width: int = 64
    lang_depth: int = 2
    lang_heads: int = 4
    context_limit: int = 512
    pyramid_widths: tuple[int, int, int, int] = (32, 64, 96, 128)
    fused_width: int = 64
    dtype: str = "float32"
    resoblend: ResoBlendConfig = field(default_factory=ResoBlendConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)

    def validate(self) -> None:
        if self.image_size % 32:
            raise ConfigError("image_size must be divisible by 32")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if len(self.pyramid_widths) != 4:
            raise ConfigError("pyramid_widths must have 4 entries")
        self.resoblend.validate()


@dataclass
class TrainConfig:
    ratios: tuple[float, float, float] = (0.2, 0.2, 0.6)
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    decay_factor: float = 0.1
    milestone_fractions: tuple[float, float] = (0.92, 0.96)
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    seg_only: bool = False
    log_every: int = 1

    def validate(self) -> None:
        if any(r < 0 for r in self.ratios):
            raise ConfigError("task ratios must be non-negative")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"task ratios must sum to 1, got {sum(self.ratios)}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        self.train.validate()


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(cls, d: dict):
    """Strict dataclass construction: unknown keys raise, nesting recurses."""
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} section must be an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        target = hints[name]
        if dataclasses.is_dataclass(target):
            kwargs[name] = from_dict(target, value)
        elif typing.get_origin(target) is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """RunConfig from an optional JSON file plus dotted-key overrides."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"cannot parse config {p}: {err}") from err
    for item in overrides or []:
        apply_override(doc, item)
    cfg = from_dict(RunConfig, doc)
    cfg.validate()
    return cfg


def apply_override(doc: dict, item: str) -> None:
    """Apply one 'dotted.key=value' override in place; values parse as JSON
    with a plain-string fallback."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} collides with a scalar")
    node[parts[-1]] = value


def config_hash(cfg) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def save_effective_config(cfg, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"
    path.write_text(json.dumps({"schema_version": 1, "hash": config_hash(cfg), **to_dict(cfg)}, indent=2))
    return path
