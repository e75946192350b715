"""Run configuration and the flat ``key = value`` config file format.

Keys are dotted, namespaced by section (``relation.t_p``, ``train.seed``).
Unknown keys are rejected with a suggestion of the closest valid key.
"""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    use_pos_embed: bool = True


@dataclass
class AugConfig:
    global_size: int = 64
    local_size: int = 32
    n_local: int = 4
    global_scale_min: float = 0.35
    global_scale_max: float = 1.0
    local_scale_min: float = 0.05
    local_scale_max: float = 0.35
    min_aspect: float = 3 / 4
    max_aspect: float = 4 / 3
    flip_p: float = 0.5
    color_jitter: bool = True
    grayscale: bool = True
    blur: bool = True


@dataclass
class RelationConfig:
    t_p: float = 0.5
    t_c: float = 0.1
    heads: int = 6
    grid_global: int = 7
    grid_local: int = 4
    min_overlap: float = 0.01


@dataclass
class HeadConfig:
    image_hidden: int = 256
    image_bottleneck: int = 64
    prototypes: int = 1024
    asymmetric: bool = True


@dataclass
class LossConfig:
    enable_image: bool = True
    enable_pixel: bool = True
    enable_channel: bool = True
    weight_image: float = 1.0
    weight_pixel: float = 1.0
    weight_channel: float = 1.0
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9


@dataclass
class OptimConfig:
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.05
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_grad: float = 3.0
    momentum_start: float = 0.996
    momentum_end: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    precision: int = 32
    checkpoint_every: int = 5


@dataclass
class DataConfig:
    root: str = ""
    synthetic: bool = True
    classes: int = 8
    per_class_train: int = 256
    per_class_val: int = 64
    image_size: int = 64
    seed: int = 0


@dataclass
class EvalConfig:
    n_pairs: int = 64
    probe_epochs: int = 50
    probe_lr: float = 1e-3
    probe_batch: int = 64
    seed: int = 0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    relation: RelationConfig = field(default_factory=RelationConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    def get(self, key: str):
        sec, name = _split(key)
        return getattr(getattr(self, sec), name)

    def set(self, key: str, value) -> None:
        sec, name = _split(key)
        obj = getattr(self, sec)
        setattr(obj, name, _coerce(key, _field_type(obj, name), value))

    def copy(self) -> "TrainConfig":
        return dataclasses.replace(
            self, **{s.name: dataclasses.replace(getattr(self, s.name)) for s in fields(self)})

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())

    def digest(self) -> str:
        """SHA-256 of the canonical resolved configuration."""
        return hashlib.sha256(json.dumps(self.flat(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        m = self.model
        if m.image_size % m.patch_size:
            raise ConfigError("model.image_size must be divisible by model.patch_size")
        if m.embed_dim % m.heads:
            raise ConfigError("model.embed_dim must be divisible by model.heads")
        if m.embed_dim % self.relation.heads:
            raise ConfigError("model.embed_dim must be divisible by relation.heads")
        for key in ("aug.global_size", "aug.local_size"):
            if self.get(key) % m.patch_size:
                raise ConfigError(f"{key} must be divisible by model.patch_size")
        lo = self.losses
        if not (lo.enable_image or lo.enable_pixel or lo.enable_channel):
            raise ConfigError("at least one of losses.enable_image/pixel/channel must be true")
        if self.relation.t_p <= 0 or self.relation.t_c <= 0:
            raise ConfigError("relation temperatures must be positive")
        if self.train.precision not in (32, 64):
            raise ConfigError("train.precision must be 32 or 64")
        if self.aug.n_local < 0:
            raise ConfigError("aug.n_local must be >= 0")


def full_scale() -> TrainConfig:
    """Configuration at ViT-S/16 scale (not runnable on a CPU budget)."""
    cfg = TrainConfig()
    cfg.model = ModelConfig(image_size=224, patch_size=16, embed_dim=384, depth=12, heads=6)
    cfg.aug.global_size, cfg.aug.local_size = 224, 96
    cfg.relation.grid_global, cfg.relation.grid_local = 13, 6
    cfg.train.batch_size = 512
    cfg.optim.lr = 1e-3 * 256 / 512
    return cfg


def _split(key: str) -> tuple[str, str]:
    valid = TrainConfig().flat()
    if key not in valid:
        near = difflib.get_close_matches(key, list(valid), n=1, cutoff=0.0)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")
    sec, name = key.split(".", 1)
    return sec, name


def _field_type(obj, name: str):
    for f in fields(obj):
        if f.name == name:
            return f.type
    raise ConfigError(name)


def _coerce(key: str, typ, value):
    typ = typ if isinstance(typ, str) else typ.__name__
    if not isinstance(value, str):
        if typ == "float" and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    text = value.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key} (expected {typ})") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str, cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = cfg.copy() if cfg is not None else TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] = ()) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    cfg.validate()
    return cfg
