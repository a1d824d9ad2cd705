"""Configuration dataclasses and JSON round-tripping.

Every tunable default lives here as a dataclass field, so a JSON config file
only has to mention the keys it overrides::

    {"model": {"num_queries": 20}, "ensemble": {"alpha_b": 0.5}}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class PseudoStereoConfig:
    d_min: float = 5.0
    d_max: float = 15.0
    sobel_threshold: float = 1.0
    fill_mode: str = "temporal_donor"  # or "blank_with_mask"

    def __post_init__(self):
        if not 0 < self.d_min <= self.d_max:
            raise ValueError(f"need 0 < d_min <= d_max, got {self.d_min}, {self.d_max}")
        if self.fill_mode not in ("temporal_donor", "blank_with_mask"):
            raise ValueError(f"unknown fill_mode {self.fill_mode!r}")

    @property
    def d_mean(self) -> float:
        return 0.5 * (self.d_min + self.d_max)


@dataclass
class ModelConfig:
    num_queries: int = 20
    num_classes: int = 4
    embed_dim: int = 64
    decoder_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 128
    encoder_channels: tuple = (32, 48, 64)
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0
    no_object_weight: float = 0.1
    use_dfp: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if min(self.lambda_bce, self.lambda_dice, self.lambda_cls) < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def stride(self) -> int:
        return 4


@dataclass
class SetClassifierConfig:
    num_layers: int = 3
    num_heads: int = 4
    token_dim: int = 64
    temperature: float = 0.1
    mask_non_objects: bool = False

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class TrackletSamplerConfig:
    num_tracklets: int = 32
    lengths: tuple = (2, 4, 8)
    mix_cap: float = 0.5
    max_dt: int = 4

    def __post_init__(self):
        self.lengths = tuple(self.lengths)
        if not 0.0 <= self.mix_cap <= 0.5:
            raise ValueError("mix_cap must lie in [0, 0.5]")


@dataclass
class PatchSpec:
    size: int = 64
    expansion: float = 1.2
    fill: str = "zeros"  # or "mean"

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("patch size must be >= 16")
        if self.expansion < 1.0:
            raise ValueError("expansion must be >= 1.0")
        if self.fill not in ("zeros", "mean"):
            raise ValueError(f"unknown fill {self.fill!r}")


@dataclass
class LAClsConfig:
    patch: PatchSpec = field(default_factory=PatchSpec)
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    mask_threshold: float = 0.5
    finetune_on_predictions: bool = False


@dataclass
class EnsembleConfig:
    alpha_b: float = 1.0 / 3.0
    alpha_s: float = 1.0 / 3.0
    alpha_a: float = 1.0 / 3.0

    def __post_init__(self):
        a = (self.alpha_b, self.alpha_s, self.alpha_a)
        if min(a) < 0 or sum(a) <= 0:
            raise ValueError(f"ensemble weights must be >= 0 with positive sum, got {a}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.05
    poly_power: float = 0.9
    grad_clip: float = 1.0
    seed: int = 0
    use_stscls: bool = True
    query_alignment: bool = True
    use_ida: bool = True
    align_rollout: int = 4  # max gradient-free alignment hops before the trained pair
    log_every: int = 100


@dataclass
class InferConfig:
    clip_length: int = 8
    center: int | None = None  # 1-based position of t* in the clip; None = T // 2
    top_k: int = 5
    memory_capacity: int = 64
    query_alignment: bool = True


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)  # (height, width)
    num_classes: int = 4
    class_frequencies: tuple = (0.4, 0.3, 0.2, 0.1)
    objects_per_clip: tuple = (1, 3)
    radius_range: tuple = (7.0, 12.0)
    velocity_cap: float = 1.5
    depth_range: tuple = (1.0, 2.0)
    background_depth: float = 4.0
    baseline_focal: float = 8.0
    clip_length: int = 8
    noise_std: float = 0.0
    integer_disparity: bool = False
    stereo: bool = True
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.class_frequencies = tuple(self.class_frequencies)
        self.objects_per_clip = tuple(self.objects_per_clip)
        self.radius_range = tuple(self.radius_range)
        self.depth_range = tuple(self.depth_range)
        if len(self.class_frequencies) != self.num_classes:
            raise ValueError("class_frequencies must have num_classes entries")
        if self.velocity_cap >= self.image_size[1] / self.clip_length:
            raise ValueError("velocity cap must be below width / clip length")
        if min(self.depth_range) <= 0 or self.background_depth <= 0:
            raise ValueError("depths must be positive")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    stscls: SetClassifierConfig = field(default_factory=SetClassifierConfig)
    sampler: TrackletSamplerConfig = field(default_factory=TrackletSamplerConfig)
    lacls: LAClsConfig = field(default_factory=LAClsConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    pseudo_stereo: PseudoStereoConfig = field(default_factory=PseudoStereoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _build(cls, data)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, data: dict | None):
    """Instantiate a (possibly nested) dataclass from a partial dict."""
    data = dict(data or {})
    kwargs: dict[str, Any] = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(hints)
    if unknown:
        raise KeyError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    for name, f in hints.items():
        if name not in data:
            continue
        value = data[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value)
        kwargs[name] = value
    return cls(**kwargs)


def replace(cfg, **changes):
    """``dataclasses.replace`` that also accepts ``section__key`` for nested fields."""
    flat = {k: v for k, v in changes.items() if "__" not in k}
    nested: dict[str, dict] = {}
    for k, v in changes.items():
        if "__" in k:
            head, tail = k.split("__", 1)
            nested.setdefault(head, {})[tail] = v
    for head, sub in nested.items():
        flat[head] = replace(getattr(cfg, head), **sub)
    return dataclasses.replace(cfg, **flat)
