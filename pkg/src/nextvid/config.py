"""Configuration dataclasses, presets and YAML (de)serialization."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ClipShape:
    T_raw: int = 16
    H: int = 32
    W: int = 32
    C: int = 3
    patch_h: int = 4
    patch_w: int = 4
    tubelet_size: int = 2

    def __post_init__(self):
        for name in ("T_raw", "H", "W", "C", "patch_h", "patch_w", "tubelet_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.H % self.patch_h or self.W % self.patch_w:
            raise ConfigError(f"patch {self.patch_h}x{self.patch_w} does not tile {self.H}x{self.W}")
        if self.T_raw % self.tubelet_size:
            raise ConfigError(f"T_raw={self.T_raw} is not a multiple of tubelet_size={self.tubelet_size}")
        if self.T < 2:
            raise ConfigError("need at least two time steps for next-frame prediction")

    @property
    def T(self) -> int:
        return self.T_raw // self.tubelet_size

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.patch_h, self.W // self.patch_w

    @property
    def N_s(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def token_dim_raw(self) -> int:
        return self.patch_h * self.patch_w * self.tubelet_size * self.C

    def with_frames(self, T_raw: int) -> "ClipShape":
        return dataclasses.replace(self, T_raw=T_raw)


@dataclass(frozen=True)
class MaskConfig:
    spatial_scale: tuple[float, float] = (0.15, 0.7)
    aspect_ratio: tuple[float, float] = (0.75, 1.5)
    num_blocks: int = 8
    # area fraction of each individual block before the union is taken
    block_scale: tuple[float, float] = (0.03, 0.06)
    samples_per_clip: int = 1

    def __post_init__(self):
        lo, hi = self.spatial_scale
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"spatial_scale must satisfy 0 <= lo <= hi <= 1, got {self.spatial_scale}")
        alo, ahi = self.aspect_ratio
        if not (0.0 < alo <= ahi):
            raise ConfigError(f"aspect_ratio bounds must be positive and ordered, got {self.aspect_ratio}")
        blo, bhi = self.block_scale
        if not (0.0 <= blo <= bhi <= 1.0):
            raise ConfigError(f"block_scale must satisfy 0 <= lo <= hi <= 1, got {self.block_scale}")
        if self.num_blocks < 0 or self.samples_per_clip < 1:
            raise ConfigError("num_blocks must be >= 0 and samples_per_clip >= 1")


def default_mask_strategies() -> tuple[MaskConfig, ...]:
    """Two concurrent strategies: many small blocks and a couple of large ones."""
    return (
        MaskConfig(num_blocks=8, block_scale=(0.03, 0.06)),
        MaskConfig(num_blocks=2, block_scale=(0.2, 0.35)),
    )


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    rope_base: float = 10000.0

    def __post_init__(self):
        _check_width(self.width, self.heads)


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 3
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    rope_base: float = 10000.0

    def __post_init__(self):
        _check_width(self.width, self.heads)


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 3
    width: int = 128  # at least the pixel token dim (4x4x2x3 = 96) so x_tau passes through
    heads: int = 4
    mlp_ratio: float = 4.0
    time_freq_dim: int = 64
    rope_base: float = 10000.0

    def __post_init__(self):
        _check_width(self.width, self.heads)


def _check_width(width: int, heads: int) -> None:
    if width <= 0 or heads <= 0 or width % heads:
        raise ConfigError(f"width {width} must be a positive multiple of heads {heads}")


@dataclass(frozen=True)
class LossWeights:
    w_flow: float = 0.5
    w_align: float = 1.0

    def __post_init__(self):
        if self.w_flow < 0 or self.w_align < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.w_flow == 0 and self.w_align == 0:
            raise ConfigError("loss weights must not both be zero")

    @property
    def beta(self) -> float:
        return math.inf if self.w_flow == 0 else self.w_align / self.w_flow


@dataclass(frozen=True)
class StageSpec:
    name: str
    steps: int
    start_lr: float
    final_lr: float
    flow_lr: Optional[float] = None
    k_tau: int = 1
    frames: int = 16
    batch_size: int = 16

    def __post_init__(self):
        if self.name not in ("warmup", "stable1", "stable2", "cooldown", "constant"):
            raise ConfigError(f"unknown stage name {self.name!r}")
        if self.steps < 0:
            raise ConfigError("stage steps must be >= 0")
        if self.start_lr <= 0 or self.final_lr <= 0 or (self.flow_lr is not None and self.flow_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if self.k_tau < 1 or self.batch_size < 1:
            raise ConfigError("k_tau and batch_size must be >= 1")

    def lr_at(self, step_in_stage: int) -> float:
        """Linear interpolation from start_lr to final_lr across the stage."""
        if self.steps <= 1 or self.start_lr == self.final_lr:
            return self.start_lr
        frac = step_in_stage / self.steps
        return (1.0 - frac) * self.start_lr + frac * self.final_lr  # exact at both endpoints


def paper_schedule() -> tuple[StageSpec, ...]:
    return (
        StageSpec("warmup", 12_000, 1e-4, 5e-4, None, 4, 16, 3072),
        StageSpec("stable1", 28_000, 5e-4, 4.5e-4, None, 4, 16, 3072),
        StageSpec("stable2", 80_000, 4.5e-4, 1e-4, 8e-4, 1, 16, 3072),
        StageSpec("cooldown", 12_000, 1e-4, 1e-6, 3e-4, 1, 64, 768),
    )


def desk_schedule(batch_size: int = 16) -> tuple[StageSpec, ...]:
    return (
        StageSpec("warmup", 200, 1e-4, 5e-4, None, 4, 16, batch_size),
        StageSpec("stable1", 400, 5e-4, 4.5e-4, None, 4, 16, batch_size),
        StageSpec("stable2", 800, 4.5e-4, 1e-4, 8e-4, 1, 16, batch_size),
        StageSpec("cooldown", 200, 1e-4, 1e-6, 3e-4, 1, 32, batch_size),
    )


PAPER_EMA = 0.99925
DESK_EMA = 0.996


@dataclass(frozen=True)
class TrainConfig:
    ema: float = DESK_EMA
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.04
    image_prob: float = 0.25
    use_mask: bool = True
    target: str = "pixel"
    ktau_override: Optional[int] = None
    tau_mode: str = "uniform"
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.ema <= 1.0:
            raise ConfigError("ema decay must lie in [0, 1]")
        if self.target not in ("pixel", "latent"):
            raise ConfigError(f"unknown target {self.target!r}")
        if self.tau_mode not in ("uniform", "grid"):
            raise ConfigError(f"unknown tau_mode {self.tau_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2048
    n_val: int = 512


@dataclass(frozen=True)
class ProbeConfig:
    heads: int = 4
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    last_k_layers: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    shape: ClipShape = field(default_factory=ClipShape)
    masks: tuple[MaskConfig, ...] = field(default_factory=default_mask_strategies)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: tuple[StageSpec, ...] = field(default_factory=desk_schedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_plain(cls, data, "config")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        preset = data.pop("preset", None)
        base = get_preset(preset).to_dict() if preset else RunConfig().to_dict()
        return cls.from_dict(_deep_merge(base, data))


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    "shape": ClipShape,
    "masks": (MaskConfig,),
    "encoder": EncoderConfig,
    "predictor": PredictorConfig,
    "decoder": DecoderConfig,
    "loss": LossWeights,
    "schedule": (StageSpec,),
    "train": TrainConfig,
    "corpus": CorpusConfig,
    "probe": ProbeConfig,
}


def _from_plain(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is RunConfig else None
        if isinstance(sub, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list")
            kwargs[key] = tuple(_from_plain(sub[0], v, f"{where}.{key}[{i}]") for i, v in enumerate(value))
        elif sub is not None:
            kwargs[key] = _from_plain(sub, value, f"{where}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def paper_encoder(size: str) -> EncoderConfig:
    table = {
        "vitl": EncoderConfig(depth=24, width=1024, heads=16, mlp_ratio=4.0),
        "vith": EncoderConfig(depth=32, width=1280, heads=16, mlp_ratio=4.0),
        "vitg": EncoderConfig(depth=40, width=1408, heads=22, mlp_ratio=4.36),
    }
    return table[size]


def get_preset(name: str) -> RunConfig:
    if name in (None, "desk-default"):
        return RunConfig()
    if name.startswith("paper-"):
        size = name.split("-", 1)[1]
        if size not in ("vitl", "vith", "vitg"):
            raise ConfigError(f"unknown preset {name!r}")
        return RunConfig(
            shape=ClipShape(T_raw=16, H=256, W=256, C=3, patch_h=16, patch_w=16, tubelet_size=2),
            encoder=paper_encoder(size),
            predictor=PredictorConfig(depth=12, width=384, heads=12),
            decoder=DecoderConfig(depth=12, width=384, heads=12, time_freq_dim=256),
            schedule=paper_schedule(),
            train=TrainConfig(ema=PAPER_EMA),
            probe=ProbeConfig(heads=16),
        )
    if name == "desk-small":
        return small_preset()
    raise ConfigError(f"unknown preset {name!r}")


def small_preset(steps: int = 600, seed: int = 0) -> RunConfig:
    """Reduced geometry used by the acceptance runs: 8 raw frames of 16x16."""
    per = max(steps // 4, 1)
    sched = (
        StageSpec("warmup", per, 1e-4, 1e-3, None, 4, 8, 16),
        StageSpec("stable1", per, 1e-3, 8e-4, None, 4, 8, 16),
        StageSpec("stable2", per, 8e-4, 2e-4, 1e-3, 1, 8, 16),
        StageSpec("cooldown", steps - 3 * per, 2e-4, 1e-5, 3e-4, 1, 8, 16),
    )
    return RunConfig(
        seed=seed,
        shape=ClipShape(T_raw=8, H=16, W=16, C=3, patch_h=4, patch_w=4, tubelet_size=2),
        encoder=EncoderConfig(depth=3, width=64, heads=4),
        predictor=PredictorConfig(depth=2, width=64, heads=4),
        decoder=DecoderConfig(depth=2, width=128, heads=4),
        schedule=sched,
        train=TrainConfig(ema=0.99),
        corpus=CorpusConfig(n_train=512, n_val=256),
    )
