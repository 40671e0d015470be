"""Flat key-value run configuration (YAML) covering every tunable default."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .dataset import FoldSpec
from .extractor import ConfigError, ExtractorConfig
from .heads import HeadConfig
from .synth import SynthConfig
from .train import Hyperparams


@dataclass
class RunConfig:
    # paths
    dataset_root: str = "data"
    output_dir: str = "runs/default"
    folds_path: str | None = None
    train_fraction: float = 0.75
    val_fraction: float = 0.125
    augment: bool = True
    # extractor
    patch_size: int = 36
    base_channels: int = 32
    stage1_channels: list[int] = field(default_factory=lambda: [32])
    stage2_channels: list[int] = field(default_factory=lambda: [32, 64])
    stage3_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    blocks: int = 2
    output_channels: int = 64
    variant: str = "scales"
    # heads
    head_hidden: list[int] = field(default_factory=lambda: [512, 128])
    # training / evaluation
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 24
    d_max: int = 64
    seed: int = 0
    fusion_mode: str = "both"
    negative_margin: int = 3
    negatives_per_positive: int = 1
    sweep_mode: str = "windowed"
    workers: int = 1
    # synthetic data
    synth_frames: int = 80
    synth_height: int = 96
    synth_width: int = 128
    synth_n_shapes: int = 3
    synth_max_disparity: int = 8
    synth_texture_density: float = 0.5
    synth_blur_sigma: float = 1.0
    synth_noise_std: float = 0.02
    synth_points_per_shape: int = 2
    synth_edge_band: int = 4
    synth_shape_scale: float = 1.0
    synth_seed: int = 0

    def extractor_config(self):
        return ExtractorConfig(input_channels=3, patch_size=self.patch_size, base_channels=self.base_channels,
                               stage_channels=[list(self.stage1_channels), list(self.stage2_channels),
                                               list(self.stage3_channels)],
                               blocks=self.blocks, output_channels=self.output_channels,
                               variant=self.variant).validate()

    def head_config(self):
        return HeadConfig(hidden=list(self.head_hidden))

    def hyperparams(self):
        return Hyperparams(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           d_max=self.d_max, seed=self.seed, fusion_mode=self.fusion_mode,
                           negative_margin=self.negative_margin,
                           negatives_per_positive=self.negatives_per_positive,
                           sweep_mode=self.sweep_mode).validate()

    def synth_config(self):
        return SynthConfig(height=self.synth_height, width=self.synth_width, n_shapes=self.synth_n_shapes,
                           max_disparity=self.synth_max_disparity, d_max=self.d_max,
                           texture_density=self.synth_texture_density, blur_sigma=self.synth_blur_sigma,
                           noise_std=self.synth_noise_std, points_per_shape=self.synth_points_per_shape,
                           edge_band=self.synth_edge_band, shape_scale=self.synth_shape_scale,
                           seed=self.synth_seed).validate()

    def default_fold(self, frame_ids):
        """Single fold over sorted frame ids, split by the configured fractions."""
        ids = sorted(frame_ids)
        n_train = int(round(self.train_fraction * len(ids)))
        n_val = int(round(self.val_fraction * len(ids)))
        return FoldSpec("0", ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])

    def to_dict(self):
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, value):
    default = getattr(RunConfig(), key)
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"config key {key!r}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r}: expected a list, got {value!r}")
        return [int(v) for v in value]
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot convert {value!r} to {type(default).__name__}") from None


def resolve(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def load_config(path=None, overrides=None) -> RunConfig:
    """Reads ``path`` (if given) and applies ``overrides``; overrides win."""
    values = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat mapping of keys to values")
        values.update(data)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return resolve(values)


def write_config(path, config: RunConfig):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
