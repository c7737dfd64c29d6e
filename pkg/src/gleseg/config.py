"""Run configuration: dataclass defaults, YAML file, dotted-key overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    kind: str = "scaled_linear"


@dataclass
class GleSection:
    gamma: float = 5.0
    timestep: int = 1000


@dataclass
class ModelConfig:
    latent_channels: int = 16
    prompt_dim: int = 32
    native_channels: int = 4
    denoiser_widths: list = field(default_factory=lambda: [32, 64])
    temb_dim: int = 64
    lora_rank: int = 8
    lora_alpha: float | None = None
    lora_on_head_tail: bool = True
    lora_head_tail_rank: int | None = 16
    precondition: bool = True


@dataclass
class DataConfig:
    n: int = 640
    size: list = field(default_factory=lambda: [64, 64])


@dataclass
class PretrainConfig:
    seg_iters: int = 10000
    seg_lr: float = 2e-3
    seg_batch_size: int = 16
    seg_source: str = "stream"
    denoiser_iters: int = 3000
    denoiser_lr: float = 1e-3
    denoiser_batch_size: int = 32


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    unet_iters: int = 15000
    decoder_iters: int = 3000
    decoder_lr: float = 1e-4
    decoder_mode: str = "decoder_only"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    weight_decay: float = 0.01
    levels: list = field(default_factory=lambda: ["LQ1", "LQ2", "LQ3"])
    clear_fraction: float = 0.6
    n_points: int = 3
    ckpt_every: int = 500


@dataclass
class EvalConfig:
    split: str = "test"
    levels: list = field(default_factory=lambda: ["clear", "LQ1", "LQ2", "LQ3"])
    prompt_kind: str = "points"
    noise_scale: float = 0.2
    plot: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    run_dir: str = "runs/default"
    jobs: int = 1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    gle: GleSection = field(default_factory=GleSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _merge(obj, values: dict, prefix: str = ""):
    for key, val in values.items():
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key {prefix}{key}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise TypeError(f"{prefix}{key} must be a mapping")
            _merge(cur, val, f"{prefix}{key}.")
        else:
            setattr(obj, key, _coerce(cur, val, f"{prefix}{key}"))


def _coerce(cur, val, key):
    # YAML 1.1 reads "1e-3" as a string; follow the default's type
    if isinstance(val, str) and isinstance(cur, (int, float)) and not isinstance(cur, bool):
        try:
            return type(cur)(float(val)) if isinstance(cur, float) else int(val)
        except ValueError:
            raise TypeError(f"{key} expects a number, got {val!r}") from None
    if isinstance(cur, float) and isinstance(val, int) and not isinstance(val, bool):
        return float(val)
    return val


def from_dict(values: dict) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, values or {})
    return cfg


def parse_override(item: str) -> dict:
    """``"train.lr=1e-3"`` -> ``{"train": {"lr": 0.001}}``."""
    key, sep, raw = item.partition("=")
    if not sep:
        raise ValueError(f"override {item!r} is not key=value")
    val = yaml.safe_load(raw)
    for part in reversed(key.strip().split(".")):
        val = {part: val}
    return val


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the YAML file, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        _merge(cfg, yaml.safe_load(Path(path).read_text()) or {})
    for item in overrides:
        _merge(cfg, parse_override(item))
    return cfg
