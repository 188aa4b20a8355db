"""Training configuration, the paper and desk-scale presets, and their JSON form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .losses import GanLossConfig, MsSsimConfig
from .networks import DiscriminatorConfig, GeneratorConfig


class ConfigError(ValueError):
    pass


def _positive(name: str, value) -> None:
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class GPretrainConfig:
    epochs: int = 100
    crop: int = 192
    lr: float = 1e-4
    batch: int = 16
    samples_per_epoch: int = 12000

    def __post_init__(self):
        _positive("pretrain_g.lr", self.lr)
        for f in ("crop", "batch", "samples_per_epoch"):
            _positive(f"pretrain_g.{f}", getattr(self, f))
        if self.epochs < 0:
            raise ConfigError("pretrain_g.epochs must be >= 0")


@dataclass(frozen=True)
class DPretrainConfig:
    epochs: int = 5
    crop: int = 128
    lr: float = 1e-6
    batch: int = 80

    def __post_init__(self):
        _positive("pretrain_d.lr", self.lr)
        _positive("pretrain_d.crop", self.crop)
        if self.batch < 2 or self.batch % 2:
            raise ConfigError("pretrain_d.batch must be even and >= 2 (balanced classes)")
        if self.epochs < 0:
            raise ConfigError("pretrain_d.epochs must be >= 0")


@dataclass(frozen=True)
class GanConfig:
    iterations: int = 500
    g_steps_per_iter: int = 20
    d_steps_per_iter: int = 1
    d_lr: float = 1e-6
    g_lr: float = 1e-7
    g_batch: int = 8
    d_batch: int = 40
    g_crop: int = 192
    d_crop: int = 128
    buffer_capacity: int = 200
    checkpoint_every: int = 50

    def __post_init__(self):
        _positive("gan.d_lr", self.d_lr)
        _positive("gan.g_lr", self.g_lr)
        for f in ("g_steps_per_iter", "d_steps_per_iter", "g_batch", "g_crop", "d_crop",
                  "buffer_capacity", "checkpoint_every"):
            _positive(f"gan.{f}", getattr(self, f))
        if self.d_batch < 4 or self.d_batch % 4:
            raise ConfigError("gan.d_batch must be a positive multiple of 4")
        if self.iterations < 0:
            raise ConfigError("gan.iterations must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    pretrain_g: GPretrainConfig = field(default_factory=GPretrainConfig)
    pretrain_d: DPretrainConfig = field(default_factory=DPretrainConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    loss: GanLossConfig = field(default_factory=GanLossConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"]["ms_ssim"]["sigmas"] = list(self.loss.ms_ssim.sigmas)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        _reject_unknown(cls, d, "")
        kwargs = {}
        nested = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig,
                  "pretrain_g": GPretrainConfig, "pretrain_d": DPretrainConfig, "gan": GanConfig}
        for key, sub in nested.items():
            if key in d:
                kwargs[key] = _build(sub, d[key], key)
        if "loss" in d:
            loss = dict(d["loss"])
            _reject_unknown(GanLossConfig, loss, "loss.")
            ms = _build(MsSsimConfig, loss.pop("ms_ssim", {}), "loss.ms_ssim")
            kwargs["loss"] = _wrap(lambda: GanLossConfig(ms_ssim=ms, **loss))
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        return cls(**kwargs)


def _reject_unknown(cls, d: dict, prefix: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def _wrap(make):
    try:
        return make()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _build(cls, d: dict, prefix: str):
    _reject_unknown(cls, d, prefix + ".")
    d = dict(d)
    if "sigmas" in d:
        d["sigmas"] = tuple(d["sigmas"])
    return _wrap(lambda: cls(**d))


def paper_preset(seed: int = 0) -> TrainConfig:
    """Settings as published (full-size networks, 192/128 crops, 500 GAN iterations)."""
    return TrainConfig(seed=seed)


def desk_preset(seed: int = 0) -> TrainConfig:
    """Single-CPU reproduction: width-16 generator, 64x64 crops, shortened schedule.

    Learning rates are raised because the iteration budget is one to two orders
    of magnitude below the published one. D pretraining gets only 18 steps, so
    the discriminator enters the adversarial phase with small margins.
    """
    return TrainConfig(
        seed=seed,
        generator=GeneratorConfig(channels=16),
        discriminator=DiscriminatorConfig(base_channels=8),
        pretrain_g=GPretrainConfig(epochs=10, crop=64, lr=3e-3, batch=16, samples_per_epoch=320),
        pretrain_d=DPretrainConfig(epochs=2, crop=64, lr=1e-3, batch=80),
        gan=GanConfig(iterations=100, d_lr=5e-3, g_lr=2e-4, g_batch=8, d_batch=40,
                      g_crop=64, d_crop=64, buffer_capacity=200, checkpoint_every=50),
    )


PRESETS = {"paper": paper_preset, "desk": desk_preset}
