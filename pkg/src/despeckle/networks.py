"""Despeckling residual generator and strided-conv discriminator."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import tensorcore as tc
from .tensorcore import BatchNormState, DimensionError, NumericError, Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    stem_kernel: int = 7
    channels: int = 64
    n_resblocks: int = 6
    convs_per_block: int = 3
    block_kernel: int = 3
    out_channels: int = 1
    shortcut: str = "scalar"  # "scalar" (learnable weight, init 1) or "conv1x1"
    final_init_gain: float = 0.01  # scales the He init of the output conv


    def __post_init__(self):
        if self.n_resblocks < 1:
            raise ValueError("n_resblocks must be >= 1")
        if self.channels < 1 or self.convs_per_block < 1 or self.out_channels < 1:
            raise ValueError("channels, convs_per_block and out_channels must be >= 1")
        if self.stem_kernel % 2 == 0 or self.block_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.shortcut not in ("scalar", "conv1x1"):
            raise ValueError(f"unknown shortcut {self.shortcut!r}")
        if not self.final_init_gain > 0:
            raise ValueError("final_init_gain must be positive")


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 32
    n_stages: int = 3
    kernel: int = 3
    leaky_alpha: float = 0.2
    zero_init_head: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.n_stages < 1:
            raise ValueError("base_channels and n_stages must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage


Config = Union[GeneratorConfig, DiscriminatorConfig]


@dataclass
class ModelParams:
    """Named parameter tensors (construction order) plus batch-norm running statistics."""

    config: Config
    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "generator" if isinstance(self.config, GeneratorConfig) else "discriminator"

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t._tracked = flag

    def grads(self, computed: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: computed[t] for name, t in self.params.items() if t in computed}

    def clone(self) -> "ModelParams":
        out = ModelParams(self.config)
        for name, t in self.params.items():
            out.params[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name,
                                      dtype=t.data.dtype)
        out.bn = {k: BatchNormState(s.mean.copy(), s.var.copy()) for k, s in self.bn.items()}
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        for name, s in self.bn.items():
            h.update(name.encode())
            h.update(s.mean.tobytes())
            h.update(s.var.tobytes())
        return h.hexdigest()

    def config_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.config)}


def config_from_dict(d: dict) -> Config:
    d = dict(d)
    kind = d.pop("kind")
    return GeneratorConfig(**d) if kind == "generator" else DiscriminatorConfig(**d)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _add_conv(mp: ModelParams, rng, name: str, cin: int, cout: int, k: int) -> None:
    mp.params[f"{name}.w"] = Tensor(_he(rng, (cout, cin, k, k), cin * k * k), True, f"{name}.w")
    mp.params[f"{name}.b"] = Tensor(np.zeros(cout), True, f"{name}.b")


def _add_bn(mp: ModelParams, name: str, c: int) -> None:
    mp.params[f"{name}.gamma"] = Tensor(np.ones(c), True, f"{name}.gamma")
    mp.params[f"{name}.beta"] = Tensor(np.zeros(c), True, f"{name}.beta")
    mp.bn[name] = BatchNormState.fresh(c)


def build_generator(config: GeneratorConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    c = config.channels
    mp = ModelParams(config)
    _add_conv(mp, rng, "stem.conv", 1, c, config.stem_kernel)
    _add_bn(mp, "stem.bn", c)
    for b in range(config.n_resblocks):
        for j in range(config.convs_per_block):
            _add_conv(mp, rng, f"block{b}.conv{j}", c, c, config.block_kernel)
            _add_bn(mp, f"block{b}.bn{j}", c)
        if config.shortcut == "scalar":
            mp.params[f"block{b}.shortcut"] = Tensor(np.ones(1), True, f"block{b}.shortcut")
        else:
            w = np.zeros((c, c, 1, 1))
            w[np.arange(c), np.arange(c)] = 1.0
            mp.params[f"block{b}.shortcut.w"] = Tensor(w, True, f"block{b}.shortcut.w")
            mp.params[f"block{b}.shortcut.b"] = Tensor(np.zeros(c), True, f"block{b}.shortcut.b")
    _add_conv(mp, rng, "final.conv", c, config.out_channels, config.block_kernel)
    # a near-silent output layer starts pretraining close to a constant map
    mp.params["final.conv.w"].data *= config.final_init_gain
    return mp


def _layer(name: str, fn, *args, **kwargs) -> Tensor:
    try:
        return fn(*args, **kwargs)
    except NumericError as exc:
        raise NumericError(f"layer {name}: {exc}") from exc


def _conv_bn_relu(mp: ModelParams, conv: str, bn: str, h: Tensor, mode: str) -> Tensor:
    p = mp.params
    h = _layer(conv, tc.conv2d, h, p[f"{conv}.w"], p[f"{conv}.b"], 1, "same")
    h = _layer(bn, tc.batch_norm, h, p[f"{bn}.gamma"], p[f"{bn}.beta"], mp.bn[bn], mode)
    return tc.relu(h)


def generator_forward(params: ModelParams, batch: Tensor, mode: str = "train") -> Tensor:
    """Despeckle a [N,1,H,W] batch; ``infer`` uses running statistics and clamps to [0, 1]."""
    cfg = params.config
    if not isinstance(cfg, GeneratorConfig):
        raise TypeError("generator_forward needs generator parameters")
    if batch.data.ndim != 4 or batch.shape[1] != 1:
        raise DimensionError(f"generator expects [N,1,H,W], got {batch.shape}")
    if min(batch.shape[2:]) < cfg.stem_kernel:
        raise DimensionError(f"spatial size {batch.shape[2:]} smaller than stem kernel {cfg.stem_kernel}")
    if batch.data.min() < 0 or batch.data.max() > 1:
        raise ValueError("generator inputs must lie in [0, 1]")
    p = params.params
    h = _conv_bn_relu(params, "stem.conv", "stem.bn", batch, mode)
    for b in range(cfg.n_resblocks):
        branch = h
        for j in range(cfg.convs_per_block):
            branch = _conv_bn_relu(params, f"block{b}.conv{j}", f"block{b}.bn{j}", branch, mode)
        if cfg.shortcut == "scalar":
            skip = tc.mul(h, p[f"block{b}.shortcut"])
        else:
            skip = tc.conv2d(h, p[f"block{b}.shortcut.w"], p[f"block{b}.shortcut.b"], 1, "same")
        h = _layer(f"block{b}", lambda: tc.relu(tc.add(skip, branch)))
    out = _layer("final.conv", tc.conv2d, h, p["final.conv.w"], p["final.conv.b"], 1, "same")
    if mode == "infer":
        out = tc.clip(out, 0.0, 1.0)
    return out


def build_discriminator(config: DiscriminatorConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    mp = ModelParams(config)
    cin = 1
    k = config.kernel
    for s in range(config.n_stages):
        width = config.stage_channels(s)
        _add_conv(mp, rng, f"stage{s}.conv1", cin, width, k)
        _add_conv(mp, rng, f"stage{s}.conv2", width, 2 * width, k)
        cin = 2 * width
    if config.zero_init_head:
        w = np.zeros((1, cin))
    else:
        w = rng.normal(0.0, math.sqrt(1.0 / cin), size=(1, cin))
    mp.params["head.w"] = Tensor(w, True, "head.w")
    mp.params["head.b"] = Tensor(np.zeros(1), True, "head.b")
    return mp


def discriminator_forward(params: ModelParams, batch: Tensor, mode: str = "train") -> Tensor:
    """Probability that each [1,H,W] sample is a high-quality image; returns shape [N].

    ``mode`` is accepted for symmetry with the generator; the discriminator has
    no mode-dependent layers.
    """
    cfg = params.config
    if not isinstance(cfg, DiscriminatorConfig):
        raise TypeError("discriminator_forward needs discriminator parameters")
    if batch.data.ndim != 4 or batch.shape[1] != 1:
        raise DimensionError(f"discriminator expects [N,1,H,W], got {batch.shape}")
    if min(batch.shape[2:]) < 2 ** cfg.n_stages:
        raise DimensionError(
            f"spatial size {batch.shape[2:]} too small for {cfg.n_stages} stride-2 stages")
    p = params.params
    h = batch
    for s in range(cfg.n_stages):
        for name, stride in ((f"stage{s}.conv1", 1), (f"stage{s}.conv2", 2)):
            h = _layer(name, tc.conv2d, h, p[f"{name}.w"], p[f"{name}.b"], stride, "same")
            h = tc.leaky_relu(h, cfg.leaky_alpha)
    pooled = tc.global_avg_pool(h)
    logits = _layer("head", tc.linear, pooled, p["head.w"], p["head.b"])
    return tc.reshape(tc.sigmoid(logits), (batch.shape[0],))


def generator_parameter_tally(config: GeneratorConfig) -> int:
    """Closed-form parameter count, used to cross-check :func:`build_generator`."""
    c = config.channels

    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    total = conv(config.stem_kernel, 1, c) + 2 * c
    per_block = config.convs_per_block * (conv(config.block_kernel, c, c) + 2 * c)
    per_block += 1 if config.shortcut == "scalar" else conv(1, c, c)
    total += config.n_resblocks * per_block
    total += conv(config.block_kernel, c, config.out_channels)
    return total
