"""Reconstruction, adversarial and structural losses for the despeckling GAN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensorcore as tc
from .tensorcore import ContractError, DimensionError, Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class MsSsimConfig:
    M: int = 3
    sigmas: tuple[float, ...] = (0.5, 1.0, 2.0)
    C1: float = 0.01
    C2: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if len(self.sigmas) != self.M:
            raise ValueError(f"expected {self.M} sigmas, got {len(self.sigmas)}")
        if any(s <= 0 for s in self.sigmas) or any(
                b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigmas must be positive and strictly increasing")
        if self.C1 <= 0 or self.C2 <= 0:
            raise ValueError("C1 and C2 must be positive")

    def min_size(self) -> int:
        return 2 * math.ceil(3 * max(self.sigmas)) + 1


@dataclass(frozen=True)
class GanLossConfig:
    lam: float = 0.5
    ms_ssim: MsSsimConfig = field(default_factory=MsSsimConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class GeneratorLoss:
    total: Tensor
    adversarial: float
    l1: float
    ms_ssim: float


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def l1_loss(output: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over batch and pixels."""
    _same_shape(output, target, "l1_loss")
    return tc.mean(tc.abs(tc.sub(output, target)))


def _nonempty(t: Tensor, what: str) -> None:
    if t.size == 0:
        raise ContractError(f"{what}: empty batch")


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Binary cross-entropy with targets 1 for real and 0 for generated samples."""
    _nonempty(d_real, "discriminator_loss")
    _nonempty(d_fake, "discriminator_loss")
    real = tc.clip(d_real, PROB_EPS, 1 - PROB_EPS)
    fake = tc.clip(d_fake, PROB_EPS, 1 - PROB_EPS)
    return tc.add(tc.mean(tc.neg(tc.log(real))), tc.mean(tc.neg(tc.log(tc.sub(1.0, fake)))))


def adversarial_term(d_fake: Tensor) -> Tensor:
    """Non-saturating generator objective, mean of -log D(G(x))."""
    _nonempty(d_fake, "adversarial_term")
    return tc.mean(tc.neg(tc.log(tc.clip(d_fake, PROB_EPS, 1 - PROB_EPS))))


def ms_ssim_index(output: Tensor, target: Tensor, cfg: MsSsimConfig = MsSsimConfig()) -> Tensor:
    """Per-image luminance(scale M) times the product of contrast-structure terms, shape [N].

    All scales work at full resolution and differ only in the Gaussian window
    width. Each map is averaged spatially before the terms are multiplied.
    """
    _same_shape(output, target, "ms_ssim")
    if output.data.ndim != 4:
        raise DimensionError(f"ms_ssim expects NCHW, got {output.shape}")
    if min(output.shape[2:]) < cfg.min_size():
        raise DimensionError(
            f"image {output.shape[2:]} too small for Gaussian window of size {cfg.min_size()}")
    x, xh = target, output
    xx, hh, xh_ = tc.mul(x, x), tc.mul(xh, xh), tc.mul(x, xh)
    value = None
    for j, sigma in enumerate(cfg.sigmas):
        mu_x = tc.gaussian_blur(x, sigma)
        mu_h = tc.gaussian_blur(xh, sigma)
        mu_xh = tc.mul(mu_x, mu_h)
        var_x = tc.sub(tc.gaussian_blur(xx, sigma), tc.mul(mu_x, mu_x))
        var_h = tc.sub(tc.gaussian_blur(hh, sigma), tc.mul(mu_h, mu_h))
        cov = tc.sub(tc.gaussian_blur(xh_, sigma), mu_xh)
        cs_map = tc.div(tc.add(tc.mul(cov, 2.0), cfg.C2), tc.add(tc.add(var_x, var_h), cfg.C2))
        cs = tc.mean_axes(cs_map, (1, 2, 3))
        value = cs if value is None else tc.mul(value, cs)
        if j == cfg.M - 1:
            lum_map = tc.div(tc.add(tc.mul(mu_xh, 2.0), cfg.C1),
                             tc.add(tc.add(tc.mul(mu_x, mu_x), tc.mul(mu_h, mu_h)), cfg.C1))
            value = tc.mul(value, tc.mean_axes(lum_map, (1, 2, 3)))
    return value


def ms_ssim_loss(output: Tensor, target: Tensor, cfg: MsSsimConfig = MsSsimConfig()) -> Tensor:
    return tc.sub(1.0, tc.mean(ms_ssim_index(output, target, cfg)))


def generator_total_loss(d_fake: Tensor, output: Tensor, target: Tensor,
                         cfg: GanLossConfig = GanLossConfig()) -> GeneratorLoss:
    """Adversarial term plus ``lam`` times (l1 + MS-SSIM), with the parts broken out."""
    adv = adversarial_term(d_fake)
    l1 = l1_loss(output, target)
    mss = ms_ssim_loss(output, target, cfg.ms_ssim)
    total = tc.add(adv, tc.mul(tc.add(l1, mss), cfg.lam))
    return GeneratorLoss(total, adv.item(), l1.item(), mss.item())
