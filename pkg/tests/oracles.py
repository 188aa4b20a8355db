"""Scalar-loop reference implementations of the losses, independent of the tape code."""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-7


def l1(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        total += abs(float(u) - float(v))
    return total / a.size


def _clamp(p: float) -> float:
    return min(max(float(p), EPS), 1 - EPS)


def bce(d_real, d_fake) -> float:
    real = sum(-math.log(_clamp(p)) for p in d_real) / len(d_real)
    fake = sum(-math.log(1 - _clamp(p)) for p in d_fake) / len(d_fake)
    return real + fake


def adversarial(d_fake) -> float:
    return sum(-math.log(_clamp(p)) for p in d_fake) / len(d_fake)


def _window(sigma: float) -> np.ndarray:
    r = math.ceil(3 * sigma)
    taps = [math.exp(-0.5 * (k / sigma) ** 2) for k in range(-r, r + 1)]
    s = sum(taps)
    taps = [t / s for t in taps]
    return np.outer(taps, taps)


def _local_stats(x: np.ndarray, y: np.ndarray, sigma: float):
    w = _window(sigma)
    r = w.shape[0] // 2
    xp = np.pad(x, r, mode="symmetric")
    yp = np.pad(y, r, mode="symmetric")
    h, wd = x.shape
    stats = np.zeros((5, h, wd))
    for i in range(h):
        for j in range(wd):
            px = xp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            py = yp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            mx = float(np.sum(w * px))
            my = float(np.sum(w * py))
            stats[:, i, j] = (mx, my, float(np.sum(w * px * px)) - mx * mx,
                              float(np.sum(w * py * py)) - my * my,
                              float(np.sum(w * px * py)) - mx * my)
    return stats


def ms_ssim(out: np.ndarray, target: np.ndarray, sigmas=(0.5, 1.0, 2.0), c1=0.01, c2=0.01) -> float:
    """Index for one 2-D image pair: lum(scale M) times the product of per-scale mean cs."""
    value = 1.0
    for j, sigma in enumerate(sigmas):
        mx, my, vx, vy, cov = _local_stats(target.astype(np.float64), out.astype(np.float64), sigma)
        value *= float(np.mean((2 * cov + c2) / (vx + vy + c2)))
        if j == len(sigmas) - 1:
            value *= float(np.mean((2 * mx * my + c1) / (mx * mx + my * my + c1)))
    return value


def ms_ssim_loss(out: np.ndarray, target: np.ndarray, **kw) -> float:
    """``out`` and ``target`` are [N,1,H,W]."""
    return 1.0 - sum(ms_ssim(o[0], t[0], **kw) for o, t in zip(out, target)) / len(out)
