"""Random gradient-check instances shared by the unit and acceptance suites.

Each case builder takes a Generator and returns ``(fn, wrt)`` built in float64;
``fn`` recomputes a scalar from the current contents of ``wrt``.
"""

from __future__ import annotations

import numpy as np

from despeckle import tensorcore as tc
from despeckle.networks import (DiscriminatorConfig, GeneratorConfig, build_discriminator,
                                build_generator, discriminator_forward, generator_forward)
from despeckle.tensorcore import Tensor


def _t(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _away_from(rng, shape, points=(0.0,), gap=0.05, scale=1.0):
    # keep samples off the kinks so central differences stay valid
    x = rng.normal(0, scale, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-12) * gap * 2
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a generic linear functional so every output element gets a distinct weight
    return tc.sum(tc.mul(out, Tensor(w)))


def _unary(op, sampler):
    def build(rng):
        x = _t(sampler(rng, (3, 4)))
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(x), w)), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = _t(rng.normal(size=(2, 5)))
        b = _t(rng.uniform(0.5, 2.0, size=(2, 5)) if positive_b else rng.normal(size=(2, 5)))
        w = rng.normal(size=(2, 5))
        return (lambda: _weighted(op(a, b), w)), [a, b]
    return build


def _scalar_operand(rng):
    a = _t(rng.normal(size=(2, 3)))
    s = _t(rng.uniform(0.5, 2.0, size=(1,)))
    w = rng.normal(size=(2, 3))
    return (lambda: _weighted(tc.div(tc.mul(a, s), s + 1.0), w)), [a, s]


def _conv(n, c, f, k, hw, stride, padding):
    def build(rng):
        x = _t(rng.normal(size=(n, c, hw, hw)))
        kern = _t(rng.normal(size=(f, c, k, k)) * 0.5)
        b = _t(rng.normal(size=(f,)))
        ho = tc.conv2d(x, kern, b, stride, padding).shape
        w = rng.normal(size=ho)
        return (lambda: _weighted(tc.conv2d(x, kern, b, stride, padding), w)), [x, kern, b]
    return build


def _batch_norm(mode):
    def build(rng):
        c = 3
        x = _t(rng.normal(1.0, 2.0, size=(2, c, 3, 3)))
        gamma = _t(rng.uniform(0.5, 1.5, size=(c,)))
        beta = _t(rng.normal(size=(c,)))
        state = tc.BatchNormState(rng.normal(size=c), rng.uniform(0.5, 2.0, size=c))
        w = rng.normal(size=x.shape)
        return (lambda: _weighted(tc.batch_norm(x, gamma, beta, state, mode), w)), [x, gamma, beta]
    return build


def _linear(rng):
    x = _t(rng.normal(size=(3, 4)))
    wt = _t(rng.normal(size=(2, 4)))
    b = _t(rng.normal(size=(2,)))
    w = rng.normal(size=(3, 2))
    return (lambda: _weighted(tc.linear(x, wt, b), w)), [x, wt, b]


def _reductions(rng):
    x = _t(rng.normal(size=(2, 3, 4, 5)))
    w = rng.normal(size=(2, 3))
    return (lambda: tc.add(_weighted(tc.global_avg_pool(x), w),
                           tc.mul(tc.mean(tc.reshape(x, (6, 20))), 3.0))), [x]


def _mean_axes(rng):
    x = _t(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(3,))
    return (lambda: _weighted(tc.mean_axes(x, (0, 2)), w)), [x]


def _blur(rng):
    x = _t(rng.normal(size=(2, 1, 9, 7)))
    w = rng.normal(size=x.shape)
    sigma = float(rng.uniform(0.5, 2.0))
    return (lambda: _weighted(tc.gaussian_blur(x, sigma), w)), [x]


MICRO_G = GeneratorConfig(stem_kernel=3, channels=4, n_resblocks=2, convs_per_block=2, block_kernel=3,
                          final_init_gain=1.0)
MICRO_D = DiscriminatorConfig(base_channels=2, n_stages=2, zero_init_head=False)


def _generator(rng):
    mp = build_generator(MICRO_G, int(rng.integers(1 << 30)))
    for name, p in mp.params.items():
        if name.endswith(".b") or name.endswith(".beta"):
            p.data = rng.normal(0, 0.1, size=p.shape)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 6, 6)))
    w = rng.normal(size=(2, 1, 6, 6))
    wrt = list(mp.params.values())
    return (lambda: _weighted(generator_forward(mp, x, "train"), w)), wrt


def _discriminator(rng):
    mp = build_discriminator(MICRO_D, int(rng.integers(1 << 30)))
    x = Tensor(rng.uniform(0, 1, size=(3, 1, 8, 8)))
    w = rng.normal(size=(3,))
    wrt = list(mp.params.values())
    return (lambda: _weighted(discriminator_forward(mp, x), w)), wrt


OP_CASES = {
    "add": _binary(tc.add),
    "sub": _binary(tc.sub),
    "mul": _binary(tc.mul),
    "div": _binary(tc.div, positive_b=True),
    "scalar_operand": _scalar_operand,
    "neg": _unary(tc.neg, lambda r, s: r.normal(size=s)),
    "abs": _unary(tc.abs, lambda r, s: _away_from(r, s)),
    "log": _unary(tc.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "clip": _unary(lambda x: tc.clip(x, -0.5, 0.5), lambda r, s: _away_from(r, s, (-0.5, 0.5))),
    "relu": _unary(tc.relu, lambda r, s: _away_from(r, s)),
    "leaky_relu": _unary(lambda x: tc.leaky_relu(x, 0.2), lambda r, s: _away_from(r, s)),
    "sigmoid": _unary(tc.sigmoid, lambda r, s: r.normal(0, 3, size=s)),
    "linear": _linear,
    "reductions": _reductions,
    "mean_axes": _mean_axes,
    "conv_same_fast": _conv(2, 3, 2, 3, 5, 1, "same"),
    "conv_same_expand": _conv(2, 1, 3, 3, 5, 1, "same"),
    "conv_stride2": _conv(1, 2, 3, 3, 6, 2, "same"),
    "conv_valid": _conv(1, 2, 2, 3, 5, 1, "valid"),
    "batch_norm_train": _batch_norm("train"),
    "batch_norm_infer": _batch_norm("infer"),
    "gaussian_blur": _blur,
}

NETWORK_CASES = {"generator": _generator, "discriminator": _discriminator}
