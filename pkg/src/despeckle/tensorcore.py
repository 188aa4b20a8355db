"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operations needed by the despeckling networks and their losses are
provided. Broadcasting is limited to size-1 operands in the elementwise ops.

Usage::

    with Tape() as tape:
        loss = mean(relu(conv2d(x, w, b)))
    grads = backward(loss, tape)
"""

from __future__ import annotations

import contextlib
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(Exception):
    """Base class for tensor contract violations."""


class DimensionError(TensorError, ValueError):
    pass


class NumericError(TensorError, FloatingPointError):
    pass


class ContractError(TensorError, RuntimeError):
    pass


_DEFAULT_DTYPE = [np.float32]


def get_default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with (e.g. float64 for gradient checks)."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """An n-dimensional real array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_finite(arr, name or "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tracked = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tracked = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of the primitive operations executed while the tape is active."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE_TAPES: list[Tape] = []


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(out, op)
    result = Tensor._wrap(out)
    if _ACTIVE_TAPES and any(t._tracked for t in inputs):
        result._tracked = True
        _ACTIVE_TAPES[-1].records.append(_Record(inputs, result, backward_fn, op))
    return result


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape``; sets ``.grad`` on every leaf that requires it.

    Returns a mapping from each such leaf to its gradient. A tape can be swept once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape has already been consumed by a backward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp._tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.requires_grad:
                leaves[key] = inp
    out = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        out[t] = g
    return out


# ---------------------------------------------------------------------------
# elementwise


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_default_dtype()).reshape(1) if np.ndim(x) == 0
                        else np.asarray(x, dtype=get_default_dtype()))


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _reduce_to(ga, a.shape), _reduce_to(-ga * out, b.shape)

    return _record("div", out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of non-positive value")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is passed only where the input was inside the interval."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.data.dtype)
    return _record("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable in both tails
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _record("sum", np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1), (x,),
                   lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _record("mean", np.asarray(x.data.mean(), dtype=x.data.dtype).reshape(1), (x,),
                   lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.data.dtype),))


def mean_axes(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Mean over ``axes``; those axes are dropped from the result."""
    axes = tuple(a % x.data.ndim for a in axes)
    n = math.prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / x.data.dtype.type(n),)

    return _record("mean_axes", np.asarray(out, dtype=x.data.dtype), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    return mean_axes(x, (2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N,K] x [F,K] -> [N,F]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} for weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    return _record("linear", out, (x, weight, bias),
                   lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution


def _same_pad(k: int) -> int:
    return k // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``same`` zero-pads ``k // 2`` on every side, so the output is ceil(H / stride)
    for odd kernels. ``valid`` applies no padding.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: kernel expects {kc} channels, input has {c}")
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding == "same":
        p = _same_pad(kh)
    elif padding == "valid":
        p = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + 2 * p, w + 2 * p
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # materialize whichever is smaller: per-tap outputs (f rows) or im2col (c rows)
    if stride == 1 and p == kh // 2 and c >= f:
        out, bw = _conv_same_s1(x, kernel, bias)
    else:
        out, bw = _conv_im2col(x, kernel, bias, stride, p, ho, wo)
    return _record("conv2d", out, (x, kernel, bias), bw)


def _conv_same_s1(x: Tensor, kernel: Tensor, bias: Tensor):
    # Flattened padded-grid formulation: one GEMM against the stacked taps, then
    # k*k shifted accumulations. Avoids materializing the im2col matrix.
    n, c, h, w = x.shape
    f, _, k, _ = kernel.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    size = n * hp * wp
    span = size - ((k - 1) * wp + (k - 1))
    dt = x.data.dtype
    grid = np.zeros((c, n, hp, wp), dtype=dt)
    grid[:, :, p:p + h, p:p + w] = x.data.transpose(1, 0, 2, 3)
    xf = grid.reshape(c, size)
    taps = kernel.data.transpose(2, 3, 0, 1).reshape(k * k * f, c)
    y = taps @ xf
    acc = np.zeros((f, size), dtype=dt)
    for i in range(k):
        for j in range(k):
            o, r = i * wp + j, (i * k + j) * f
            acc[:, :span] += y[r:r + f, o:o + span]
    out = acc.reshape(f, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gg = np.zeros((f, n, hp, wp), dtype=g.dtype)
        gg[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
        gg = gg.reshape(f, size)
        gk = gb = gx = None
        if kernel._tracked:
            gk = np.empty(kernel.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    o = i * wp + j
                    gk[:, :, i, j] = gg[:, :span] @ xf[:, o:o + span].T
        if bias._tracked:
            gb = g.sum(axis=(0, 2, 3))
        if x._tracked:
            z = kernel.data.transpose(2, 3, 1, 0).reshape(k * k * c, f) @ gg
            gxf = np.zeros((c, size), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    o, r = i * wp + j, (i * k + j) * c
                    gxf[:, o:o + span] += z[r:r + c, :span]
            gx = np.ascontiguousarray(
                gxf.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))
        return gx, gk, gb

    return out, bw


def _conv_im2col(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, p: int, ho: int, wo: int):
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    hp, wp = h + 2 * p, w + 2 * p
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (C*k*k, N*Ho*Wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    kmat = kernel.data.reshape(f, -1)
    out = (kmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gk = (gt @ cols.T).reshape(kernel.shape) if kernel._tracked else None
        gb = g.sum(axis=(0, 2, 3)) if bias._tracked else None
        gx = None
        if x._tracked:
            dcols = (kmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))
        return gx, gk, gb

    return out, bw


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or get_default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train",
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of NCHW input.

    In ``train`` mode the batch statistics are used and ``state`` is updated in
    place as ``running = momentum * running + (1 - momentum) * batch`` (biased
    variance). In ``infer`` mode the stored statistics are used.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    g4 = gamma.data[None, :, None, None]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DimensionError("batch_norm: train mode needs at least two values per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        state.mean = (momentum * state.mean + (1 - momentum) * mu).astype(state.mean.dtype)
        state.var = (momentum * state.var + (1 - momentum) * var).astype(state.var.dtype)
        out = g4 * xhat + beta.data[None, :, None, None]

        def bw(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x._tracked:
                dxhat = g * g4
                gx = (inv / m)[None, :, None, None] * (
                    m * dxhat - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
            return gx, gg, gb

    elif mode == "infer":
        inv = (1.0 / np.sqrt(state.var + eps)).astype(x.data.dtype)
        xhat = (x.data - state.mean[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]

        def bw(g):
            return g * (g4 * inv[None, :, None, None]), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    return _record("batch_norm", out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# gaussian blur


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 * sigma), in float64."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    k = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def _reflect_index(i: int, n: int) -> int:
    # half-sample symmetric extension: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


@functools.lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float, dtype: str) -> np.ndarray:
    taps = gaussian_kernel1d(sigma)
    r = len(taps) // 2
    mat = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for k in range(-r, r + 1):
            mat[i, _reflect_index(i + k, n)] += taps[k + r]
    mat = mat.astype(dtype)
    mat.flags.writeable = False
    return mat


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable normalized Gaussian smoothing over the last two axes.

    Borders use half-sample symmetric reflection, which keeps the global mean of
    the image unchanged.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if x.data.ndim < 2:
        raise DimensionError("gaussian_blur needs at least 2 dimensions")
    h, w = x.shape[-2:]
    dt = x.data.dtype.str
    bh = _blur_matrix(h, float(sigma), dt)
    bw_ = _blur_matrix(w, float(sigma), dt)
    out = bh @ x.data @ bw_.T
    return _record("gaussian_blur", out, (x,), lambda g: (bh.T @ g @ bw_,))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update of ``params`` in place (``.data`` is replaced, not mutated).

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(p.data.dtype)
        v = (b2 * v + (1 - b2) * g * g).astype(p.data.dtype)
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = _check_finite((p.data - step).astype(p.data.dtype), f"adam update of {name}")
        p.grad = None
