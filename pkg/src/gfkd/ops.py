"""Differentiable operations on :class:`~gfkd.tensor.Tensor`.

Layout convention for 4-D tensors is (batch, channel, height, width).
Convolutions use the cross-correlation convention (no kernel flip).
"""
from __future__ import annotations

import contextlib
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gfkd.tensor import Function, Tensor, as_tensor

Scalar = Union[int, float]
Axes = Optional[Union[int, Sequence[int]]]

LEAKY_SLOPE = 0.2

# multiply-accumulate counter used by gfkd.metrics.count_flops
_mac_counters: List[List[int]] = []


@contextlib.contextmanager
def count_macs() -> Iterator[List[int]]:
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.remove(box)


def _add_macs(n: int) -> None:
    for box in _mac_counters:
        box[0] += int(n)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class _Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class _Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * factor

    def backward(self, g):
        return (g * self.factor,)


class _Shift(Function):
    def forward(self, a, offset):
        return a + offset

    def backward(self, g):
        return (g,)


class _Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (2.0 * self.a * g,)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return _Add.apply(a, b)
    return _Shift.apply(a, offset=float(b))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        return _Sub.apply(a, b)
    return _Shift.apply(a, offset=-float(b))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        return _Mul.apply(a, b)
    return _Scale.apply(a, factor=float(b))


def scale(a: Tensor, factor: Scalar) -> Tensor:
    return _Scale.apply(a, factor=float(factor))


def square(a: Tensor) -> Tensor:
    return _Square.apply(a)


def elementwise(kind: str, a: Tensor, b: Union[Tensor, Scalar, None] = None) -> Tensor:
    """Dispatch ``add | sub | mul | scale | square`` by name."""
    if kind == "square":
        return square(a)
    if b is None:
        raise ValueError(f"elementwise {kind!r} needs a second operand")
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if kind not in table:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return table[kind](a, b)


# ------------------------------------------------------------------ reductions


def _norm_axes(axes: Axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


class _Sum(Function):
    def forward(self, a, axes, keepdims):
        self.shape, self.axes, self.keepdims = a.shape, axes, keepdims
        return a.sum(axis=axes, keepdims=keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.shape).copy(),)


class _SqNorm(Function):
    def forward(self, a, axes, keepdims):
        self.a, self.axes, self.keepdims = a, axes, keepdims
        return (a * a).sum(axis=axes, keepdims=keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (2.0 * self.a * g,)


def reduce(kind: str, a: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``sq_norm`` (sum of squares) over ``axes``."""
    ax = _norm_axes(axes, a.ndim)
    if kind == "sum":
        return _Sum.apply(a, axes=ax, keepdims=keepdims)
    if kind == "sq_norm":
        return _SqNorm.apply(a, axes=ax, keepdims=keepdims)
    if kind == "mean":
        count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
        if count == 0:
            raise ValueError(f"mean over empty extent of shape {a.shape}")
        return scale(_Sum.apply(a, axes=ax, keepdims=keepdims), 1.0 / count)
    raise ValueError(f"unknown reduction {kind!r}")


def sum(a: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


def sq_norm(a: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    return reduce("sq_norm", a, axes, keepdims)


class _Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


# ---------------------------------------------------------------- convolution


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channels-last (B, Hp, Wp, C) -> column matrix (B*ho*wo, k*k*C)."""
    b, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, ., ., C, k, k)
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)


def _scatter_windows(cols: np.ndarray, shape: Tuple[int, int, int, int], k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols (B, ho, wo, k, k, C) summed into (B, Hp, Wp, C)."""
    ho, wo = cols.shape[1:3]
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, i, j]
    return out


def _to_nhwc_padded(x: np.ndarray, p: int) -> np.ndarray:
    xh = x.transpose(0, 2, 3, 1)
    if p == 0:
        return np.ascontiguousarray(xh)
    return np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))


def _to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


class _Conv2d(Function):
    def forward(self, x, w, b, stride, padding):
        bs, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho = (h + 2 * padding - k) // stride + 1
        wo = (wd + 2 * padding - k) // stride + 1
        self.meta = (x.shape, stride, padding, k, ho, wo)
        self.cols = _windows(_to_nhwc_padded(x, padding), k, stride, ho, wo)
        self.wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
        out = self.cols @ self.wmat.T + b
        _add_macs(bs * ho * wo * o * c * k * k)
        return _to_nchw(out.reshape(bs, ho, wo, o))

    def backward(self, g):
        (bs, c, h, wd), stride, p, k, ho, wo = self.meta
        o = g.shape[1]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ self.cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0)
        dcols = (g2 @ self.wmat).reshape(bs, ho, wo, k, k, c)
        dxp = _scatter_windows(dcols, (bs, h + 2 * p, wd + 2 * p, c), k, stride)
        return _to_nchw(dxp[:, p : p + h, p : p + wd]), np.ascontiguousarray(dw), db


class _ConvTranspose2d(Function):
    def forward(self, x, w, b, stride, padding):
        bs, cin, h, wd = x.shape
        _, cout, k, _ = w.shape
        hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
        self.meta = (x.shape, stride, padding, k, hf, wf)
        self.xmat = x.transpose(0, 2, 3, 1).reshape(-1, cin)
        self.wmat = w.transpose(0, 2, 3, 1).reshape(cin, -1)
        cols = (self.xmat @ self.wmat).reshape(bs, h, wd, k, k, cout)
        full = _scatter_windows(cols, (bs, hf, wf, cout), k, stride)
        _add_macs(bs * h * wd * cin * cout * k * k)
        out = full[:, padding : hf - padding, padding : wf - padding] + b
        return _to_nchw(out)

    def backward(self, g):
        (bs, cin, h, wd), stride, p, k, hf, wf = self.meta
        cout = g.shape[1]
        gfull = np.zeros((bs, hf, wf, cout))
        gfull[:, p : hf - p, p : wf - p] = g.transpose(0, 2, 3, 1)
        gcols = _windows(gfull, k, stride, h, wd)  # (bs*h*wd, k*k*cout)
        dx = (gcols @ self.wmat.T).reshape(bs, h, wd, cin)
        dw = (self.xmat.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        db = g.sum(axis=(0, 2, 3))
        return _to_nchw(dx), np.ascontiguousarray(dw), db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is (out, in, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    k = weight.shape[2]
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {x.shape[2:]} (padding {padding})")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return _Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` is (in, out, k, k).

    Output extent is ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d_transposed expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"conv2d_transposed: input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    if stride < 1:
        raise ValueError("conv2d_transposed: stride must be >= 1")
    k = weight.shape[2]
    if (x.shape[2] - 1) * stride - 2 * padding + k < 1:
        raise ValueError("conv2d_transposed: empty output")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"conv2d_transposed: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return _ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------- activations


class _LeakyRelu(Function):
    def forward(self, a, slope):
        self.slope_map = np.where(a > 0, 1.0, slope)
        return a * self.slope_map

    def backward(self, g):
        return (g * self.slope_map,)


def relu(a: Tensor) -> Tensor:
    return _LeakyRelu.apply(a, slope=0.0)


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    return _LeakyRelu.apply(a, slope=slope)


def activation(kind: str, a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ shape ops


class _MaxPool2(Function):
    def forward(self, a):
        b, c, h, w = a.shape
        blocks = a.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
        self.idx = blocks.argmax(axis=-1)
        self.shape = a.shape
        return np.take_along_axis(blocks, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        b, c, h, w = self.shape
        blocks = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(blocks, self.idx[..., None], g[..., None], axis=-1)
        return (blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)


class _Upsample2(Function):
    def forward(self, a):
        return a.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, g):
        b, c, h, w = g.shape
        return (g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


class _Concat(Function):
    def forward(self, *arrays):
        self.splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=1))


def max_pool2(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first pixel in row-major order."""
    if a.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise ValueError(f"max_pool2 needs even spatial extents, got {a.shape}")
    return _MaxPool2.apply(a)


def upsample_nearest2(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ValueError(f"upsample_nearest2 expects a 4-d tensor, got {a.shape}")
    return _Upsample2.apply(a)


def concat_channels(*tensors: Tensor) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    return _Concat.apply(*tensors)


def shape_op(kind: str, *inputs: Tensor) -> Tensor:
    table = {"max_pool2": max_pool2, "upsample_nearest2": upsample_nearest2, "concat_channels": concat_channels}
    if kind not in table:
        raise ValueError(f"unknown shape op {kind!r}")
    return table[kind](*inputs)


# -------------------------------------------------------------------- softmax


def _softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class _Softmax(Function):
    def forward(self, a, tau):
        self.tau = tau
        self.s = _softmax(a / tau, axis=1)
        return self.s

    def backward(self, g):
        s = self.s
        return ((s * (g - (g * s).sum(axis=1, keepdims=True))) / self.tau,)


def softmax_over_classes(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Per-pixel class distribution of (B, M, H, W) logits at temperature ``tau``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return _Softmax.apply(logits, tau=float(tau))


class _CrossEntropy(Function):
    def forward(self, logits, labels, flags):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
        weight = flags.astype(np.float64)[:, None, None]
        self.count = flags.sum() * labels.shape[1] * labels.shape[2]
        self.logp, self.labels, self.weight = logp, labels, weight
        return np.asarray(-(picked * weight).sum() / self.count)

    def backward(self, g):
        grad = np.exp(self.logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, self.labels[:, None], 1.0, axis=1)
        grad = (grad - onehot) * self.weight[:, None] * (g / self.count)
        return (grad,)


def cross_entropy(logits: Tensor, labels: np.ndarray, labeled: Optional[np.ndarray] = None) -> Tensor:
    """Mean pixel cross-entropy over the samples whose ``labeled`` flag is set.

    Returns a constant zero when no sample in the batch is labeled.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, m = logits.shape[:2]
    if labels.shape != (b,) + logits.shape[2:]:
        raise ValueError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= m:
        raise ValueError(f"cross_entropy: label outside [0, {m})")
    flags = np.ones(b, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    if not flags.any():
        return Tensor(0.0)
    return _CrossEntropy.apply(logits, labels=labels, flags=flags)


# ------------------------------------------------------------ graph distances


class _PairwiseDistance(Function):
    def forward(self, g):
        self.g = g
        diff = g[:, :, None, :] - g[:, None, :, :]
        self.d = np.sqrt((diff * diff).sum(axis=-1))
        return self.d

    def backward(self, grad):
        d = self.d
        w = np.divide(grad + grad.transpose(0, 2, 1), d, out=np.zeros_like(d), where=d > 0)
        return (w.sum(axis=-1)[..., None] * self.g - w @ self.g,)


def pairwise_distance(rows: Tensor) -> Tensor:
    """Euclidean distances between rows: (B, C, N) -> (B, C, C).

    Coincident rows have distance 0 and contribute the zero subgradient.
    """
    if rows.ndim != 3:
        raise ValueError(f"pairwise_distance expects (B, C, N), got {rows.shape}")
    return _PairwiseDistance.apply(rows)
