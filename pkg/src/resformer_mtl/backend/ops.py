"""Differentiable operations on :class:`Tensor`.

Each function computes its forward value with numpy and registers a backward
closure. Image tensors use the (batch, channels, height, width) layout.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        sa, sb = a.shape, b.shape
        for i in range(1, min(len(sa), len(sb)) + 1):
            if sa[-i] != sb[-i] and sa[-i] != 1 and sb[-i] != 1:
                raise ShapeError(
                    f"{opname}: axis {-i} has sizes {sa[-i]} and {sb[-i]} "
                    f"(shapes {sa} vs {sb})"
                ) from None
        raise


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = x ** exponent

    def backward(g):
        return (g * exponent * x ** (exponent - 1),)

    return make_result(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def clip(a, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clamp values; the gradient is zero wherever a bound is active."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, low, high)
    passed = np.ones(x.shape, dtype=bool)
    if low is not None:
        passed &= x >= low
    if high is not None:
        passed &= x <= high

    return make_result(out, (a,), lambda g: (g * passed,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: contraction axis sizes differ ({a.shape[-1]} vs {b.shape[-2]})"
        )
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf-based Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    return make_result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow; gradient 1 - sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return make_result(out, (a,), lambda g: (g * (1.0 - np.exp(out)),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {a.ndim}-d input")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max(a, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; ties split the gradient to the first maximum."""
    a = as_tensor(a)
    x = a.data
    axis = axis % a.ndim
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return make_result(out if keepdims else np.squeeze(out, axis), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    keys = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in keys)

    def backward(g):
        grad = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(grad, key, g)
        else:
            grad[key] += g
        return (grad,)

    return make_result(a.data[key], (a,), backward)


def take(table, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    index = np.asarray(index)
    shape, dtype = table.shape, table.dtype

    def backward(g):
        grad = np.zeros(shape, dtype=dtype)
        np.add.at(grad, index, g)
        return (grad,)

    return make_result(table.data[index], (table,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {t.ndim} vs {ndim}")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(
                    f"concat: axis {ax} has sizes {tensors[0].shape[ax]} and {t.shape[ax]}"
                )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tensors, backward)


def roll(a, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Toroidal roll (numpy semantics); the backward pass rolls back."""
    a = as_tensor(a)
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return make_result(
        np.roll(a.data, shifts, axis=axes), (a,), lambda g: (np.roll(g, back, axis=axes),)
    )


def pad(a, widths: Sequence[Sequence[int]]) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result(
        np.pad(a.data, widths), (a,), lambda g: (g[crop],)
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """Affine map along the last axis; ``weight`` has shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input last axis is {x.shape[-1]}, weight expects {weight.shape[1]}"
        )
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    Computed one kernel tap at a time so no im2col buffer is materialised;
    each tap is a channel contraction over a strided view of the padded input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (B,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d: channel axis (1) of input is {x.shape[1]}, weight expects {cin}"
        )
    if kh < 1 or kw < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: kernel, stride and dilation must be >= 1, padding >= 0")
    b, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for spatial size {(h, w)}")

    # channels-last padded copy so every tap is a plain 2-D GEMM
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    wd = weight.data
    wt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))  # (kh, kw, Cin, Cout)
    rows = b * ho * wo

    def tap(i, j):
        r0, c0 = i * dilation, j * dilation
        return (
            slice(None),
            slice(r0, r0 + stride * (ho - 1) + 1, stride),
            slice(c0, c0 + stride * (wo - 1) + 1, stride),
        )

    def patch(i, j):
        return np.ascontiguousarray(xp[tap(i, j)]).reshape(rows, cin)

    acc = np.zeros((rows, cout), dtype=np.result_type(xp, wd))
    for i in range(kh):
        for j in range(kw):
            acc += patch(i, j) @ wt[i, j]
    if bias is not None:
        acc += as_tensor(bias).data
    out = np.ascontiguousarray(acc.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(rows, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += (g2 @ wt[i, j].T).reshape(b, ho, wo, cin)
            gx = gxp[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.empty((kh, kw, cout, cin), dtype=wd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = g2.T @ patch(i, j)
            gw = gw.transpose(2, 3, 0, 1)
        if bias is not None and as_tensor(bias).requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    return make_result(out, parents, backward)


def max_pool2d(x, k: int, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or k
    b, c, h, w = x.shape
    if k < 1 or k > h or k > w:
        raise ShapeError(f"max_pool2d: window {k} does not fit spatial size {(h, w)}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    taps = []
    for i in range(k):
        for j in range(k):
            taps.append(
                x.data[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            )
    stack = np.stack(taps)  # (k*k, B, C, Ho, Wo)
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def backward(g):
        grad = np.zeros_like(x.data)
        for t in range(k * k):
            i, j = divmod(t, k)
            grad[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == t)
        return (grad,)

    return make_result(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B,C,H,W), got {x.shape}")
    return mean(x, axis=(2, 3))


def _upsample_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # align_corners=False at scale 2: even outputs blend with the previous
    # neighbour, odd outputs with the next, both 0.75/0.25, edges clamped.
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _upsample_axis_transpose(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    # even[i] pulls 0.25 from x[i-1] (clamped to 0); odd[i] from x[i+1] (clamped to n-1)
    sl = [slice(None)] * g.ndim
    sl.pop(axis + 1)

    def at(idx):
        s = list(sl)
        s[axis] = idx
        return tuple(s)

    out[at(slice(0, n - 1))] += 0.25 * even[at(slice(1, n))]
    out[at(slice(0, 1))] += 0.25 * even[at(slice(0, 1))]
    out[at(slice(1, n))] += 0.25 * odd[at(slice(0, n - 1))]
    out[at(slice(n - 1, n))] += 0.25 * odd[at(slice(n - 1, n))]
    return out


def upsample_bilinear2x(x) -> Tensor:
    """Bilinear 2x upsampling of (B, C, H, W), align_corners=False."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear2x expects (B,C,H,W), got {x.shape}")
    out = _upsample_axis(_upsample_axis(x.data, 2), 3)

    def backward(g):
        return (_upsample_axis_transpose(_upsample_axis_transpose(g, 3), 2),)

    return make_result(out, (x,), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalisation of (B, C, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (EMA; the running variance uses the unbiased estimate).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if as_tensor(gamma).shape != (c,):
        raise ShapeError(f"batch_norm: channel axis (1) is {c}, gamma has {as_tensor(gamma).shape}")
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count <= 1:
            raise ValueError(
                "batch_norm: training mode needs more than one value per channel "
                f"(got input shape {x.shape})"
            )
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        normed = mul(centered, power(add(var, eps), -0.5))
        batch_var = var.data.reshape(c)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var * count / (count - 1)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: eval mode requires running statistics")
        scale = 1.0 / np.sqrt(running_var + eps)
        normed = mul(sub(x, running_mean.reshape(1, c, 1, 1)), scale.reshape(1, c, 1, 1))
    return add(mul(normed, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the affine map."""
    x = as_tensor(x)
    c = x.shape[-1]
    if c == 0:
        raise ShapeError("layer_norm: last axis is empty")
    if as_tensor(gamma).shape != (c,):
        raise ShapeError(f"layer_norm: last axis is {c}, gamma has {as_tensor(gamma).shape}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return add(mul(mul(centered, power(add(var, eps), -0.5)), gamma), beta)
