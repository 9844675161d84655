"""Differentiable primitives.

Every function takes and returns :class:`~mma.numerics.tensor.Tensor` and
registers its backward rule through :func:`make_node`. Broadcasting follows
numpy's trailing-dimension rule; gradients are summed back to each input's
shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from mma.numerics.tensor import ContractError, Tensor, as_tensor, make_node

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- binary elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ContractError("division by exact zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw)


# -- unary elementwise -------------------------------------------------------


def _unary(x, forward, derivative) -> Tensor:
    """``derivative(x, y)`` returns dy/dx elementwise."""
    x = as_tensor(x)
    y = forward(x.data)

    def bw(g):
        return (g * derivative(x.data, y),)

    return make_node(y, (x,), bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda v, y: y)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ContractError("log of non-positive value")
    return _unary(x, np.log, lambda v, y: 1.0 / v)


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda v, y: 0.5 / y)


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, y: 2.0 * v)


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda v, y: 1.0 - y * y)


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _unary(x, np.abs, lambda v, y: np.sign(v))


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda v, y: y * (1.0 - y))


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda v, y: (v > 0).astype(v.dtype))


def silu(x) -> Tensor:
    def fwd(v):
        return v * _sigmoid(v)

    def der(v, y):
        s = _sigmoid(v)
        return s * (1.0 + v * (1.0 - s))

    return _unary(x, fwd, der)


def softplus(x) -> Tensor:
    return _unary(x, lambda v: np.logaddexp(0, v).astype(v.dtype, copy=False), lambda v, y: _sigmoid(v))


def gelu(x) -> Tensor:
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""

    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(GELU_K * v * (1.0 + GELU_C * v2))
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v2)),)

    return make_node(y, (x,), bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "tanh": tanh,
    "abs": abs,
    "sigmoid": sigmoid,
    "silu": silu,
    "gelu": gelu,
    "relu": relu,
    "softplus": softplus,
    "neg": neg,
}


def elementwise(op_id: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_id]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_id!r}") from None
    if op_id in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{op_id} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op_id} is unary")
    return fn(a)


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_node(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def global_avg_pool(x) -> Tensor:
    """B x C x H x W -> B x C x 1 x 1."""
    return mean(x, axis=(2, 3), keepdims=True)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


permute = transpose


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], copy=True)
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, bw)


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ContractError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(index)))
        start += n
    return out


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),))


def pad(x, pad_width: Sequence[tuple[int, int]], mode: str = "zeros") -> Tensor:
    """Pad every axis by ``pad_width[i] = (before, after)``; mode 'zeros' or 'replicate'."""
    x = as_tensor(x)
    pad_width = [tuple(p) for p in pad_width]
    if len(pad_width) != x.ndim:
        raise ContractError(f"pad_width has {len(pad_width)} entries for rank {x.ndim}")
    if mode == "zeros":
        out = np.pad(x.data, pad_width, mode="constant")
    elif mode == "replicate":
        out = np.pad(x.data, pad_width, mode="edge")
    else:
        raise ContractError(f"unknown pad mode {mode!r}")

    def bw(g):
        for axis, (lo, hi) in enumerate(pad_width):
            if lo == 0 and hi == 0:
                continue
            n = x.shape[axis]
            inner = np.take(g, np.arange(lo, lo + n), axis=axis)
            if mode == "replicate":
                head = [slice(None)] * g.ndim
                tail = [slice(None)] * g.ndim
                head[axis] = slice(0, lo)
                tail[axis] = slice(lo + n, None)
                first = [slice(None)] * g.ndim
                last = [slice(None)] * g.ndim
                first[axis] = slice(0, 1)
                last[axis] = slice(n - 1, n)
                inner[tuple(first)] += g[tuple(head)].sum(axis=axis, keepdims=True)
                inner[tuple(last)] += g[tuple(tail)].sum(axis=axis, keepdims=True)
            g = inner
        return (g,)

    return make_node(out, (x,), bw)


def pad2d(x, padding, mode: str = "zeros") -> Tensor:
    """Pad the trailing two (spatial) axes of a rank-4 tensor."""
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    widths = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return pad(x, widths, mode=mode)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored out x in."""
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


def _correlate_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, bias=None, padding=0, pad_mode: str = "zeros") -> Tensor:
    """Stride-1 cross-correlation, B x C x H x W with O x C x kh x kw weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError("conv2d expects rank-4 input and weight")
    if x.shape[1] != w.shape[1]:
        raise ContractError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if padding:
        x = pad2d(x, padding, mode=pad_mode)
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ContractError("kernel larger than padded input")
    out = _correlate_valid(x.data, w.data)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wt = np.ascontiguousarray(np.flip(w.data, axis=(2, 3)).transpose(1, 0, 2, 3))
            gx = _correlate_valid(gp, wt)
        if w.requires_grad:
            cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[: len(parents)]

    return make_node(out, parents, bw)


def conv1d_causal_depthwise(x, w, bias=None) -> Tensor:
    """Per-channel causal convolution along axis 1 of a B x L x E tensor.

    ``w`` is E x k; output[t] = sum_j w[:, j] * x[t - (k-1) + j] with zeros
    before the sequence start.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ContractError(f"bad depthwise conv shapes {x.shape}, {w.shape}")
    _, length, _ = x.shape
    k = w.shape[1]
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j : j + length, :] * w.data[:, j]
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + length, :] += g * w.data[:, j]
            gx = gxp[:, k - 1 :, :]
        if w.requires_grad:
            gw = np.stack([(g * xp[:, j : j + length, :]).sum(axis=(0, 1)) for j in range(k)], axis=1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb)[: len(parents)]

    return make_node(out, parents, bw)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"affine parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)
