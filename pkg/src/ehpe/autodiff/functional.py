"""Differentiable operations on :class:`Tensor`.

Every op computes its forward with numpy and registers a closure returning
one gradient per input. Binary elementwise ops broadcast by the trailing
dimension rule; their gradients are summed back to the input shapes.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result

LEAKY_SLOPE = 0.01


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return make_result(
        out, (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def elementwise(op_kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch by name: add, sub, mul, scalar-mul, relu, leaky_relu, square, sqrt."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "leaky_relu": leaky_relu, "square": square, "sqrt": sqrt, "abs": abs}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind == "scalar-mul":
        return scale(as_tensor(a), float(b))
    if op_kind in unary:
        return unary[op_kind](as_tensor(a), **kw)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(a.data[idx]), (a,), bw, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_result(
        np.broadcast_to(a.data, shape).copy(), (a,),
        lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax. Entries equal to -inf get probability 0."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


# ---------------------------------------------------------------- convolution / pooling

def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. ``x``: (C,H,W) or (N,C,H,W);
    ``k``: (C_out, C_in, kh, kw)."""
    x, squeeze = _as_batched(as_tensor(x))
    k = as_tensor(k)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, c, h, w = x.shape
    o, ci, kh, kw = k.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, input has {c}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(k.shape)
        dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return np.ascontiguousarray(dx), gk

    res = make_result(np.ascontiguousarray(out), (x, k), bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to (N,C,H,W)."""
    return add(x, reshape(b, (1, -1, 1, 1)))


def maxpool2d(x: Tensor, win: int = 2, stride: int | None = None) -> Tensor:
    """Window max; gradient routes to the first maximal element."""
    stride = win if stride is None else stride
    x, squeeze = _as_batched(as_tensor(x))
    n, c, h, w = x.shape
    if win > h or win > w:
        raise ValueError(f"pool window {win} exceeds input {h}x{w}")
    ho, wo = (h - win) // stride + 1, (w - win) // stride + 1
    view = sliding_window_view(x.data, (win, win), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = view.reshape(n, c, ho, wo, win * win)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        rows = np.arange(ho)[:, None] * stride + arg // win
        cols = np.arange(wo)[None, :] * stride + arg % win
        dx = np.zeros_like(x.data)
        if stride >= win:
            ni, ci = np.ogrid[:n, :c]
            dx[ni[..., None, None], ci[..., None, None], rows, cols] = g
        else:
            ni, ci = np.indices((n, c))
            np.add.at(dx, (ni[..., None, None], ci[..., None, None], rows, cols), g)
        return (dx,)

    res = make_result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_result(out, (x,), bw, "upsample_nearest")


# ---------------------------------------------------------------- sampling

def grid_sample_bilinear(featmap: Tensor, points: Tensor) -> Tensor:
    """Bilinear lookup of ``featmap`` at continuous ``points``.

    ``featmap`` is (C,h,w) or (B,C,h,w); ``points`` is (J,2) or (B,J,2) holding
    (x, y) = (column, row) in cell-index units. Coordinates outside the map
    are clamped to the border, where the gradient w.r.t. the point is zero.
    Returns (J,C) or (B,J,C).
    """
    featmap, points = as_tensor(featmap), as_tensor(points)
    squeeze = featmap.ndim == 3
    f = featmap.data[None] if squeeze else featmap.data
    p = points.data[None] if squeeze else points.data
    b, c, h, w = f.shape
    px, py = p[..., 0], p[..., 1]
    x = np.clip(px, 0.0, w - 1.0)
    y = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(y), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    bi = np.arange(b)[:, None]
    ft = f.transpose(0, 2, 3, 1)  # (B,h,w,C)
    f00, f01 = ft[bi, y0, x0], ft[bi, y0, x1]
    f10, f11 = ft[bi, y1, x0], ft[bi, y1, x1]
    out = (1 - fx) * (1 - fy) * f00 + fx * (1 - fy) * f01 + (1 - fx) * fy * f10 + fx * fy * f11
    in_x = ((px >= 0.0) & (px <= w - 1.0))[..., None]
    in_y = ((py >= 0.0) & (py <= h - 1.0))[..., None]

    def bw(g):
        gt = np.zeros((b, h, w, c))
        np.add.at(gt, (bi, y0, x0), g * (1 - fx) * (1 - fy))
        np.add.at(gt, (bi, y0, x1), g * fx * (1 - fy))
        np.add.at(gt, (bi, y1, x0), g * (1 - fx) * fy)
        np.add.at(gt, (bi, y1, x1), g * fx * fy)
        gf = gt.transpose(0, 3, 1, 2)
        dx = ((1 - fy) * (f01 - f00) + fy * (f11 - f10)) * g * in_x
        dy = ((1 - fx) * (f10 - f00) + fx * (f11 - f01)) * g * in_y
        gp = np.stack([dx.sum(-1), dy.sum(-1)], axis=-1)
        if squeeze:
            return np.ascontiguousarray(gf[0]), gp[0]
        return np.ascontiguousarray(gf), gp

    return make_result(out[0] if squeeze else out, (featmap, points), bw, "grid_sample_bilinear")
