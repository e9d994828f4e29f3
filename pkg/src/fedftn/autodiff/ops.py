"""Differentiable operations on :class:`Tensor`.

Volumes are laid out ``[batch, channel, H, W, D]``.  Each op computes its
forward value with numpy and registers a closure for the vector-Jacobian
product.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), _bw, "add")


elementwise_add = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), _bw, "mul")


elementwise_mul = mul


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return make_result(a.data.sum(dtype=a.dtype), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),), "sum")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def fully_connected(v: Tensor, w: Tensor) -> Tensor:
    """Bias-free linear map: ``out[..., i] = sum_j w[i, j] * v[..., j]``."""
    if w.ndim != 2 or v.shape[-1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input {v.shape} incompatible with weight {w.shape}")

    def _bw(g):
        gv = g @ w.data if v.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, w.shape[0]).T @ v.data.reshape(-1, w.shape[1])
        return gv, gw

    return make_result(v.data @ w.data.T, (v, w), _bw, "fc")


def global_avg_pool(f: Tensor) -> Tensor:
    """Mean over every spatial axis: ``[B, C, *spatial] -> [B, C]``."""
    if f.ndim < 3:
        raise ShapeError(f"global_avg_pool needs [B, C, *spatial], got {f.shape}")
    spatial = f.shape[2:]
    n = int(np.prod(spatial))
    axes = tuple(range(2, f.ndim))

    def _bw(g):
        return (np.broadcast_to((g / n).reshape(g.shape + (1,) * len(spatial)), f.shape).copy(),)

    return make_result(f.data.mean(axis=axes), (f,), _bw, "gap")


def _check_volume(t: Tensor, name: str) -> None:
    if t.ndim != 5:
        raise ShapeError(f"{name}: expected [B, C, H, W, D], got {t.shape}")


def conv3d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """3D cross-correlation via an explicit column buffer and one matmul."""
    _check_volume(x, "conv3d input")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be [Cout, Cin, k, k, k], got {weight.shape}")
    cout, cin, k0, k1, k2 = weight.shape
    if not (k0 == k1 == k2):
        raise ShapeError(f"conv3d kernel must be cubic, got {weight.shape[2:]}")
    k = k0
    if cin != x.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: invalid stride {stride} / padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    B = x.shape[0]
    padded = tuple(s + 2 * padding for s in x.shape[2:])
    out_sp = tuple((p - k) // stride + 1 for p in padded)
    if any(o <= 0 for o in out_sp):
        raise ShapeError(f"conv3d: kernel {k} does not fit input {x.shape[2:]} with padding {padding}")
    H, W, D = out_sp
    s = stride

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    # Column buffer cols[(ci, a, b, c), (batch, voxel)] so the whole conv is one matmul.
    cols = np.empty((cin, k, k, k, B, H, W, D), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, a, b, c] = xp[:, :, a:a + s * H:s, b:b + s * W:s, c:c + s * D:s].transpose(1, 0, 2, 3, 4)
    cols = cols.reshape(cin * k ** 3, -1)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.reshape(cout, 1)
    out = np.ascontiguousarray(out.reshape(cout, B, H, W, D).transpose(1, 0, 2, 3, 4))

    def _bw(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(cin, k, k, k, B, H, W, D)
            dxp = np.zeros((B, cin) + padded, dtype=x.dtype)
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        dxp[:, :, a:a + s * H:s, b:b + s * W:s, c:c + s * D:s] += \
                            dcols[:, a, b, c].transpose(1, 0, 2, 3, 4)
            if padding:
                p = padding
                dxp = dxp[:, :, p:-p, p:-p, p:-p]
            gx = np.ascontiguousarray(dxp)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, _bw, "conv3d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over space with channel affine."""
    _check_volume(x, "instance_norm")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"instance_norm: affine shapes {gamma.shape}/{beta.shape} != ({C},)")
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gb = gamma.data.reshape(1, C, 1, 1, 1)
    out = xhat * gb + beta.data.reshape(1, C, 1, 1, 1)

    def _bw(g):
        ggamma = (g * xhat).sum(axis=(0,) + axes)
        gbeta = g.sum(axis=(0,) + axes)
        gx = None
        if x.requires_grad:
            gh = g * gb
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), _bw, "instance_norm")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_volume(x, "upsample_nearest2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def _bw(g):
        B, C, H, W, D = x.shape
        return (g.reshape(B, C, H, 2, W, 2, D, 2).sum(axis=(3, 5, 7)),)

    return make_result(out, (x,), _bw, "upsample")


def downsample_avg2x(x: Tensor) -> Tensor:
    _check_volume(x, "downsample_avg2x")
    B, C, H, W, D = x.shape
    if H % 2 or W % 2 or D % 2:
        raise ShapeError(f"downsample_avg2x needs even spatial dims, got {x.shape[2:]}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2, D // 2, 2).mean(axis=(3, 5, 7))

    def _bw(g):
        g8 = (g * x.dtype.type(0.125))
        return (g8.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4),)

    return make_result(out, (x,), _bw, "downsample")


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"channel_concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def _bw(g):
        return g[:, :ca], g[:, ca:]

    return make_result(np.concatenate([a.data, b.data], axis=1), (a, b), _bw, "concat")


def mse(a: Tensor, b) -> Tensor:
    """Mean squared difference over all elements, as a scalar."""
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def _bw(g):
        gd = diff * (2 * g / n)
        return (gd if a.requires_grad else None), (-gd if b.requires_grad else None)

    return make_result(value, (a, b), _bw, "mse")


def squared_distance(a: Tensor, anchor: np.ndarray) -> Tensor:
    """``sum((a - anchor)**2)`` with ``anchor`` held constant."""
    anchor = np.asarray(anchor)
    if anchor.shape != a.shape:
        raise ShapeError(f"squared_distance: shape mismatch {a.shape} vs {anchor.shape}")
    diff = a.data - anchor.astype(a.dtype, copy=False)
    value = np.asarray((diff * diff).sum(), dtype=a.dtype)
    return make_result(value, (a,), lambda g: (2 * g * diff,), "sqdist")
