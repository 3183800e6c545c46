"""Differentiable neural-network operations on :class:`gage.tensor.Tensor`.

All image tensors are NCHW. Convolutions are cross-correlations with zero
padding, lowered to one BLAS matmul over an im2col buffer.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError
from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DIRECT_CONV_MAX_CK = 512


def _require_rank(name: str, t: Tensor, rank: int, what: str) -> None:
    if t.ndim != rank:
        raise DimensionError(f"{name}: {what} must have rank {rank}, got shape {t.shape}")


def _use_direct(stride: int, padding: int, kh: int, kw: int, c: int, k: int) -> bool:
    # direct loops win only where im2col is memory-bound (few channels)
    return (kernels.NUMBA_ENABLED and stride == 1 and padding <= min(kh, kw) - 1
            and c * k <= DIRECT_CONV_MAX_CK)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_rank("conv2d", x, 4, "input")
    _require_rank("conv2d", weight, 4, "weight")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if cw != c:
        raise DimensionError(f"conv2d: channel axis (1) mismatch, input has {c} but weight expects {cw}")
    if kh > h + 2 * padding:
        raise DimensionError(f"conv2d: height axis (2) {h}+2*{padding} is smaller than kernel {kh}")
    if kw > w + 2 * padding:
        raise DimensionError(f"conv2d: width axis (3) {w}+2*{padding} is smaller than kernel {kw}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias must have shape ({k},), got {bias.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xd = x.data
    wd = weight.data
    w2 = wd.reshape(k, -1)
    need_x = x.requires_grad
    direct = _use_direct(stride, padding, kh, kw, c, k)
    if direct:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        out = kernels.conv_direct_nb(xp, wd, ho, wo)
        cols = None
    else:
        cols = kernels.im2col(xd, kh, kw, stride, padding, ho, wo)
        out = (w2 @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g = np.ascontiguousarray(g)
        g2 = g.transpose(1, 0, 2, 3).reshape(k, -1)
        gx = None
        if direct:
            q = kh - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
            if need_x:
                wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = kernels.conv_direct_nb(gp, wflip, h, w)
            gw = (g2 @ kernels.im2col(xd, kh, kw, 1, padding, ho, wo).T).reshape(wd.shape)
        else:
            gw = (g2 @ cols.T).reshape(wd.shape)
            if need_x:
                gx = kernels.col2im(w2.T @ g2, n, c, h, w, kh, kw, stride, padding, ho, wo)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def max_pool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    _require_rank("max_pool2d", x, 4, "input")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"max_pool2d: window {k} exceeds spatial extent {(h, w)} with padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out, arg = kernels.maxpool_forward(x.data, k, stride, padding, ho, wo)

    def backward(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w),)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank("global_avg_pool", x, 4, "input")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).astype(x.dtype),)

    return Tensor._from_op(x.data.mean(axis=(2, 3), dtype=x.dtype), (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (out > 0),)

    return Tensor._from_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _require_rank("linear", x, 2, "input")
    _require_rank("linear", weight, 2, "weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: inner dimension mismatch, input has {x.shape[1]} features but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ wd, g.T @ xd, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (the running variance uses the
    unbiased batch estimate). In eval mode the running statistics are used.
    """
    _require_rank("batch_norm2d", x, 4, "input")
    n, c, h, w = x.shape
    for nm, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batch_norm2d: {nm} must have shape ({c},), got {arr.shape}")
    xd = x.data
    if training:
        if n < 2:
            raise DimensionError("batch_norm2d: training mode needs a batch of at least 2 samples")
        m = n * h * w
        mean, var = kernels.bn_stats(xd)
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += (momentum * var * (m / max(m - 1, 1))).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    gd = gamma.data
    xhat, out = kernels.bn_apply(xd, mean.astype(xd.dtype), invstd, gd, beta.data)

    def backward(g):
        return kernels.bn_backward(np.ascontiguousarray(g), xhat, gd, invstd, training)

    return Tensor._from_op(out, (x, gamma, beta), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, mean-reduced over all elements."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction shape {pred.shape} differs from target shape {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    scale = 2.0 / diff.size

    def backward(g):
        gp = (g * scale * diff).astype(pred.dtype)
        return gp, -gp

    return Tensor._from_op(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward)
