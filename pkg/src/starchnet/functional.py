"""Differentiable operators needed by ResNet-18 and its classification head.

All image tensors use NCHW layout.  Each function takes and returns
:class:`~starchnet.tensor.Tensor` objects and registers a backward rule.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ShapeError
from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_ndim(x: Tensor, ndim: int, op: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{op} expects a {ndim}-D tensor, got shape {x.shape}")


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view of shape (N, C, oh, ow, kh, kw) over a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    _require_ndim(x, 4, "conv2d")
    _require_ndim(weight, 4, "conv2d weight")
    if stride < 1:
        raise ArgumentError(f"conv2d stride must be a positive integer, got {stride}")
    if padding < 0:
        raise ArgumentError(f"conv2d padding must be non-negative, got {padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {weight.shape} does not fit padded input {x.shape} (padding {padding})")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)

    xp = _pad(x.data, padding)
    cols = _windows(xp, kh, kw, stride, oh, ow).transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, lambda g: backward(g)[: len(parents)], "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics (biased variance) normalize the
    input and, when running buffers are given, they are updated in place with
    ``momentum`` (the running variance uses the unbiased estimate).  In eval
    mode the running buffers are used; ``None`` buffers mean mean 0 / var 1.
    """
    _require_ndim(x, 4, "batchnorm2d")
    n, c, h, w = x.shape
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr is not None and arr.shape != (c,):
            raise ShapeError(f"batchnorm2d {name} shape {arr.shape} does not match {c} channels of input {x.shape}")
    bshape = (1, c, 1, 1)
    xd = x.data

    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError(f"batchnorm2d training needs at least 2 values per channel, got input {x.shape}")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(bshape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (count / (count - 1))
    else:
        count = None
        mean = np.zeros(c, xd.dtype) if running_mean is None else running_mean.astype(xd.dtype, copy=False)
        var = np.ones(c, xd.dtype) if running_var is None else running_var.astype(xd.dtype, copy=False)
        centered = xd - mean.reshape(bshape)

    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gx = None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
                gx = (invstd.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window maximum; ties route the gradient to the row-major first cell."""
    _require_ndim(x, 4, "maxpool2d")
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ArgumentError(f"maxpool2d kernel and stride must be >= 1, got {kernel}, {stride}")
    if padding < 0 or padding > kernel // 2:
        raise ArgumentError(f"maxpool2d padding must be in [0, kernel // 2], got {padding}")
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"maxpool2d window {kernel} larger than padded input {x.shape} (padding {padding})")
    oh, ow = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = _pad(x.data, padding, -np.inf)
    win = _windows(xp, kernel, kernel, stride, oh, ow).reshape(n, c, oh, ow, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for p in range(kernel * kernel):
            i, j = divmod(p, kernel)
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.where(arg == p, g, 0)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    _require_ndim(x, 4, "global_avgpool")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(g.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avgpool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x of shape (N, F) and weight (G, F)."""
    _require_ndim(x, 2, "linear")
    _require_ndim(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, lambda g: backward(g)[: len(parents)], "linear")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ArgumentError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis of an (N, K) tensor."""
    _require_ndim(x, 2, "log_softmax")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def nll_loss(logp: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logp``."""
    _require_ndim(logp, 2, "nll_loss")
    n, k = logp.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"nll_loss needs {n} targets, got shape {targets.shape}")
    for row, t in enumerate(targets):
        if not 0 <= t < k or int(t) != t:
            raise ArgumentError(f"nll_loss target {t} in row {row} is outside [0, {k})")
    targets = targets.astype(np.int64)
    rows = np.arange(n)
    loss = -logp.data[rows, targets].mean()

    def backward(g):
        grad = np.zeros_like(logp.data)
        grad[rows, targets] = -g / n
        return (grad,)

    return make_result(np.asarray(loss, dtype=logp.dtype), (logp,), backward, "nll_loss")
