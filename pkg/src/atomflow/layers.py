"""Convolution, batch normalization and loss primitives (NHWC, float64)."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, as_tensor, make_result


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(x_shape, k_shape, stride, padding):
    n, h, w, cin = x_shape
    kh, kw, kcin, _ = k_shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, Ho, Wo, C, kh, kw) view
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, ho: int, wo: int, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(pads) else x
    kh, kw = k.shape[:2]
    if kh == 1 and kw == 1:
        sub = xp[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        return sub @ k[0, 0]
    win = _windows(xp, kh, kw, stride, ho, wo)
    return np.tensordot(win, k, axes=([3, 4, 5], [2, 0, 1]))


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, k_shape, stride: int, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(pads) else x
    kh, kw = k_shape[:2]
    ho, wo = g.shape[1:3]
    win = _windows(xp, kh, kw, stride, ho, wo)
    gk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, O)
    return np.ascontiguousarray(gk.transpose(1, 2, 0, 3))


def _conv_input_grad(g: np.ndarray, k: np.ndarray, x_shape, stride: int, pads) -> np.ndarray:
    # scatter-accumulate each kernel tap; this is also the transposed convolution
    n, h, w, cin = x_shape
    pt, pb, pl, pr = pads
    kh, kw = k.shape[:2]
    ho, wo = g.shape[1:3]
    full = np.zeros((n, h + pt + pb, w + pl + pr, cin))
    for a in range(kh):
        for b in range(kw):
            full[:, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride] += (
                g @ k[a, b].T
            )
    return full[:, pt : pt + h, pl : pl + w]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` (N,H,W,Cin) with ``kernel`` (kh,kw,Cin,Cout)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    ho, wo, pads = _conv_geometry(x.shape, kernel.shape, stride, padding)
    out = _conv_forward(x.data, kernel.data, stride, ho, wo, pads)

    def back(g):
        gx = _conv_input_grad(g, kernel.data, x.shape, stride, pads) if x.requires_grad else None
        gk = _conv_kernel_grad(x.data, g, kernel.shape, stride, pads) if kernel.requires_grad else None
        return gx, gk

    return make_result("conv2d", out, (x, kernel), back)


def conv2d_transpose(y: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Fractionally-strided convolution: the adjoint of same-padded :func:`conv2d`.

    ``y`` is (N,h,w,Cin) and ``kernel`` is (kh,kw,Cout,Cin), i.e. the kernel of
    the forward convolution that maps Cout channels to Cin. Output is
    (N, h*stride, w*stride, Cout).
    """
    y, kernel = as_tensor(y), as_tensor(kernel)
    if y.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d_transpose expects 4-D input and kernel, got {y.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    n, h, w, cin = y.shape
    kh, kw, cout, kcin = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d_transpose: input has {cin} channels but kernel expects {kcin}")
    x_shape = (n, h * stride, w * stride, cout)
    ho, wo, pads = _conv_geometry(x_shape, kernel.shape, stride, "same")
    out = _conv_input_grad(y.data, kernel.data, x_shape, stride, pads)

    def back(g):
        gy = _conv_forward(g, kernel.data, stride, ho, wo, pads) if y.requires_grad else None
        gk = _conv_kernel_grad(g, y.data, kernel.shape, stride, pads) if kernel.requires_grad else None
        return gy, gk

    return make_result("conv2d_transpose", np.ascontiguousarray(out), (y, kernel), back)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize the last axis over all other axes."""
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    if training:
        if count < 2:
            raise ValueError(f"batch_norm needs at least 2 values per channel in train mode, got {count}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.mean = m * state.mean + (1 - m) * mu
        state.var = m * state.var + (1 - m) * var * count / (count - 1)
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return make_result("batch_norm", out, (x, gamma, beta), back)


def weighted_cross_entropy(logits: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Class-weighted cross entropy between soft targets and softmax(logits).

    ``logits`` and ``target`` share shape (..., K); the loss is summed over
    classes and averaged over every leading position (patches, batch).
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    w = np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    wt = target * w
    positions = logits.size // logits.shape[-1]
    loss = -(wt * logp).sum() / positions

    def back(g):
        p = np.exp(logp)
        return (float(g) * (wt.sum(axis=-1, keepdims=True) * p - wt) / positions,)

    return make_result("weighted_ce", np.asarray(loss), (logits,), back)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of integer ``labels`` under softmax(logits); logits (N, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return weighted_cross_entropy(logits, onehot, np.ones(logits.shape[-1]))
