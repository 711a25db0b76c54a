"""Convolution, batch normalization, pooling and upsampling on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, add, make_op, matmul, mean, reshape, transpose

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    extent = (kernel - 1) * dilation + 1
    return (size + 2 * padding - extent) // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Gather every receptive field into a row: (N*Ho*Wo, C*kh*kw)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"non-positive conv output size {ho}x{wo} for input {h}x{w}")
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    hp, wp = xp.shape[2], xp.shape[3]
    dtype = x.dtype

    def rule(g):
        g6 = g.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, hp, wp), dtype=dtype)
        for i in range(kh):
            r0 = i * dilation
            for j in range(kw):
                c0 = j * dilation
                dxp[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride] += g6[:, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return (dxp,)

    return make_op(cols, (x,), rule)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation (no kernel flip) lowered to a single matmul."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {c}")
    n, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    cols = im2col(x, kh, kw, stride, dilation, padding)
    out = matmul(cols, transpose(reshape(weight, (o, c * kh * kw))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (n, ho, wo, o)), (0, 3, 1, 2))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place by an exponential moving average
    (unbiased variance). In eval mode only the running statistics are read.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm channel mismatch: input has {c}, parameters have {gamma.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm in train mode needs more than one value per channel")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        centred = xd - mu
        var = (centred * centred).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var.reshape(c) * (m / (m - 1))).astype(running_var.dtype)

        def rule(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gd
            dx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, dgamma, dbeta

    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        xhat = (xd - mu) * inv_std

        def rule(g):
            return g * gd * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (gd * xhat + beta.data.reshape(1, c, 1, 1)).astype(xd.dtype)
    return make_op(out, (x, gamma, beta), rule)


@lru_cache(maxsize=64)
def _interp_matrix(size: int, factor: int, dtype_name: str) -> np.ndarray:
    """Row i holds the weights of output i over the ``size`` inputs (align_corners=False)."""
    out = size * factor
    mat = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    mat = mat.astype(dtype_name)
    mat.setflags(write=False)
    return mat


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW input, got {x.shape}")
    if factor == 1:
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    _, _, h, w = x.shape
    uh = _interp_matrix(h, factor, x.dtype.name)
    uw = _interp_matrix(w, factor, x.dtype.name)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make_op(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


@dataclass
class Conv2dLayer:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    @property
    def effective_extent(self) -> int:
        return (self.weight.shape[2] - 1) * self.dilation + 1

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.weight.shape[2], self.stride, self.dilation, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


@dataclass
class BatchNormLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            train=mode == "train", momentum=self.momentum, eps=self.eps,
        )
