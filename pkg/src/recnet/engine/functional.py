"""Differentiable operators used by the network.

Convolutions take ``(N, C, H, W)`` or ``(C, H, W)`` inputs and use no
padding. ``conv2d`` weights are ``(C_out, C_in, kh, kw)``; ``conv_transpose2d``
weights are ``(C_in, C_out, kh, kw)``, the adjoint layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from recnet.engine.tensor import Tensor
from recnet.errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, *self.kernel, *self.stride) < 1:
            raise ShapeError(f"invalid conv spec {self}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        if h < kh or w < kw:
            raise ShapeError(f"kernel {(kh, kw)} larger than input {(h, w)}")
        return (h - kh) // sh + 1, (w - kw) // sw + 1


@dataclass(frozen=True)
class ConvTranspose2dSpec:
    """Transposed convolution with an explicit output size.

    The raw output is ``(in - 1) * stride + kernel`` per axis. ``padding``
    trims that many rows/columns from both sides, then zeros are appended at
    the bottom/right to reach ``target``.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    target: tuple[int, int]
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, *self.kernel, *self.stride) < 1:
            raise ShapeError(f"invalid transposed conv spec {self}")
        if min(self.padding) < 0:
            raise ShapeError("padding must be non-negative")

    def base_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h - 1) * sh + kh - 2 * ph, (w - 1) * sw + kw - 2 * pw

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        bh, bw = self.base_size(h, w)
        th, tw = self.target
        if th < bh or tw < bw:
            raise ShapeError(f"target {self.target} smaller than base output {(bh, bw)} for input {(h, w)}")
        return th, tw


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W) input, got {x.shape}")
    return x, False


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """``(N, C, Ho, Wo, kh, kw)`` strided view of sliding windows."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, *stride)
    return np.ascontiguousarray(np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))


def _conv_weight_grad(x: np.ndarray, gy: np.ndarray, kernel, stride) -> np.ndarray:
    win = _windows(x, kernel[0], kernel[1], *stride)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, stride, in_hw) -> np.ndarray:
    """Adjoint of ``_conv_forward`` with respect to its input (col2im)."""
    n, _, ho, wo = gy.shape
    c, kh, kw = w.shape[1:]
    sh, sw = stride
    cols = np.tensordot(gy, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, c) + tuple(in_hw), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, :, i, j]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1), name: str = "conv2d") -> Tensor:
    """Valid cross-correlation; output ``floor((H - kh) / sh) + 1`` per axis."""
    x, squeeze = _as_batch(x)
    c_out, c_in, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"{name}: input has {c} channels, layer expects {c_in}")
    if h < kh or w < kw:
        raise ShapeError(f"{name}: kernel {(kh, kw)} larger than input {(h, w)}")
    stride = tuple(stride)
    xd, wd = x.data, weight.data

    def backward(g):
        gx = _conv_input_grad(g, wd, stride, (h, w)) if x.requires_grad else None
        gw = _conv_weight_grad(xd, g, (kh, kw), stride) if weight.requires_grad else None
        return gx, gw

    out = Tensor._make(_conv_forward(xd, wd, stride), (x, weight), backward)
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1, 1)
    return out.reshape(out.shape[1:]) if squeeze else out


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1),
    target=None,
    padding=(0, 0),
    name: str = "conv_transpose2d",
) -> Tensor:
    """Fractionally strided convolution resized to ``target`` (see ``ConvTranspose2dSpec``)."""
    x, squeeze = _as_batch(x)
    c_in, c_out, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"{name}: input has {c} channels, layer expects {c_in}")
    stride, padding = tuple(stride), tuple(padding)
    raw_hw = ((h - 1) * stride[0] + kh, (w - 1) * stride[1] + kw)
    if target is None:
        target = (raw_hw[0] - 2 * padding[0], raw_hw[1] - 2 * padding[1])
    spec = ConvTranspose2dSpec(c_in, c_out, (kh, kw), stride, tuple(target), padding)
    try:
        th, tw = spec.output_size(h, w)
    except ShapeError as exc:
        raise ShapeError(f"{name}: {exc}") from None
    ph, pw = padding
    bh, bw = spec.base_size(h, w)
    xd, wd = x.data, weight.data

    raw = _conv_input_grad(xd, wd, stride, raw_hw)
    out = np.zeros((n, c_out, th, tw), dtype=raw.dtype)
    out[:, :, :bh, :bw] = raw[:, :, ph : ph + bh, pw : pw + bw]

    def backward(g):
        g_raw = np.zeros((n, c_out) + raw_hw, dtype=g.dtype)
        g_raw[:, :, ph : ph + bh, pw : pw + bw] = g[:, :, :bh, :bw]
        gx = _conv_forward(g_raw, wd, stride) if x.requires_grad else None
        gw = _conv_weight_grad(g_raw, xd, (kh, kw), stride) if weight.requires_grad else None
        return gx, gw

    y = Tensor._make(out, (x, weight), backward)
    if bias is not None:
        y = y + bias.reshape(1, c_out, 1, 1)
    return y.reshape(y.shape[1:]) if squeeze else y


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    name: str = "batchnorm2d",
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is usual).
    """
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"{name}: {c} channels but parameters of length {gamma.shape}")
    m = n * h * w
    if m == 0:
        raise ShapeError(f"{name}: zero-size input {x.shape}")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            gx = (invstd.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * invstd.reshape(1, c, 1, 1)
        return gx, gg, gb

    y = Tensor._make(out.astype(xd.dtype), (x, gamma, beta), backward)
    return y.reshape(y.shape[1:]) if squeeze else y


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """``x`` where ``x >= 0``, ``slope * x`` elsewhere; ``slope`` is one scalar."""
    xd, a = x.data, slope.data
    neg = xd < 0
    out = np.where(neg, a.reshape(()) * xd, xd).astype(xd.dtype)

    def backward(g):
        gx = np.where(neg, a.reshape(()) * g, g).astype(g.dtype)
        ga = np.array(np.sum(g * xd * neg), dtype=a.dtype).reshape(a.shape)
        return gx, ga

    return Tensor._make(out, (x, slope), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` over the last axis; ``W`` is ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense: input length {x.shape[-1]} but weights expect {weight.shape[1]}")
    xd, wd = x.data, weight.data
    x_shape = xd.shape

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(x_shape)
        gw = g2.T @ xd.reshape(-1, wd.shape[1])
        return gx, gw

    out = Tensor._make(xd @ wd.T, (x, weight), backward)
    if bias is not None:
        out = out + bias
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),))


def image_gradients(image: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along columns (u) and rows (v) of the last two axes.

    The last column of ``du`` and the last row of ``dv`` are zero.
    """
    if image.ndim < 2 or image.shape[-1] < 2 or image.shape[-2] < 2:
        raise ShapeError(f"image_gradients needs H, W >= 2, got {image.shape}")
    d = image.data
    du = np.zeros_like(d)
    du[..., :, :-1] = d[..., :, 1:] - d[..., :, :-1]
    dv = np.zeros_like(d)
    dv[..., :-1, :] = d[..., 1:, :] - d[..., :-1, :]

    def back_u(g):
        gi = np.zeros_like(g)
        gi[..., :, 1:] += g[..., :, :-1]
        gi[..., :, :-1] -= g[..., :, :-1]
        return (gi,)

    def back_v(g):
        gi = np.zeros_like(g)
        gi[..., 1:, :] += g[..., :-1, :]
        gi[..., :-1, :] -= g[..., :-1, :]
        return (gi,)

    return Tensor._make(du, (image,), back_u), Tensor._make(dv, (image,), back_v)


__all__ = [
    "Conv2dSpec",
    "ConvTranspose2dSpec",
    "batchnorm2d",
    "conv2d",
    "conv_transpose2d",
    "dense",
    "image_gradients",
    "prelu",
    "sigmoid",
]
