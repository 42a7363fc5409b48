"""Float64 reference operators with analytic backward passes.

Forward functions come in two flavours: a plain one returning just the
output, and a caching one (suffix ``_fwd``) returning ``(output, cache)``
for the matching ``*_bwd``. Backward passes are exact analytic gradients
of the forward maps; they are validated against finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError, StateError
from .tensor import BnParams, ConvParams, Tensor


def conv_output_hw(
    h: int, w: int, k_h: int, k_w: int, stride: int, padding: int
) -> tuple[int, int]:
    """Output spatial dims for an exact-stride convolution.

    The stride must tile the padded extent exactly; silent truncation of
    border columns is refused because the integer path and the cost model
    both assume every window is materialised.
    """
    span_h = h + 2 * padding - k_h
    span_w = w + 2 * padding - k_w
    if span_h < 0 or span_w < 0:
        raise GeometryError(
            f"kernel ({k_h}x{k_w}) larger than padded input ({h}x{w}, pad={padding})"
        )
    if span_h % stride != 0 or span_w % stride != 0:
        raise GeometryError(
            f"stride {stride} does not tile padded extent ({span_h + k_h}x{span_w + k_w})"
        )
    return span_h // stride + 1, span_w // stride + 1


def window_cols(
    x: np.ndarray, k_h: int, k_w: int, stride: int, padding: int
) -> tuple[np.ndarray, tuple[int, int]]:
    """Lower (N,C,H,W) to a (N*Ho*Wo, C*kh*kw) patch matrix, any dtype."""
    n, c, h, w = x.shape
    h_out, w_out = conv_output_hw(h, w, k_h, k_w, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    win = np.lib.stride_tricks.sliding_window_view(x, (k_h, k_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k_h * k_w)
    return np.ascontiguousarray(cols), (h_out, w_out)


def _im2col(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, tuple[int, int]]:
    _, _, k_h, k_w = p.weight.dims
    return window_cols(x, k_h, k_w, p.stride, p.padding)


@dataclass
class ConvCache:
    cols: np.ndarray
    in_dims: tuple[int, int, int, int]
    out_hw: tuple[int, int]
    params: ConvParams


def conv2d_fwd(x: Tensor, p: ConvParams) -> tuple[Tensor, ConvCache]:
    n, c, h, w = x.dims
    if c != p.in_channels:
        raise ShapeError(f"input has {c} channels, weight expects {p.in_channels}")
    cols, (h_out, w_out) = _im2col(x.data, p)
    w_mat = p.weight.data.reshape(p.out_channels, -1)
    y = cols @ w_mat.T
    if p.bias is not None:
        y = y + p.bias
    y = y.reshape(n, h_out, w_out, p.out_channels).transpose(0, 3, 1, 2)
    cache = ConvCache(cols, x.dims, (h_out, w_out), p)
    return Tensor._wrap(np.ascontiguousarray(y)), cache


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    return conv2d_fwd(x, p)[0]


def conv2d_bwd(grad_y: Tensor, cache: ConvCache):
    """Gradients of conv2d: returns (grad_x, grad_weight, grad_bias)."""
    if cache is None:
        raise StateError("conv2d_bwd called without a forward cache")
    p = cache.params
    n, c, h, w = cache.in_dims
    h_out, w_out = cache.out_hw
    _, _, k_h, k_w = p.weight.dims
    gy = grad_y.data.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, p.out_channels)

    grad_w = (gy.T @ cache.cols).reshape(p.weight.dims)
    grad_b = gy.sum(axis=0) if p.bias is not None else None

    w_mat = p.weight.data.reshape(p.out_channels, -1)
    gcols = (gy @ w_mat).reshape(n, h_out, w_out, c, k_h, k_w)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, kh, kw, Ho, Wo)

    pad = p.padding
    gx_pad = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    s = p.stride
    for i in range(k_h):
        for j in range(k_w):
            gx_pad[:, :, i : i + s * h_out : s, j : j + s * w_out : s] += gcols[:, :, i, j]
    gx = gx_pad[:, :, pad : pad + h, pad : pad + w]
    return Tensor._wrap(np.ascontiguousarray(gx)), grad_w, grad_b


@dataclass
class BnCache:
    x_hat: np.ndarray
    bn: BnParams


def batchnorm_fwd(x: Tensor, bn: BnParams) -> tuple[Tensor, BnCache]:
    """Inference-mode batch norm: fixed running stats, per-channel affine."""
    if x.dims[1] != bn.channels:
        raise ShapeError(f"input has {x.dims[1]} channels, bn expects {bn.channels}")
    shape = (1, bn.channels, 1, 1)
    x_hat = (x.data - bn.mu.reshape(shape)) / bn.sigma.reshape(shape)
    y = bn.gamma.reshape(shape) * x_hat + bn.beta.reshape(shape)
    return Tensor._wrap(y), BnCache(x_hat, bn)


def batchnorm(x: Tensor, bn: BnParams) -> Tensor:
    return batchnorm_fwd(x, bn)[0]


def batchnorm_bwd(grad_y: Tensor, cache: BnCache):
    """Gradients of batchnorm: returns (grad_x, grad_gamma, grad_beta).

    Running stats are buffers, not parameters, so no gradients for them.
    """
    if cache is None:
        raise StateError("batchnorm_bwd called without a forward cache")
    bn = cache.bn
    shape = (1, bn.channels, 1, 1)
    gy = grad_y.data
    grad_x = gy * (bn.gamma / bn.sigma).reshape(shape)
    grad_gamma = (gy * cache.x_hat).sum(axis=(0, 2, 3))
    grad_beta = gy.sum(axis=(0, 2, 3))
    return Tensor._wrap(grad_x), grad_gamma, grad_beta


@dataclass
class ReluCache:
    mask: np.ndarray


def relu_fwd(x: Tensor) -> tuple[Tensor, ReluCache]:
    mask = x.data > 0
    return Tensor._wrap(np.where(mask, x.data, 0.0)), ReluCache(mask)


def relu(x: Tensor) -> Tensor:
    return relu_fwd(x)[0]


def relu_bwd(grad_y: Tensor, cache: ReluCache) -> Tensor:
    if cache is None:
        raise StateError("relu_bwd called without a forward cache")
    return Tensor._wrap(np.where(cache.mask, grad_y.data, 0.0))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling along H and W."""
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._wrap(y)


def upsample2x_bwd(grad_y: Tensor) -> Tensor:
    """Adjoint of nearest 2x upsampling: sum each 2x2 block."""
    n, c, h2, w2 = grad_y.dims
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"upsample2x_bwd needs even spatial dims, got ({h2}, {w2})")
    g = grad_y.data.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
    return Tensor._wrap(np.ascontiguousarray(g))


def _check_same_dims(a: Tensor, b: Tensor, op: str):
    if a.dims != b.dims:
        raise ShapeError(f"{op} requires equal dims, got {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "add")
    return Tensor._wrap(a.data + b.data)


def add_bwd(grad_y: Tensor) -> tuple[Tensor, Tensor]:
    return grad_y, grad_y


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "sub")
    return Tensor._wrap(a.data - b.data)


def sub_bwd(grad_y: Tensor) -> tuple[Tensor, Tensor]:
    return grad_y, Tensor._wrap(-grad_y.data)
