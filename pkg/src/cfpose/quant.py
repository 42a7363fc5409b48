"""Learned-step-size quantization and exact integer convolution.

A quantizer is a step size (scale) plus a bit-width/signedness spec.
Values are divided by the scale, clipped to the code range, and rounded
half away from zero. The scale is trainable: its gradient follows the
straight-through estimator with the per-tensor normalizer
``1/sqrt(numel * q_pos)``.

Integer convolution accumulates products of codes exactly. Before running
it, an a-priori worst-case bound on the accumulator is checked; when that
bound fits in float64's exact-integer window (< 2**53) the matmul runs in
float64 (fast via BLAS, still exact), otherwise in int64, otherwise it
refuses rather than wrap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, ShapeError
from .ops import window_cols
from .tensor import Tensor

SCALE_FLOOR = 1e-8
_FLOAT_EXACT_MAX = 2**53 - 1
_INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, signedness, and step size of one quantizer.

    Signed codes span [-2**(b-1), 2**(b-1)-1]; unsigned span [0, 2**b-1].
    """

    bit_width: int
    signed: bool
    scale: float = 1.0

    def __post_init__(self):
        if not (2 <= int(self.bit_width) <= 8):
            raise ValueError(f"bit width must be in [2, 8], got {self.bit_width}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise NumericError(f"quantizer scale must be positive and finite, got {self.scale}")

    @property
    def q_neg(self) -> int:
        """Lower clip limit (a non-positive integer)."""
        return -(2 ** (self.bit_width - 1)) if self.signed else 0

    @property
    def q_pos(self) -> int:
        """Upper clip limit."""
        return 2 ** (self.bit_width - 1) - 1 if self.signed else 2**self.bit_width - 1

    def with_scale(self, scale: float) -> "QuantSpec":
        return replace(self, scale=float(scale))


class QTensor:
    """Integer code tensor plus the spec that produced it."""

    __slots__ = ("codes", "spec")

    def __init__(self, codes, spec: QuantSpec):
        arr = np.asarray(codes)
        if arr.ndim != 4:
            raise ShapeError(f"quantized tensor must be 4-D, got ndim={arr.ndim}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ShapeError(f"quantized tensor requires integer codes, got {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=np.int64)
        if arr.size and (arr.min() < spec.q_neg or arr.max() > spec.q_pos):
            raise NumericError(
                f"codes outside [{spec.q_neg}, {spec.q_pos}] for {spec.bit_width}-bit spec"
            )
        arr.flags.writeable = False
        self.codes = arr
        self.spec = spec

    @property
    def dims(self):
        return self.codes.shape

    def __repr__(self) -> str:
        sign = "s" if self.spec.signed else "u"
        return f"QTensor(dims={self.dims}, {self.spec.bit_width}{sign}, scale={self.spec.scale:g})"


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (not banker's)."""
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_array(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Clip-then-round to integer codes (int64), array in, array out."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot quantize non-finite values")
    v = np.clip(x / spec.scale, spec.q_neg, spec.q_pos)
    return round_half_away(v).astype(np.int64)


def quantize(x: Tensor, spec: QuantSpec) -> QTensor:
    return QTensor(quantize_array(x.data, spec), spec)


def dequantize(q: QTensor) -> Tensor:
    return Tensor._wrap(q.codes.astype(np.float64) * q.spec.scale)


def fake_quant(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize in float: the training-time view of a quantizer."""
    return quantize_array(x, spec).astype(np.float64) * spec.scale


def init_scale(x: np.ndarray, spec: QuantSpec) -> float:
    """Data-driven step-size init: 2 * mean|x| / sqrt(q_pos), floored at 1e-8."""
    if np.asarray(x).size == 0:
        raise ShapeError("cannot initialize a scale from an empty tensor")
    s = 2.0 * float(np.mean(np.abs(x))) / np.sqrt(spec.q_pos)
    return max(s, SCALE_FLOOR)


def lsq_backward(x: np.ndarray, spec: QuantSpec, upstream: np.ndarray):
    """Backward pass of the quantize-dequantize map w.r.t. input and scale.

    Straight-through: in-range elements pass the upstream gradient to x
    unchanged and contribute (round(v) - v) to the scale gradient; clipped
    elements block the input gradient and contribute their clip limit.
    The scale gradient carries the 1/sqrt(numel * q_pos) normalizer.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    v = x / spec.scale
    below = v < spec.q_neg
    above = v > spec.q_pos
    in_range = ~(below | above)

    grad_x = np.where(in_range, upstream, 0.0)

    dyds = np.where(in_range, round_half_away(v) - v, 0.0)
    dyds = np.where(below, float(spec.q_neg), dyds)
    dyds = np.where(above, float(spec.q_pos), dyds)
    norm = 1.0 / np.sqrt(x.size * spec.q_pos)
    grad_scale = float(np.sum(upstream * dyds)) * norm
    return grad_x, grad_scale


def accumulator_bound(w_codes: np.ndarray, x_abs_max: int) -> int:
    """Worst-case |accumulator| for one output element, as an exact python int.

    Bound: max over output channels of sum|w| times the largest activation
    magnitude. Bias is not part of the integer domain.
    """
    w = np.asarray(w_codes)
    if w.size == 0:
        return 0
    abs_sums = np.abs(w.astype(object)).reshape(w.shape[0], -1).sum(axis=1)
    return int(abs_sums.max()) * int(x_abs_max)


def qconv_codes(
    x_codes: np.ndarray, w_codes: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Exact integer convolution on raw code arrays; returns int64 accumulators."""
    if x_codes.ndim != 4 or w_codes.ndim != 4:
        raise ShapeError("integer conv expects 4-D code arrays (N,C,H,W) and (Co,Ci,kh,kw)")
    n, c, h, w = x_codes.shape
    c_out, c_in, k_h, k_w = w_codes.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weight expects {c_in}")
    if not (np.issubdtype(x_codes.dtype, np.integer) and np.issubdtype(w_codes.dtype, np.integer)):
        raise ShapeError("integer conv operands must be integer arrays")

    x_abs_max = int(np.abs(x_codes).max()) if x_codes.size else 0
    bound = accumulator_bound(w_codes, x_abs_max)
    if bound > _INT64_MAX:
        raise NumericError(f"integer conv accumulator may overflow int64 (bound {bound})")

    if bound <= _FLOAT_EXACT_MAX:
        cols, (h_out, w_out) = window_cols(x_codes.astype(np.float64), k_h, k_w, stride, padding)
        acc = (cols @ w_codes.reshape(c_out, -1).astype(np.float64).T).astype(np.int64)
    else:
        cols, (h_out, w_out) = window_cols(x_codes.astype(np.int64), k_h, k_w, stride, padding)
        acc = cols @ w_codes.reshape(c_out, -1).astype(np.int64).T
    return np.ascontiguousarray(acc.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))


@dataclass(frozen=True)
class QAccum:
    """Integer conv output: raw accumulators plus the combined rescale s_w * s_a."""

    values: np.ndarray
    scale: float

    def dequantize(self, bias: np.ndarray | None = None) -> Tensor:
        y = self.values.astype(np.float64) * self.scale
        if bias is not None:
            y = y + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
        return Tensor._wrap(y)


def qconv(w: QTensor, a: QTensor, stride: int = 1, padding: int = 0) -> QAccum:
    """Integer convolution of quantized weights with quantized activations."""
    acc = qconv_codes(a.codes, w.codes, stride, padding)
    return QAccum(acc, w.spec.scale * a.spec.scale)
