"""Dense 4-D tensors (N, C, H, W) and the conv/BN parameter records.

Everything is stored as float64: this layer is the correctness reference
for the integer path, so precision wins over speed at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

Dims = tuple[int, int, int, int]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class Tensor:
    """Immutable 4-D float64 array with (batch, channels, height, width) layout."""

    __slots__ = ("data",)

    def __init__(self, data, *, check_finite: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (N,C,H,W), got ndim={arr.ndim}")
        if check_finite and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        self.data = _freeze(arr)

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def zeros(cls, dims: Dims) -> "Tensor":
        return cls._wrap(np.zeros(dims, dtype=np.float64))

    @classmethod
    def full(cls, dims: Dims, value: float) -> "Tensor":
        return cls._wrap(np.full(dims, float(value), dtype=np.float64))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: caller guarantees float64, 4-D, finite.
        t = object.__new__(cls)
        t.data = _freeze(arr)
        return t

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


@dataclass(frozen=True)
class ConvParams:
    """2-D convolution parameters: weight (C_out, C_in, k_h, k_w), optional bias."""

    weight: Tensor
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        c_out, c_in, k_h, k_w = self.weight.dims
        if k_h < 1 or k_w < 1:
            raise ShapeError(f"kernel extents must be >= 1, got ({k_h}, {k_w})")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (c_out,):
                raise ShapeError(f"bias shape {b.shape} != ({c_out},)")
            if not np.all(np.isfinite(b)):
                raise NumericError("conv bias contains NaN or Inf")
            object.__setattr__(self, "bias", _freeze(b))

    @property
    def out_channels(self) -> int:
        return self.weight.dims[0]

    @property
    def in_channels(self) -> int:
        return self.weight.dims[1]


@dataclass(frozen=True)
class BnParams:
    """Per-channel batch-norm statistics and affine parameters (inference mode)."""

    mu: np.ndarray
    sigma_sq: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        vecs = {}
        for name in ("mu", "sigma_sq", "gamma", "beta"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim != 1:
                raise ShapeError(f"bn {name} must be 1-D, got ndim={v.ndim}")
            if not np.all(np.isfinite(v)):
                raise NumericError(f"bn {name} contains NaN or Inf")
            vecs[name] = v
        n = vecs["mu"].shape[0]
        for name, v in vecs.items():
            if v.shape[0] != n:
                raise ShapeError("bn parameter vectors must share one channel count")
            object.__setattr__(self, name, _freeze(v))
        if np.any(vecs["sigma_sq"] < 0):
            raise NumericError("bn sigma_sq must be >= 0 elementwise")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise NumericError(f"bn epsilon must be a positive float, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        """Effective per-channel std: sqrt(sigma_sq + epsilon)."""
        return np.sqrt(self.sigma_sq + self.epsilon)
