"""Saturating Q5.10 fixed point: 16-bit raw values, value = raw / 1024."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAC_BITS = 10
SCALE = 1 << FRAC_BITS
RAW_MIN = -(1 << 15)
RAW_MAX = (1 << 15) - 1
MAX_SHIFT = 24


def saturate(raw):
    """Clip integers (scalar or array) to the signed 16-bit range."""
    if isinstance(raw, np.ndarray):
        return np.clip(raw, RAW_MIN, RAW_MAX).astype(np.int16)
    return max(RAW_MIN, min(RAW_MAX, int(raw)))


@dataclass(frozen=True)
class FxValue:
    raw: int

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ValueError(f"raw value {self.raw} outside int16")

    @property
    def value(self) -> float:
        return self.raw / SCALE

    @classmethod
    def of(cls, x: float) -> "FxValue":
        return fx_quantize(x)


def fx_quantize(x: float) -> FxValue:
    return FxValue(saturate(round(x * SCALE)))


def fx_sat_add(a: FxValue, b: FxValue) -> FxValue:
    return FxValue(saturate(a.raw + b.raw))


def fx_shift(x, k: int) -> int:
    """Shift an FxValue (or a wide raw integer) by ``k`` bits.

    Left shifts are exact in the wide lane; right shifts are arithmetic and
    round toward minus infinity. Returns the wide raw integer.
    """
    if abs(k) > MAX_SHIFT:
        raise ValueError(f"shift amount {k} exceeds {MAX_SHIFT}")
    raw = x.raw if isinstance(x, FxValue) else int(x)
    return raw << k if k >= 0 else raw >> -k


def fx_relu(x: FxValue) -> FxValue:
    return FxValue(max(x.raw, 0))


@dataclass(frozen=True)
class FxTensor:
    raw: np.ndarray  # int16, row-major

    def __post_init__(self):
        if self.raw.dtype != np.int16:
            object.__setattr__(self, "raw", saturate(np.asarray(self.raw)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.raw.shape

    def to_float(self) -> np.ndarray:
        return self.raw.astype(np.float64) / SCALE

    @classmethod
    def from_float(cls, x) -> "FxTensor":
        return cls(quantize_array(x))


def quantize_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return saturate(np.rint(x * SCALE).astype(np.int64))


def relu_array(raw: np.ndarray) -> np.ndarray:
    return np.maximum(raw, 0).astype(raw.dtype)


def sat_add_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return saturate(a.astype(np.int64) + b.astype(np.int64))
