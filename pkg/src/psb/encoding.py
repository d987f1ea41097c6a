"""Sign / exponent / probability weight encoding.

A weight ``w`` is stored as ``s * 2**e * (1 + p)`` with ``p`` in ``[0, 1)``.
At inference time the mantissa ``1 + p`` is replaced by a random choice
between the shifts ``e`` and ``e + 1``, taking the larger one with
probability ``p``; the expectation is ``w`` again.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInput

# prob_bits=None means "unquantized": every float64 p in [0, 1) is a
# multiple of 2**-52, so a 52-bit grid reproduces it exactly.
EXACT_PROB_BITS = 52


@dataclass(frozen=True)
class EncodingConfig:
    prob_bits: int | None = 10
    exp_bits: int = 4

    def __post_init__(self):
        if self.prob_bits is not None and not 1 <= self.prob_bits <= 12:
            raise ConfigError(f"prob_bits must be in [1, 12], got {self.prob_bits}")
        if not 1 <= self.exp_bits <= 6:
            raise ConfigError(f"exp_bits must be in [1, 6], got {self.exp_bits}")

    @property
    def e_min(self) -> int:
        return -(1 << (self.exp_bits - 1))

    @property
    def e_max(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def grid_bits(self) -> int:
        return EXACT_PROB_BITS if self.prob_bits is None else self.prob_bits


@dataclass(frozen=True)
class PsbWeight:
    sign: int
    exponent: int
    prob_num: int
    is_zero: bool = False
    prob_bits: int = 10

    @property
    def p(self) -> float:
        return self.prob_num / (1 << self.prob_bits)


ZERO = PsbWeight(sign=1, exponent=0, prob_num=0, is_zero=True)


def quantize_probability(p: float, prob_bits: int) -> int:
    """Nearest point of the grid ``k / 2**prob_bits``, ``k < 2**prob_bits``.

    Ties go to the even numerator. The grid excludes 1, so values above the
    last grid point snap down to it.
    """
    if not (0.0 <= p < 1.0):
        raise InvalidInput(f"probability must lie in [0, 1), got {p!r}")
    k = round(p * (1 << prob_bits))  # float product is exact; round() is half-even
    return min(k, (1 << prob_bits) - 1)


def encode_weight(w: float, cfg: EncodingConfig = EncodingConfig()) -> PsbWeight:
    t = encode_array(np.asarray([w], dtype=np.float64), cfg)
    if t.zero[0]:
        return PsbWeight(1, 0, 0, True, t.prob_bits)
    return PsbWeight(int(t.sign[0]), int(t.exponent[0]), int(t.prob_num[0]), False, t.prob_bits)


def decode_mean(pw: PsbWeight) -> float:
    if pw.is_zero:
        return 0.0
    return pw.sign * math.ldexp(1.0 + pw.prob_num / (1 << pw.prob_bits), pw.exponent)


def variance_single(w: float) -> float:
    """Variance of one stochastic draw of ``w`` (unquantized probability)."""
    a = abs(w)
    if not math.isfinite(a) or a == 0.0:
        raise InvalidInput("variance_single needs a finite nonzero weight")
    e = math.frexp(a)[1] - 1
    p = math.ldexp(a, -e) - 1.0
    return p * (1.0 - p) * math.ldexp(1.0, 2 * e)


def relative_std_bound(n: int) -> float:
    if n < 1:
        raise InvalidInput("sample count must be >= 1")
    return 1.0 / math.sqrt(8.0 * n)


@dataclass(frozen=True)
class PsbTensor:
    """Array form of PsbWeight; all fields share ``shape``."""

    sign: np.ndarray  # int8, +1/-1
    exponent: np.ndarray  # int16
    prob_num: np.ndarray  # int64
    zero: np.ndarray  # bool
    prob_bits: int
    exp_bits: int = 4
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sign.shape

    @property
    def size(self) -> int:
        return int(self.sign.size)

    @property
    def nonzero_count(self) -> int:
        return int(self.size - np.count_nonzero(self.zero))

    def decode_mean(self) -> np.ndarray:
        mant = 1.0 + self.prob_num.astype(np.float64) / float(1 << self.prob_bits)
        out = self.sign * np.ldexp(mant, self.exponent.astype(np.int32))
        return np.where(self.zero, 0.0, out)

    def probabilities(self) -> np.ndarray:
        return self.prob_num / float(1 << self.prob_bits)

    def variance(self) -> np.ndarray:
        """Single-draw variance of each stored (quantized) weight."""
        p = self.probabilities()
        v = p * (1.0 - p) * np.ldexp(1.0, 2 * self.exponent.astype(np.int32))
        return np.where(self.zero, 0.0, v)

    def reshape(self, *shape) -> "PsbTensor":
        return PsbTensor(self.sign.reshape(*shape), self.exponent.reshape(*shape),
                         self.prob_num.reshape(*shape), self.zero.reshape(*shape),
                         self.prob_bits, self.exp_bits)

    def with_zeros(self, mask: np.ndarray) -> "PsbTensor":
        zero = self.zero | mask
        return PsbTensor(np.where(zero, 1, self.sign).astype(np.int8),
                         np.where(zero, 0, self.exponent).astype(np.int16),
                         np.where(zero, 0, self.prob_num).astype(np.int64),
                         zero, self.prob_bits, self.exp_bits)

    def __getitem__(self, idx) -> PsbWeight:
        if self.zero[idx]:
            return PsbWeight(1, 0, 0, True, self.prob_bits)
        return PsbWeight(int(self.sign[idx]), int(self.exponent[idx]),
                         int(self.prob_num[idx]), False, self.prob_bits)

    @classmethod
    def from_weights(cls, weights: list[PsbWeight], exp_bits: int = 4) -> "PsbTensor":
        bits = {w.prob_bits for w in weights if not w.is_zero} or {weights[0].prob_bits}
        if len(bits) != 1:
            raise InvalidInput("mixed prob_bits in one tensor")
        return cls(np.array([w.sign for w in weights], dtype=np.int8),
                   np.array([w.exponent for w in weights], dtype=np.int16),
                   np.array([w.prob_num for w in weights], dtype=np.int64),
                   np.array([w.is_zero for w in weights], dtype=bool),
                   bits.pop(), exp_bits)


def encode_array(w, cfg: EncodingConfig = EncodingConfig()) -> PsbTensor:
    """Vectorized encode_weight.

    Values below ``2**(e_min - 1)`` become explicit zeros, values in
    ``[2**(e_min - 1), 2**e_min)`` round up to ``2**e_min``, and values
    beyond the largest representable magnitude saturate. Probabilities round
    to the nearest grid point (ties to even); rounding up to ``p = 1`` carries
    into the next exponent.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InvalidInput("cannot encode non-finite weights")
    bits = cfg.grid_bits
    full = np.int64(1) << bits
    a = np.abs(w)
    _, ex = np.frexp(a)
    e = ex.astype(np.int64) - 1
    zero = (a == 0.0) | (a < math.ldexp(1.0, cfg.e_min - 1))
    low = ~zero & (e < cfg.e_min)
    high = ~zero & (e > cfg.e_max)
    e = np.clip(e, cfg.e_min, cfg.e_max)
    frac = np.ldexp(a, (-e).astype(np.int32)) - 1.0
    frac = np.clip(frac, 0.0, 1.0)
    k = np.rint(np.ldexp(frac, bits)).astype(np.int64)
    k[low] = 0
    carry = k >= full
    k[carry] = 0
    e = e + carry
    sat = high | (e > cfg.e_max)
    e[sat] = cfg.e_max
    k[sat] = full - 1
    sign = np.where(w < 0, -1, 1).astype(np.int8)
    k[zero] = 0
    e[zero] = 0
    sign[zero] = 1
    return PsbTensor(sign, e.astype(np.int16), k, zero, bits, cfg.exp_bits)
