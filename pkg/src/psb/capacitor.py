"""Capacitor units: n-fold stochastic shift-accumulate kernels.

A product ``x * w`` with ``w = s * 2**e * (1 + p)`` is replaced by ``n``
shifted copies ``x << (e + b_i)`` with ``b_i ~ Bernoulli(p)``, summed, then
divided by ``n = 2**m`` with a right shift. Summing the shifts is the same
as ``s * x * 2**e * (n + c)`` with ``c = sum(b_i)``, which is how the
kernels evaluate it.

The accumulator carries ``G`` extra fractional bits, ``G = max(0,
-min exponent)``, so every individual shift is a left shift and the sum is
exact. The single rounding is the arithmetic (floor) right shift by
``m + G`` when the capacitor is read out into Q5.10.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import fixedpoint as fx
from .encoding import PsbTensor
from .errors import ConfigError, ShapeMismatch
from .sampling import MAX_N, RngStream, binomial_direct_counts, binomial_gumbel_vec

_INT64_HEADROOM = 62


class Mode(str, enum.Enum):
    PER_CALL_FILTER = "per_call_filter"
    PER_POSITION = "per_position"
    DETERMINISTIC = "deterministic"
    MEAN_ORACLE = "mean_oracle"


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 16
    mode: Mode = Mode.PER_CALL_FILTER
    sampler: str = "direct"
    prob_bits: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.n < 1 or self.n > MAX_N or self.n & (self.n - 1):
            raise ConfigError(f"n must be a power of two in [1, {MAX_N}], got {self.n}")
        if self.sampler not in ("direct", "gumbel"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.mode is Mode.DETERMINISTIC and self.prob_bits is not None:
            if self.n != 1 << self.prob_bits:
                raise ConfigError(
                    f"deterministic mode needs n == 2**prob_bits = {1 << self.prob_bits}, got {self.n}")

    @property
    def m(self) -> int:
        return self.n.bit_length() - 1

    @property
    def stochastic(self) -> bool:
        return self.mode in (Mode.PER_CALL_FILTER, Mode.PER_POSITION)

    def with_n(self, n: int) -> "SamplingConfig":
        return SamplingConfig(n, self.mode, self.sampler, self.prob_bits)


@dataclass(frozen=True)
class Wide:
    """Wide accumulator value ``raw / 2**frac_bits``."""

    raw: int
    frac_bits: int

    @property
    def value(self) -> float:
        return math.ldexp(float(self.raw), -self.frac_bits) if abs(self.raw) < 2**53 \
            else float(self.raw) / 2.0**self.frac_bits

    def to_fx(self) -> fx.FxValue:
        return fx.FxValue(fx.saturate(self.raw >> (self.frac_bits - fx.FRAC_BITS)))


def guard_bits(weights: PsbTensor) -> int:
    live = weights.exponent[~weights.zero]
    return max(0, -int(live.min())) if live.size else 0


def _effective_n(weights: PsbTensor, cfg: SamplingConfig, n: int) -> int:
    if cfg.mode is Mode.MEAN_ORACLE:
        return 1 << weights.prob_bits
    if cfg.mode is Mode.DETERMINISTIC and n != 1 << weights.prob_bits:
        raise ConfigError(f"deterministic mode needs n == 2**prob_bits = {1 << weights.prob_bits}, got {n}")
    return n


def draw_counts(weights: PsbTensor, cfg: SamplingConfig, stream: RngStream | None,
                n: int | None = None, repeats: int = 1) -> tuple[np.ndarray, int]:
    """Larger-shift counts, shape ``(repeats, *weights.shape)``.

    Stochastic modes consume ``stream`` over the nonzero weights in
    row-major order (samples innermost), ``repeats`` blocks one after the
    other. Zero weights draw nothing and get count 0.
    """
    n = cfg.n if n is None else n
    n_eff = _effective_n(weights, cfg, n)
    flat_pn = weights.prob_num.reshape(-1)
    live = ~weights.zero.reshape(-1)
    counts = np.zeros((repeats, flat_pn.size), dtype=np.int64)
    if cfg.stochastic:
        pn = flat_pn[live]
        # both samplers read the stream row-major, so a block of tiled
        # repeats consumes it exactly as one call per repeat would
        block = max(1, (1 << 22) // max(1, pn.size * (n + 1)))
        for lo in range(0, repeats, block):
            r = min(block, repeats - lo)
            tiled = np.tile(pn, r)
            if cfg.sampler == "direct":
                c = binomial_direct_counts(stream, tiled, weights.prob_bits, n)
            else:
                c = binomial_gumbel_vec(stream, tiled / float(1 << weights.prob_bits), n)
            counts[lo:lo + r, live] = c.reshape(r, pn.size)
    else:
        counts[:, live] = flat_pn[live]
    return counts.reshape((repeats,) + weights.shape), n_eff


def multipliers(weights: PsbTensor, counts: np.ndarray, n_eff: int, guard: int) -> np.ndarray:
    """Integer stand-ins ``s * (n + c) << (e + G)``; zero weights give 0."""
    shift = (weights.exponent.astype(np.int64) + guard)
    shift = np.where(weights.zero, 0, shift)
    m = (n_eff + counts) << shift
    m = m * weights.sign
    return np.where(weights.zero, 0, m)


def _needs_object(n_eff: int, weights: PsbTensor, guard: int, fan_in: int) -> bool:
    live = weights.exponent[~weights.zero]
    emax = int(live.max()) if live.size else 0
    bits = 16 + math.ceil(math.log2(2 * n_eff)) + emax + guard + math.ceil(math.log2(max(fan_in, 1)))
    return bits > _INT64_HEADROOM


def stochastic_mac(x, weights: PsbTensor, cfg: SamplingConfig, stream: RngStream | None = None) -> Wide:
    """One capacitor preactivation ``sum_i x_i * w_i`` averaged over ``n`` samples.

    ``x`` holds Q5.10 raw integers. The result is exact (no rounding), with
    ``10 + G + m`` fractional bits.
    """
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    weights = weights.reshape(-1)
    if x.size != weights.size or x.size == 0:
        raise ShapeMismatch(f"x has {x.size} entries, weights {weights.size}")
    counts, n_eff = draw_counts(weights, cfg, stream)
    return binomial_form_mac(x, weights, counts[0], n_eff)


def binomial_form_mac(x, weights: PsbTensor, counts, n: int, guard: int | None = None) -> Wide:
    """``sum_i s_i * x_i * 2**e_i * (n + c_i) / n`` in the wide lane."""
    g = guard_bits(weights) if guard is None else guard
    m = n.bit_length() - 1
    mult = multipliers(weights.reshape(-1), np.asarray(counts, dtype=np.int64).reshape(-1), n, g)
    acc = sum(int(a) * int(b) for a, b in zip(np.asarray(x).reshape(-1), mult))
    return Wide(acc, fx.FRAC_BITS + g + m)


def shift_form_mac(x, weights: PsbTensor, bits, guard: int | None = None) -> Wide:
    """Literal hardware form: ``sum_i s_i * sum_j (x_i << (e_i + b_ij))``, then ``>> m``.

    ``bits`` has shape ``(d, n)``.
    """
    weights = weights.reshape(-1)
    bits = np.asarray(bits, dtype=np.int64)
    n = bits.shape[1]
    g = guard_bits(weights) if guard is None else guard
    acc = 0
    for xi, s, e, z, row in zip(np.asarray(x).reshape(-1), weights.sign, weights.exponent,
                                weights.zero, bits):
        if z:
            continue
        lane = 0
        for b in row:
            lane += int(xi) << (int(e) + int(b) + g)
        acc += int(s) * lane
    return Wide(acc, fx.FRAC_BITS + g + n.bit_length() - 1)


def _readout(acc: np.ndarray, guard: int, m: int, bias: np.ndarray) -> np.ndarray:
    out = acc >> (guard + m)
    return fx.saturate(np.asarray(out + np.asarray(bias, dtype=np.int64), dtype=np.int64))


def _int_matmul(a: np.ndarray, b: np.ndarray, wide: bool) -> np.ndarray:
    if wide:
        return np.asarray(a.astype(object) @ b.astype(object))
    return a @ b


def dense_kernel(x: np.ndarray, W: PsbTensor, bias, cfg: SamplingConfig,
                 stream: RngStream | None, n: int | None = None) -> tuple[np.ndarray, int]:
    """Dense capacitor layer on raw Q5.10 input; returns (raw int16 output, ops)."""
    n = cfg.n if n is None else n
    d_out, d_in = W.shape
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size != d_in:
        raise ShapeMismatch(f"dense expects {d_in} inputs, got {x.size}")
    bias = np.zeros(d_out, dtype=np.int64) if bias is None else np.asarray(bias, dtype=np.int64)
    if bias.shape != (d_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({d_out},)")
    g = guard_bits(W)
    sub = stream.child(n) if cfg.stochastic else None
    counts, n_eff = draw_counts(W, cfg, sub, n)
    M = multipliers(W, counts[0], n_eff, g)
    acc = _int_matmul(M, x, _needs_object(n_eff, W, g, d_in))
    out = _readout(acc, g, n_eff.bit_length() - 1, bias)
    return out, W.nonzero_count * n


def dense_forward(x: fx.FxTensor, W: PsbTensor, bias, cfg: SamplingConfig,
                  stream: RngStream | None = None) -> fx.FxTensor:
    """Capacitor dense layer: average, add bias, saturate. No non-linearity."""
    return fx.FxTensor(dense_kernel(x.raw, W, bias, cfg, stream)[0])


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> tuple[np.ndarray, int, int]:
    """Patches of an ``(H, W, C)`` array as ``(Ho * Wo, kh * kw * C)``."""
    H, W_, C = x.shape
    if padding == "same":
        Ho, pt, pb = same_padding(H, kh, stride)
        Wo, pl, pr = same_padding(W_, kw, stride)
        x = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    elif padding == "valid":
        if H < kh or W_ < kw:
            raise ShapeMismatch(f"kernel {kh}x{kw} larger than input {H}x{W_}")
        Ho, Wo = (H - kh) // stride + 1, (W_ - kw) // stride + 1
    else:
        raise ShapeMismatch(f"unknown padding {padding!r}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride][:Ho, :Wo]  # (Ho, Wo, C, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(Ho * Wo, kh * kw * C)
    return cols, Ho, Wo


def conv2d_kernel(x: np.ndarray, K: PsbTensor, bias, stride: int, padding: str,
                  cfg: SamplingConfig, stream: RngStream | None,
                  n_map: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Capacitor convolution on raw ``(H, W, C_in)`` input.

    ``n_map`` optionally assigns a sample count to every output position.
    Counts for budget ``n`` are drawn from ``stream.child(n)``, so a
    position's result depends only on its own budget.
    """
    kh, kw, cin, cout = K.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise ShapeMismatch(f"conv expects (H, W, {cin}) input, got {x.shape}")
    bias = np.zeros(cout, dtype=np.int64) if bias is None else np.asarray(bias, dtype=np.int64)
    if bias.shape != (cout,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({cout},)")
    cols, Ho, Wo = im2col(np.asarray(x, dtype=np.int64), kh, kw, stride, padding)
    P = Ho * Wo
    if n_map is None:
        n_map = np.full((Ho, Wo), cfg.n, dtype=np.int64)
    n_map = np.asarray(n_map, dtype=np.int64)
    if n_map.shape != (Ho, Wo):
        raise ShapeMismatch(f"n_map shape {n_map.shape} != {(Ho, Wo)}")
    flat_n = n_map.reshape(-1)
    g = guard_bits(K)
    Kf = K.reshape(kh * kw * cin, cout)
    out = np.empty((P, cout), dtype=np.int16)
    ops = 0
    for n in np.unique(flat_n):
        n = int(n)
        sel = np.flatnonzero(flat_n == n)
        sub = stream.child(n) if cfg.stochastic else None
        per_pos = cfg.mode is Mode.PER_POSITION
        counts, n_eff = draw_counts(Kf, cfg, sub, n, repeats=sel.size if per_pos else 1)
        wide = _needs_object(n_eff, Kf, g, Kf.shape[0])
        M = multipliers(Kf, counts, n_eff, g)
        if per_pos:
            if wide:
                acc = np.array([cols[p].astype(object) @ M[i].astype(object) for i, p in enumerate(sel)])
            else:
                acc = np.einsum("pk,pkc->pc", cols[sel], M)
        else:
            acc = _int_matmul(cols[sel], M[0], wide)
        out[sel] = _readout(acc, g, n_eff.bit_length() - 1, bias[None, :])
        ops += Kf.nonzero_count * n * sel.size
    return out.reshape(Ho, Wo, cout), ops


def conv2d_forward(x: fx.FxTensor, K: PsbTensor, bias, stride: int = 1, padding: str = "same",
                   cfg: SamplingConfig = SamplingConfig(), stream: RngStream | None = None) -> fx.FxTensor:
    return fx.FxTensor(conv2d_kernel(x.raw, K, bias, stride, padding, cfg, stream)[0])
