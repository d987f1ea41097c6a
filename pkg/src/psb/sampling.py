"""Deterministic random streams and the shift-selection samplers.

Every stream is a Philox counter generator keyed by ``(base_seed,
stream_id)``, so identical keys reproduce identical bits on any platform
and distinct keys give independent sequences without coordination.
Samplers only ever consume ``random_raw`` 64-bit words, which keeps the
output independent of numpy's distribution code.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, InvalidInput

MASK64 = (1 << 64) - 1
MAX_N = 4096


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_stream_id(*parts: int) -> int:
    """Hash a tuple of non-negative integers into a 64-bit stream id."""
    h = 0x243F6A8885A308D3
    for p in parts:
        h = splitmix64(h ^ (int(p) & MASK64))
    return h


class RngStream:
    """Single-owner random stream. Not safe to share between threads."""

    def __init__(self, base_seed: int = 0, stream_id: int = 0):
        self.base_seed = int(base_seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        key = np.array([self.base_seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self):
        return f"RngStream(base_seed={self.base_seed}, stream_id={self.stream_id:#x})"

    def child(self, *parts: int) -> "RngStream":
        return RngStream(self.base_seed, derive_stream_id(self.stream_id, *parts))

    def raw(self, size) -> np.ndarray:
        n = int(np.prod(size))
        out = self._bitgen.random_raw(n) if n else np.empty(0, dtype=np.uint64)
        return np.asarray(out, dtype=np.uint64).reshape(size)

    def uniform_bits(self, bits: int, size) -> np.ndarray:
        """Uniform integers in ``[0, 2**bits)`` from the top bits of each word."""
        return (self.raw(size) >> np.uint64(64 - bits)).astype(np.int64)

    def uniform(self, size) -> np.ndarray:
        """Uniform doubles strictly inside (0, 1)."""
        top = (self.raw(size) >> np.uint64(11)).astype(np.float64)
        return (top + 0.5) * 2.0**-53


def _check_prob(prob_num, prob_bits):
    pn = np.asarray(prob_num)
    if np.any(pn < 0) or np.any(pn >= (1 << prob_bits)):
        raise InvalidInput(f"prob_num must lie in [0, 2**{prob_bits})")


def bernoulli_bit(stream: RngStream, prob_num: int, prob_bits: int) -> int:
    """One comparator draw: 1 iff a fresh ``prob_bits``-bit integer < prob_num."""
    _check_prob(prob_num, prob_bits)
    return int(stream.uniform_bits(prob_bits, 1)[0] < prob_num)


def bernoulli_bits(stream: RngStream, prob_num, prob_bits: int, n: int) -> np.ndarray:
    """Bits of shape ``(len(prob_num), n)``; samples are the innermost axis."""
    prob_num = np.asarray(prob_num, dtype=np.int64).reshape(-1)
    _check_prob(prob_num, prob_bits)
    u = stream.uniform_bits(prob_bits, (prob_num.size, n))
    return (u < prob_num[:, None]).astype(np.int8)


def binomial_direct(stream: RngStream, n: int, prob_num: int, prob_bits: int) -> int:
    if n < 1:
        raise InvalidInput("n must be >= 1")
    return int(bernoulli_bits(stream, [prob_num], prob_bits, n).sum())


def binomial_direct_counts(stream: RngStream, prob_num, prob_bits: int, n: int) -> np.ndarray:
    """Vectorized binomial_direct, one count per entry of ``prob_num``."""
    prob_num = np.asarray(prob_num, dtype=np.int64).reshape(-1)
    _check_prob(prob_num, prob_bits)
    out = np.empty(prob_num.size, dtype=np.int64)
    # bounded memory for large n
    chunk = max(1, (1 << 22) // max(n, 1))
    for lo in range(0, prob_num.size, chunk):
        pn = prob_num[lo:lo + chunk]
        u = stream.uniform_bits(prob_bits, (pn.size, n))
        out[lo:lo + chunk] = np.count_nonzero(u < pn[:, None], axis=1)
    return out


def _build_log_factorial(nmax: int) -> np.ndarray:
    k = np.arange(1, nmax + 1, dtype=np.longdouble)
    table = np.zeros(nmax + 1, dtype=np.longdouble)
    table[1:] = np.cumsum(np.log(k))
    return table


LOG_FACTORIAL = _build_log_factorial(MAX_N)


def log_binomial_coefficients(n: int) -> np.ndarray:
    if not 0 <= n <= MAX_N:
        raise InvalidInput(f"n must be in [0, {MAX_N}]")
    k = np.arange(n + 1)
    return (LOG_FACTORIAL[n] - LOG_FACTORIAL[k] - LOG_FACTORIAL[n - k]).astype(np.float64)


def _log_binomial_pmf_terms(n: int, p: float) -> np.ndarray:
    k = np.arange(n + 1)
    terms = log_binomial_coefficients(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        if p == 0.0:
            terms = np.where(k == 0, terms, -np.inf)
        elif p == 1.0:
            terms = np.where(k == n, terms, -np.inf)
        else:
            terms = terms + k * math.log(p) + (n - k) * math.log1p(-p)
    return terms


def binomial_gumbel_counts(stream: RngStream, n: int, p: float, size: int) -> np.ndarray:
    """``size`` Binomial(n, p) draws via the Gumbel-max trick.

    Each draw uses ``n + 1`` uniforms, one per outcome ``k``.
    """
    if n < 1:
        raise InvalidInput("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise InvalidInput("p must lie in [0, 1]")
    terms = _log_binomial_pmf_terms(n, p)
    u = stream.uniform((size, n + 1))
    gumbel = -np.log(-np.log(u))
    return np.argmax(terms[None, :] + gumbel, axis=1).astype(np.int64)


def binomial_gumbel(stream: RngStream, n: int, p: float) -> int:
    return int(binomial_gumbel_counts(stream, n, p, 1)[0])


def binomial_gumbel_vec(stream: RngStream, prob, n: int) -> np.ndarray:
    """One Gumbel-max draw per entry of ``prob`` (may differ per entry)."""
    prob = np.asarray(prob, dtype=np.float64).reshape(-1)
    out = np.empty(prob.size, dtype=np.int64)
    u = stream.uniform((prob.size, n + 1))
    gumbel = -np.log(-np.log(u))
    # entries sharing a probability share the log-pmf row
    uniq, inv = np.unique(prob, return_inverse=True)
    rows = np.stack([_log_binomial_pmf_terms(n, float(q)) for q in uniq])
    out[:] = np.argmax(rows[inv] + gumbel, axis=1)
    return out


def deterministic_count(n: int, prob_num: int, prob_bits: int) -> int:
    """Larger-shift count for the sampling-free schedule: exactly ``p * n``."""
    if n != (1 << prob_bits):
        raise ConfigError(f"deterministic schedule needs n == 2**prob_bits ({1 << prob_bits}), got {n}")
    _check_prob(prob_num, prob_bits)
    return int(prob_num)
