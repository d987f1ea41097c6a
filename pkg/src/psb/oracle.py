"""Reference paths everything else is checked against.

``float_forward`` evaluates a float model in float64. ``enumerate_expectation``
brute-forces every Bernoulli outcome of a small capacitor and returns its
exact mean and variance as fractions.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .encoding import PsbTensor
from .errors import InvalidInput, ModelError, ShapeMismatch
from .sampling import MAX_N, log_binomial_coefficients

MAX_ENUMERATION_BITS = 20


@dataclass(frozen=True)
class StatSummary:
    mean: float
    variance: float
    count: int

    @property
    def radius(self) -> float:
        """4-sigma confidence radius of the mean."""
        return 4.0 * math.sqrt(self.variance / self.count)

    @classmethod
    def of(cls, samples) -> "StatSummary":
        s = np.asarray(samples, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise InvalidInput("no samples")
        return cls(float(s.mean()), float(s.var(ddof=1)) if s.size > 1 else 0.0, int(s.size))


def exact_binomial_pmf(n: int, p: float) -> np.ndarray:
    if not 0 <= n <= MAX_N:
        raise InvalidInput(f"n must be in [0, {MAX_N}]")
    k = np.arange(n + 1)
    if p == 0.0:
        return (k == 0).astype(np.float64)
    if p == 1.0:
        return (k == n).astype(np.float64)
    logs = log_binomial_coefficients(n) + k * math.log(p) + (n - k) * math.log1p(-p)
    pmf = np.exp(logs - logs.max())
    return pmf / pmf.sum()


def enumerate_expectation(x, weights: PsbTensor, n: int) -> tuple[Fraction, Fraction]:
    """Exact mean and variance of ``sum_i x_i * w_i`` under n-sample capacitors.

    Walks all ``2**(d*n)`` Bernoulli outcomes. ``x`` entries are real
    numbers (converted exactly to fractions).
    """
    w = weights.reshape(-1)
    xs = [Fraction(v) for v in np.asarray(x, dtype=np.float64).reshape(-1)]
    if len(xs) != w.size:
        raise ShapeMismatch("x and weights differ in length")
    d = len(xs)
    if d * n > MAX_ENUMERATION_BITS:
        raise InvalidInput(f"d*n = {d * n} exceeds {MAX_ENUMERATION_BITS}; enumeration refused")
    full = 1 << w.prob_bits
    # per-weight: value contributed per larger-shift bit, base value, bit probabilities
    base, step, probs = [], [], []
    for i in range(d):
        if w.zero[i]:
            base.append(Fraction(0))
            step.append(Fraction(0))
            probs.append((full, 0))
            continue
        unit = xs[i] * int(w.sign[i]) * Fraction(2) ** int(w.exponent[i])
        base.append(unit)
        step.append(unit / n)
        k = int(w.prob_num[i])
        probs.append((full - k, k))
    total_base = sum(base)
    denom = full ** (d * n)
    s1 = Fraction(0)
    s2 = Fraction(0)
    for outcome in itertools.product((0, 1), repeat=d * n):
        weight = 1
        val = total_base
        for j, b in enumerate(outcome):
            i = j // n
            weight *= probs[i][b]
            if weight == 0:
                break
            if b:
                val += step[i]
        if weight == 0:
            continue
        s1 += weight * val
        s2 += weight * val * val
    mean = s1 / denom
    return mean, s2 / denom - mean * mean


def relative_logit_error(approx, reference) -> np.ndarray:
    """Per-row ``||approx - reference|| / ||reference||``."""
    a = np.atleast_2d(np.asarray(approx, dtype=np.float64))
    r = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    den = np.linalg.norm(r, axis=1)
    return np.linalg.norm(a - r, axis=1) / np.where(den == 0, 1.0, den)


# float kernels -------------------------------------------------------------

def _pool_windows(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(0, 1))
    return win[::stride, ::stride]  # (Ho, Wo, C, size, size)


def conv2d_float(x, w, bias, stride=1, padding="same"):
    from .capacitor import im2col

    kh, kw, cin, cout = w.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise ShapeMismatch(f"conv expects (H, W, {cin}) input, got {x.shape}")
    cols, Ho, Wo = im2col(x, kh, kw, stride, padding)
    y = cols @ w.reshape(-1, cout)
    if bias is not None:
        y = y + bias
    return y.reshape(Ho, Wo, cout)


def dense_float(x, w, bias):
    x = x.reshape(-1)
    if x.size != w.shape[1]:
        raise ShapeMismatch(f"dense expects {w.shape[1]} inputs, got {x.size}")
    y = w @ x
    return y if bias is None else y + bias


def float_layer(layer, args: list[np.ndarray]) -> np.ndarray:
    k = layer.kind
    x = args[0]
    if k == "conv2d":
        return conv2d_float(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if k == "dense":
        return dense_float(x, layer.weight, layer.bias)
    if k == "batchnorm":
        return x * layer.scale + layer.offset
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "add":
        if any(a.shape != x.shape for a in args):
            raise ShapeMismatch("add inputs differ in shape")
        return np.sum(args, axis=0)
    if k == "maxpool":
        return _pool_windows(x, layer.pool, layer.pool_stride or layer.pool).max(axis=(3, 4))
    # a stored shift means the pool divides by 2**shift, as in converted models
    if k == "avgpool":
        win = _pool_windows(x, layer.pool, layer.pool_stride or layer.pool)
        return win.mean(axis=(3, 4)) if layer.shift is None else win.sum(axis=(3, 4)) / 2.0 ** layer.shift
    if k == "global_avgpool":
        return x.mean(axis=(0, 1)) if layer.shift is None else x.sum(axis=(0, 1)) / 2.0 ** layer.shift
    if k == "flatten":
        return x.reshape(-1)
    raise ModelError(f"unknown layer kind {k!r}")


def float_forward(model, x, capture: str | None = None):
    """Float64 forward of a float model on one input or a batch.

    With ``capture`` set to a layer name, returns ``(logits, activation)``.
    """
    if model.is_psb:
        raise ModelError("float_forward needs a float model")
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.input_shape)
    batch = x[None] if single else x
    if batch.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatch(f"input shape {x.shape} does not match model {model.input_shape}")
    if np.isnan(batch).any():
        raise InvalidInput("NaN in input")
    outs, caps = [], []
    for item in batch:
        acts = {"input": item}
        for layer in model.layers:
            acts[layer.name] = float_layer(layer, [acts[i] for i in layer.inputs])
        out = acts[model.layers[-1].name]
        if np.isnan(out).any():
            raise InvalidInput(f"NaN produced in forward pass of {model.name}")
        outs.append(out)
        if capture:
            caps.append(acts[capture])
    logits = np.stack(outs)
    if single:
        logits = logits[0]
        caps = caps[:1]
    if capture:
        return logits, (caps[0] if single else np.stack(caps))
    return logits
