"""Entropy-driven spatial sample budgets.

A cheap pass at ``n_low`` samples yields the last conv layer's activations.
Positions whose channel-softmax entropy exceeds the image mean are marked,
and a second pass spends ``n_high`` samples there and ``n_low`` elsewhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fixedpoint as fx
from .capacitor import SamplingConfig
from .errors import ConfigError, ModelError
from .graph import Model, forward_one, infer_shapes, parallel_map, predict_ops


@dataclass(frozen=True)
class EntropyMap:
    values: np.ndarray  # (H, W)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class BudgetMask:
    mask: np.ndarray  # (H, W) bool, True = high budget
    n_low: int
    n_high: int

    def __post_init__(self):
        if self.n_low > self.n_high:
            raise ConfigError(f"n_low ({self.n_low}) must not exceed n_high ({self.n_high})")

    @property
    def fraction(self) -> float:
        return float(np.mean(self.mask))


def entropy_map(activations) -> EntropyMap:
    """Per-pixel Shannon entropy (nats) of the softmax over channels."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] < 2:
        raise ModelError("entropy_map needs (H, W, C) activations with C >= 2")
    z = a - a.max(axis=2, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
    h = -(np.exp(logq) * logq).sum(axis=2)
    return EntropyMap(np.clip(h, 0.0, math.log(a.shape[2])))


def mask_from_entropy(em: EntropyMap, n_low: int, n_high: int) -> BudgetMask:
    h = em.values
    return BudgetMask(h > h.mean(), n_low, n_high)


def resample_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    H, W = mask.shape
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * H / shape[0]).astype(int), H - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * W / shape[1]).astype(int), W - 1)
    return mask[np.ix_(rows, cols)]


def last_conv(model: Model) -> tuple[str, str]:
    """Name of the last conv layer and of the activation read from it.

    The activation is the relu directly after that conv when there is one.
    """
    convs = [l for l in model.layers if l.kind == "conv2d"]
    if not convs:
        raise ModelError("computational attention needs at least one conv layer")
    conv = convs[-1]
    cons = model.consumers(conv.name)
    if len(cons) == 1 and cons[0].kind == "relu":
        return conv.name, cons[0].name
    return conv.name, conv.name


def budget_from_mask(model: Model, bm: BudgetMask, shapes=None) -> dict:
    shapes = shapes or infer_shapes(model)
    budget = {}
    for l in model.layers:
        if l.kind == "conv2d":
            Ho, Wo, _ = shapes[l.name]
            m = resample_nearest(bm.mask, (Ho, Wo))
            budget[l.name] = np.where(m, bm.n_high, bm.n_low).astype(np.int64)
    # dense layers see the whole image: high budget once any region is marked
    budget["dense_n"] = bm.n_high if bm.mask.any() else bm.n_low
    return budget


def conv_ops(ops: dict, model: Model) -> int:
    return sum(v for k, v in ops.items() if model.layer(k).kind == "conv2d")


@dataclass
class AttentionReport:
    logits: np.ndarray
    logits_raw: np.ndarray
    masks: list = field(default_factory=list)
    ops_pass1: int = 0
    ops_pass2: int = 0
    ops_pass2_conv: int = 0
    ops_uniform_high_conv: int = 0
    ops_weighted_fraction: float = 0.0  # high-budget share of conv work

    @property
    def mask_fraction(self) -> float:
        return float(np.mean([m.fraction for m in self.masks])) if self.masks else 0.0

    @property
    def reduction(self) -> float:
        """Fractional saving of pass-2 conv work versus a uniform n_high run."""
        if not self.ops_uniform_high_conv:
            return 0.0
        return 1.0 - self.ops_pass2_conv / self.ops_uniform_high_conv

    @property
    def ops_total(self) -> int:
        return self.ops_pass1 + self.ops_pass2

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits_raw), axis=1)


def closed_form_reduction(r: float, n_low: int, n_high: int) -> float:
    return 1.0 - (r * n_high + (1.0 - r) * n_low) / n_high


def two_pass_forward(model: Model, inputs, n_low: int, n_high: int, seed: int = 0,
                     cfg: SamplingConfig | None = None, workers: int = 1, indices=None,
                     mask=None) -> AttentionReport:
    """Run the low-budget pass, build masks, then the mixed-budget pass.

    ``mask`` (bool array at last-conv resolution) overrides the entropy
    mask for every input; pass 1 still runs and is still costed.
    """
    if n_low > n_high:
        raise ConfigError(f"n_low ({n_low}) must not exceed n_high ({n_high})")
    if not model.is_psb:
        raise ModelError("two_pass_forward needs a PSB model")
    conv_name, cap_name = last_conv(model)
    shapes = infer_shapes(model)
    cfg = cfg or SamplingConfig(n_high)
    low = cfg.with_n(n_low)
    x = np.asarray(inputs, dtype=np.float64)
    single = x.shape == model.input_shape
    batch = x[None] if single else x
    idx = np.arange(len(batch)) if indices is None else np.asarray(indices)

    def one(j):
        _, ops1, act = forward_one(model, batch[j], low, seed, int(idx[j]), capture=cap_name)
        if mask is None:
            bm = mask_from_entropy(entropy_map(act.astype(np.float64) / fx.SCALE), n_low, n_high)
        else:
            bm = BudgetMask(np.asarray(mask, dtype=bool), n_low, n_high)
        budget = budget_from_mask(model, bm, shapes)
        raw, ops2, _ = forward_one(model, batch[j], cfg, seed, int(idx[j]), budget=budget)
        return raw, ops1, ops2, bm

    res = parallel_map(one, range(len(batch)), workers)
    raw = np.stack([r[0] for r in res])
    uniform = predict_ops(model, n_high)
    rep = AttentionReport(
        logits=raw.astype(np.float64) / fx.SCALE,
        logits_raw=raw,
        masks=[r[3] for r in res],
        ops_pass1=sum(sum(r[1].values()) for r in res),
        ops_pass2=sum(sum(r[2].values()) for r in res),
        ops_pass2_conv=sum(conv_ops(r[2], model) for r in res),
        ops_uniform_high_conv=conv_ops(uniform, model) * len(batch),
    )
    # op-weighted mask share; equals the mask fraction when every conv grid
    # is an integer multiple of the mask grid
    live = sum(conv_ops(r[2], model) for r in res)
    if n_high != n_low:
        total_low = rep.ops_uniform_high_conv // n_high * n_low
        rep.ops_weighted_fraction = (live - total_low) / ((n_high - n_low) * (rep.ops_uniform_high_conv // n_high))
    else:
        rep.ops_weighted_fraction = rep.mask_fraction
    if single:
        rep.logits, rep.logits_raw = rep.logits[0], rep.logits_raw[0]
    return rep


def write_pgm(path, mask: np.ndarray):
    """Binary PGM (P5) with 255 for high-budget positions."""
    m = np.asarray(mask, dtype=bool)
    data = np.where(m, 255, 0).astype(np.uint8)
    with open(Path(path), "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())
