"""Network graphs, float-to-PSB conversion and whole-model evaluation."""
from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fixedpoint as fx
from .capacitor import SamplingConfig, conv2d_kernel, dense_kernel, same_padding
from .encoding import EncodingConfig, PsbTensor, encode_array
from .errors import InvalidInput, ModelError, ShapeMismatch, UnfoldableGraph
from .oracle import float_forward
from .sampling import RngStream, derive_stream_id

LINEAR = ("conv2d", "dense")
KINDS = ("dense", "conv2d", "batchnorm", "relu", "add", "maxpool", "avgpool",
         "global_avgpool", "flatten")


@dataclass
class Layer:
    name: str
    kind: str
    inputs: tuple[str, ...] = ("input",)
    weight: np.ndarray | PsbTensor | None = None
    bias: np.ndarray | None = None  # float, or int16 Q5.10 raw in PSB models
    scale: np.ndarray | None = None  # batchnorm y = scale * x + offset
    offset: np.ndarray | None = None
    stride: int = 1
    padding: str = "same"
    pool: int = 2
    pool_stride: int | None = None
    shift: int | None = None  # PSB average pools: divide by 2**shift

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        self.inputs = tuple(self.inputs)


@dataclass
class Model:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    @property
    def is_psb(self) -> bool:
        return self.meta.get("format") == "psb"

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def consumers(self, name: str) -> list[Layer]:
        return [l for l in self.layers if name in l.inputs]

    def linear_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.kind in LINEAR]

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class ForwardReport:
    logits: np.ndarray
    logits_raw: np.ndarray | None = None
    shift_accumulate_ops: int = 0
    layer_ops: dict = field(default_factory=dict)
    captured: np.ndarray | None = None

    @property
    def predictions(self) -> np.ndarray:
        src = self.logits_raw if self.logits_raw is not None else self.logits
        return np.argmax(np.atleast_2d(src), axis=1)  # lowest index wins ties


# structure ----------------------------------------------------------------

def infer_shapes(model: Model) -> dict[str, tuple[int, ...]]:
    """Validate topology and edge shapes; return output shape per layer."""
    shapes = {"input": model.input_shape}
    seen = set()
    for l in model.layers:
        if l.name in shapes or l.name in seen:
            raise ModelError(f"duplicate layer name {l.name!r}")
        for i in l.inputs:
            if i not in shapes:
                raise ModelError(f"layer {l.name!r} reads {i!r} before it is defined")
        ins = [shapes[i] for i in l.inputs]
        s = ins[0]
        k = l.kind
        if k == "conv2d":
            kh, kw, cin, cout = l.weight.shape
            if len(s) != 3 or s[2] != cin:
                raise ShapeMismatch(f"{l.name}: input {s} incompatible with kernel {l.weight.shape}")
            if l.padding == "same":
                out = (same_padding(s[0], kh, l.stride)[0], same_padding(s[1], kw, l.stride)[0], cout)
            else:
                out = ((s[0] - kh) // l.stride + 1, (s[1] - kw) // l.stride + 1, cout)
        elif k == "dense":
            if int(np.prod(s)) != l.weight.shape[1] or len(s) != 1:
                raise ShapeMismatch(f"{l.name}: input {s} incompatible with weight {l.weight.shape}")
            out = (l.weight.shape[0],)
        elif k in ("maxpool", "avgpool"):
            st = l.pool_stride or l.pool
            out = ((s[0] - l.pool) // st + 1, (s[1] - l.pool) // st + 1, s[2])
        elif k == "global_avgpool":
            out = (s[2],)
        elif k == "flatten":
            out = (int(np.prod(s)),)
        elif k == "add":
            if any(t != s for t in ins):
                raise ShapeMismatch(f"{l.name}: add inputs differ {ins}")
            out = s
        else:
            out = s
        shapes[l.name] = out
        seen.add(l.name)
    sinks = [l.name for l in model.layers if not model.consumers(l.name)]
    if sinks != [model.output]:
        raise ModelError(f"model must have exactly one output node, found {sinks}")
    return shapes


def _rewire(model: Model, old: str, new: str):
    for l in model.layers:
        l.inputs = tuple(new if i == old else i for i in l.inputs)


def fold_batchnorm(model: Model) -> Model:
    """Absorb every batchnorm into the linear layer feeding it."""
    if model.is_psb:
        raise ModelError("batchnorm folding applies to float models")
    m = model.copy()
    for bn in [l for l in m.layers if l.kind == "batchnorm"]:
        prod = m.layer(bn.inputs[0]) if bn.inputs[0] != "input" else None
        if prod is None or prod.kind not in LINEAR:
            what = prod.kind if prod else "the model input"
            raise UnfoldableGraph(f"batchnorm {bn.name!r} follows {what}; only conv/dense outputs can be folded")
        if len(m.consumers(prod.name)) != 1:
            raise UnfoldableGraph(f"{prod.name!r} feeds more than the batchnorm {bn.name!r}")
        a = np.asarray(bn.scale, dtype=np.float64)
        b = np.asarray(bn.offset, dtype=np.float64)
        w = np.asarray(prod.weight, dtype=np.float64)
        bias = np.zeros(a.shape) if prod.bias is None else np.asarray(prod.bias, dtype=np.float64)
        prod.weight = w * a if prod.kind == "conv2d" else w * a[:, None]
        prod.bias = a * bias + b
        m.layers.remove(bn)
        _rewire(m, bn.name, prod.name)
    m.meta = dict(m.meta, folded=True)
    infer_shapes(m)
    return m


def _magnitudes(layer: Layer) -> np.ndarray:
    w = layer.weight
    return np.abs(w.decode_mean() if isinstance(w, PsbTensor) else np.asarray(w))


def _zero_weights(layer: Layer, mask: np.ndarray):
    if isinstance(layer.weight, PsbTensor):
        layer.weight = layer.weight.with_zeros(mask)
    else:
        layer.weight = np.where(mask, 0.0, layer.weight)


def prune_magnitude(model: Model, fraction: float, scope: str = "layer") -> Model:
    """Zero the smallest-magnitude ``floor(fraction * total)`` conv/dense weights.

    ``scope="layer"`` prunes the same fraction in every layer (the total is
    split across layers by largest remainder); ``scope="global"`` uses one
    threshold for the whole network.
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidInput(f"prune fraction must be in [0, 1), got {fraction}")
    m = model.copy()
    layers = m.linear_layers()
    sizes = np.array([l.weight.size for l in layers], dtype=np.int64)
    total = int(math.floor(fraction * int(sizes.sum())))
    if total == 0:
        return m
    if scope == "global":
        mags = np.concatenate([_magnitudes(l).reshape(-1) for l in layers])
        order = np.argsort(mags, kind="stable")[:total]
        mask = np.zeros(mags.size, dtype=bool)
        mask[order] = True
        off = 0
        for l in layers:
            _zero_weights(l, mask[off:off + l.weight.size].reshape(l.weight.shape))
            off += l.weight.size
        return m
    if scope != "layer":
        raise InvalidInput(f"unknown prune scope {scope!r}")
    quota = fraction * sizes
    k = np.floor(quota).astype(np.int64)
    rem = total - int(k.sum())
    if rem > 0:
        k[np.argsort(-(quota - k), kind="stable")[:rem]] += 1
    for l, kl in zip(layers, k):
        mags = _magnitudes(l).reshape(-1)
        mask = np.zeros(mags.size, dtype=bool)
        mask[np.argsort(mags, kind="stable")[:kl]] = True
        _zero_weights(l, mask.reshape(l.weight.shape))
    return m


_SCALE_TRANSPARENT = ("flatten", "relu", "maxpool")


def _fold_pool_scale(m: Model, pool: Layer, factor: float):
    """Push a positive scale through relu/maxpool/flatten into the next linear layer."""
    cur = pool
    while True:
        cons = m.consumers(cur.name)
        if len(cons) != 1:
            raise ModelError(f"cannot fold the scale of {pool.name!r}: {cur.name!r} has {len(cons)} consumers")
        nxt = cons[0]
        if nxt.kind in LINEAR:
            nxt.weight = np.asarray(nxt.weight, dtype=np.float64) * factor
            return
        if nxt.kind not in _SCALE_TRANSPARENT:
            raise ModelError(f"cannot fold the scale of {pool.name!r} through {nxt.kind!r}")
        cur = nxt


def convert_to_psb(model: Model, cfg: EncodingConfig = EncodingConfig()) -> Model:
    """Encode a batchnorm-free float model into PSB weights and Q5.10 biases.

    Average pools become sum-and-shift. When the pool area is not a power
    of two, the shift divides by the next lower power of two and the
    remaining factor is folded into the following linear layer.
    """
    if model.is_psb:
        raise ModelError("model is already PSB")
    if any(l.kind == "batchnorm" for l in model.layers):
        raise UnfoldableGraph("fold batchnorm before encoding")
    m = model.copy()
    shapes = infer_shapes(m)
    for l in m.layers:
        if l.kind in ("avgpool", "global_avgpool"):
            s = shapes[l.inputs[0]]
            area = l.pool * l.pool if l.kind == "avgpool" else s[0] * s[1]
            l.shift = int(math.floor(math.log2(area)))
            if area != 1 << l.shift:
                _fold_pool_scale(m, l, (1 << l.shift) / area)
    for l in m.linear_layers():
        w = np.asarray(l.weight, dtype=np.float64)
        l.weight = encode_array(w, cfg)
        nout = w.shape[-1] if l.kind == "conv2d" else w.shape[0]
        bias = np.zeros(nout) if l.bias is None else l.bias
        l.bias = fx.quantize_array(bias)
    m.meta = dict(m.meta, format="psb", prob_bits=cfg.prob_bits, exp_bits=cfg.exp_bits)
    return m


def psb_to_float(model: Model) -> Model:
    """Float model with the expected weights and dequantized biases of a PSB model."""
    if not model.is_psb:
        raise ModelError("psb_to_float needs a PSB model")
    m = model.copy()
    for l in m.linear_layers():
        l.weight = l.weight.decode_mean()
        l.bias = np.asarray(l.bias, dtype=np.float64) / fx.SCALE
    m.meta = dict(m.meta, format="float", decoded_from="psb")
    return m


# evaluation ----------------------------------------------------------------

def predict_ops(model: Model, n: int, budget: dict | None = None) -> dict[str, int]:
    """Closed-form shift-accumulate ops per layer for one input."""
    shapes = infer_shapes(model)
    ops = {}
    for l in model.linear_layers():
        nnz = l.weight.nonzero_count if isinstance(l.weight, PsbTensor) \
            else int(np.count_nonzero(l.weight))
        if l.kind == "conv2d":
            Ho, Wo, _ = shapes[l.name]
            nmap = (budget or {}).get(l.name)
            ops[l.name] = nnz * (int(np.sum(nmap)) if nmap is not None else n * Ho * Wo)
        else:
            ops[l.name] = nnz * (budget or {}).get("dense_n", n)
    return ops


def _pool_raw(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(0, 1))
    return win[::stride, ::stride]


def layer_stream(seed: int, index: int, layer_index: int) -> RngStream:
    return RngStream(seed, derive_stream_id(index, layer_index))


def forward_one(model: Model, x, cfg: SamplingConfig, seed: int = 0, index: int = 0,
                budget: dict | None = None, capture: str | None = None):
    """Fixed-point PSB forward of one input.

    ``budget`` maps conv layer names to per-position sample counts, plus
    ``"dense_n"`` for dense layers. Returns ``(logits_raw, layer_ops, captured_raw)``.
    """
    if not model.is_psb:
        raise ModelError("forward_one needs a PSB model")
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} does not match model {model.input_shape}")
    budget = budget or {}
    acts = {"input": fx.quantize_array(x)}
    ops = {}
    for li, l in enumerate(model.layers):
        args = [acts[i] for i in l.inputs]
        a = args[0]
        k = l.kind
        if k == "conv2d":
            out, ops[l.name] = conv2d_kernel(a, l.weight, l.bias, l.stride, l.padding, cfg,
                                             layer_stream(seed, index, li), budget.get(l.name))
        elif k == "dense":
            out, ops[l.name] = dense_kernel(a.reshape(-1), l.weight, l.bias, cfg,
                                            layer_stream(seed, index, li), budget.get("dense_n", cfg.n))
        elif k == "relu":
            out = fx.relu_array(a)
        elif k == "add":
            out = fx.saturate(np.sum([t.astype(np.int64) for t in args], axis=0))
        elif k == "maxpool":
            out = _pool_raw(a, l.pool, l.pool_stride or l.pool).max(axis=(3, 4))
        elif k == "avgpool":
            s = _pool_raw(a.astype(np.int64), l.pool, l.pool_stride or l.pool).sum(axis=(3, 4))
            out = fx.saturate(s >> l.shift)
        elif k == "global_avgpool":
            out = fx.saturate(a.astype(np.int64).sum(axis=(0, 1)) >> l.shift)
        elif k == "flatten":
            out = a.reshape(-1)
        else:
            raise ModelError(f"layer kind {k!r} cannot run in a PSB model")
        acts[l.name] = out
    cap = acts[capture] if capture else None
    return acts[model.output], ops, cap


def parallel_map(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def forward(model: Model, inputs, cfg: SamplingConfig = SamplingConfig(), seed: int = 0,
            workers: int = 1, indices=None, capture: str | None = None) -> ForwardReport:
    """Evaluate a model on one input or a batch.

    Batch item ``i`` draws from streams keyed by ``(indices[i], layer
    index)``, so results do not depend on batching or worker count.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if not model.is_psb:
        if capture:
            logits, cap = float_forward(model, x, capture=capture)
            return ForwardReport(logits, captured=cap)
        return ForwardReport(float_forward(model, x))
    single = x.shape == model.input_shape
    batch = x[None] if single else x
    if batch.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} does not match model {model.input_shape}")
    idx = np.arange(len(batch)) if indices is None else np.asarray(indices)
    res = parallel_map(lambda j: forward_one(model, batch[j], cfg, seed, int(idx[j]), capture=capture),
                       range(len(batch)), workers)
    raw = np.stack([r[0] for r in res])
    layer_ops = {}
    for r in res:
        for name, v in r[1].items():
            layer_ops[name] = layer_ops.get(name, 0) + v
    cap = np.stack([r[2] for r in res]) if capture else None
    if single:
        raw = raw[0]
        cap = cap[0] if capture else None
    return ForwardReport(raw.astype(np.float64) / fx.SCALE, raw, sum(layer_ops.values()), layer_ops, cap)
