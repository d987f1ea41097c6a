"""Model container, IDX datasets and the synthetic blob dataset.

A container is a zip archive holding ``manifest.json`` and one binary blob
per tensor. Float tensors are little-endian float32. PSB weights pack into
one little-endian 16-bit code each::

    bit 15      sign (1 = negative)
    bits 10-14  exponent + 16, 31 = explicit zero
    bits 0-9    probability numerator (units of 2**-prob_bits)
"""
from __future__ import annotations

import gzip
import json
import os
import struct
import zipfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .encoding import PsbTensor
from .errors import DataError, ModelError, ShapeMismatch, TruncatedBlob, VersionMismatch
from .graph import Layer, Model, infer_shapes

FORMAT_VERSION = 1
EXP_BIAS = 16
EXP_ZERO = 31
MAX_BLOB_PROB_BITS = 10
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def pack_psb(t: PsbTensor) -> np.ndarray:
    if t.prob_bits > MAX_BLOB_PROB_BITS:
        raise ModelError(f"on-disk format holds at most {MAX_BLOB_PROB_BITS} probability bits, got {t.prob_bits}")
    e = t.exponent.astype(np.int64)
    live = ~t.zero
    if np.any(live & ((e + EXP_BIAS < 0) | (e + EXP_BIAS >= EXP_ZERO))):
        raise ModelError("exponent outside the on-disk range [-16, 14]")
    field = np.where(t.zero, EXP_ZERO, e + EXP_BIAS)
    sign = np.where(live & (t.sign < 0), 1, 0)
    prob = np.where(t.zero, 0, t.prob_num)
    return ((sign << 15) | (field << 10) | prob).astype("<u2")


def unpack_psb(codes: np.ndarray, prob_bits: int, exp_bits: int = 4) -> PsbTensor:
    c = np.asarray(codes).astype(np.int64)
    field = (c >> 10) & 0x1F
    prob = c & 0x3FF
    zero = field == EXP_ZERO
    if np.any(prob[~zero] >= (1 << prob_bits)):
        raise ModelError(f"probability code exceeds 2**{prob_bits}")
    sign = np.where((c >> 15) & 1, -1, 1).astype(np.int8)
    sign[zero] = 1
    e = np.where(zero, 0, field - EXP_BIAS).astype(np.int16)
    return PsbTensor(sign, e, np.where(zero, 0, prob).astype(np.int64), zero, prob_bits, exp_bits)


def _encode_tensor(arr) -> tuple[dict, bytes]:
    if isinstance(arr, PsbTensor):
        data = pack_psb(arr).tobytes()
        return {"dtype": "psb16", "shape": list(arr.shape), "prob_bits": arr.prob_bits,
                "exp_bits": arr.exp_bits, "nbytes": len(data)}, data
    a = np.asarray(arr)
    if a.dtype == np.int16:
        data = a.astype("<i2").tobytes()
        return {"dtype": "i16", "shape": list(a.shape), "nbytes": len(data)}, data
    data = a.astype("<f4").tobytes()
    return {"dtype": "f32", "shape": list(a.shape), "nbytes": len(data)}, data


_ITEMSIZE = {"psb16": 2, "i16": 2, "f32": 4}


def _decode_tensor(spec: dict, data: bytes):
    dtype = spec["dtype"]
    if dtype not in _ITEMSIZE:
        raise ModelError(f"unknown tensor dtype {dtype!r}")
    shape = tuple(spec["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * _ITEMSIZE[dtype]
    if spec["nbytes"] != expected:
        raise ShapeMismatch(f"manifest shape {shape} needs {expected} bytes, declares {spec['nbytes']}")
    if len(data) != spec["nbytes"]:
        raise TruncatedBlob(f"blob holds {len(data)} bytes, manifest declares {spec['nbytes']}")
    if dtype == "psb16":
        codes = np.frombuffer(data, dtype="<u2").reshape(shape)
        return unpack_psb(codes, spec["prob_bits"], spec.get("exp_bits", 4))
    if dtype == "i16":
        return np.frombuffer(data, dtype="<i2").astype(np.int16).reshape(shape)
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)


_TENSOR_FIELDS = ("weight", "bias", "scale", "offset")
_SCALAR_FIELDS = ("stride", "padding", "pool", "pool_stride", "shift")


def save_model(model: Model, path) -> int:
    """Write ``model``; returns the archive size in bytes. Output is byte-stable."""
    infer_shapes(model)
    tensors, blobs, layers = {}, {}, []
    for l in model.layers:
        entry = {"name": l.name, "kind": l.kind, "inputs": list(l.inputs)}
        entry.update({f: getattr(l, f) for f in _SCALAR_FIELDS})
        refs = {}
        for f in _TENSOR_FIELDS:
            v = getattr(l, f)
            if v is None:
                continue
            key = f"{l.name}.{f}"
            tensors[key], blobs[key] = _encode_tensor(v)
            tensors[key]["file"] = f"blobs/{key}.bin"
            refs[f] = key
        entry["tensors"] = refs
        layers.append(entry)
    manifest = {"format_version": FORMAT_VERSION, "name": model.name,
                "input_shape": list(model.input_shape), "meta": model.meta,
                "layers": layers, "tensors": tensors}
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as z:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            z.writestr(info, data)
        put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for key in sorted(blobs):
            put(tensors[key]["file"], blobs[key])
    return path.stat().st_size


def load_model(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no model file at {path}")
    try:
        z = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ModelError(f"{path} is not a model container") from exc
    with z:
        try:
            manifest = json.loads(z.read("manifest.json"))
        except KeyError as exc:
            raise ModelError("container has no manifest") from exc
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"container format {version!r}, this build reads {FORMAT_VERSION}")
        names = set(z.namelist())
        layers = []
        for entry in manifest["layers"]:
            kw = {f: entry.get(f) for f in _SCALAR_FIELDS if entry.get(f) is not None}
            for f, key in entry.get("tensors", {}).items():
                spec = manifest["tensors"][key]
                if spec["file"] not in names:
                    raise TruncatedBlob(f"missing blob {spec['file']}")
                kw[f] = _decode_tensor(spec, z.read(spec["file"]))
            layers.append(Layer(entry["name"], entry["kind"], tuple(entry["inputs"]), **kw))
    model = Model(layers, tuple(manifest["input_shape"]), manifest.get("meta", {}), manifest.get("name", "model"))
    infer_shapes(model)
    return model


def fixture_path() -> Path:
    return Path(str(resources.files("psb") / "data" / "fixture_cnn.psbm"))


def load_fixture() -> Model:
    """Pretrained float CNN (batchnorm unfolded) for the synthetic blob task."""
    return load_model(fixture_path())


# datasets -----------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8}


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def resolve_data_path(path) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get("PSB_DATA_DIR"):
        alt = Path(os.environ["PSB_DATA_DIR"]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise DataError(f"no such data path: {p}")
    return p


def load_idx(path, scale: bool | None = None) -> np.ndarray:
    """Read an IDX file. Multi-dimensional (image) data is scaled to [0, 1]."""
    path = resolve_data_path(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"{path}: too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim not in (1, 2, 3, 4):
        raise DataError(f"{path}: bad IDX magic {raw[:4].hex()}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    count = 1
    for d in dims:
        count *= d
    if count > len(raw) - head:
        raise DataError(f"{path}: dims {dims} exceed the {len(raw) - head} payload bytes")
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], count=count, offset=head).reshape(dims)
    if scale is None:
        scale = ndim > 1
    return data.astype(np.float64) / 255.0 if scale else data.astype(np.int64)


def save_idx(path, data: np.ndarray):
    """Write uint8 IDX; float arrays in [0, 1] are scaled to bytes."""
    a = np.asarray(data)
    if a.dtype.kind == "f":
        a = np.clip(np.rint(a * 255.0), 0, 255)
    a = a.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, a.ndim))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes())


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) in [0, 1]
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    @property
    def inputs(self) -> np.ndarray:
        """Images with a trailing channel axis, as models expect."""
        return self.images[..., None] if self.images.ndim == 3 else self.images

    def subset(self, k: int) -> "Dataset":
        return Dataset(self.images[:k], self.labels[:k])


# blob generator parameters, fixed so the shipped fixture stays valid
BLOB_SIGMA_MAJOR = 2.6
BLOB_SIGMA_MINOR = 1.0
BLOB_NOISE = 0.12


def gen_synthetic(classes: int = 4, per_class: int = 64, size: int = 16, seed: int = 0) -> Dataset:
    """Oriented Gaussian blobs; the class is the blob orientation.

    Deterministic in ``seed``. Samples are interleaved by class and pixel
    values are rounded to 8 bits so the set round-trips through IDX.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.tile(np.arange(classes), per_class)
    theta = np.pi * labels / classes + rng.uniform(-0.12, 0.12, n)
    c = (size - 1) / 2.0
    cy, cx = rng.uniform(c - size / 5, c + size / 5, (2, n))
    amp = rng.uniform(0.6, 1.0, n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    ct, st = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    img = amp[:, None, None] * np.exp(-0.5 * ((u / BLOB_SIGMA_MAJOR) ** 2 + (v / BLOB_SIGMA_MINOR) ** 2))
    img = img + rng.normal(0.0, BLOB_NOISE, img.shape)
    img = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255) / 255.0
    return Dataset(img, labels.astype(np.int64))


FIXTURE_DATA = {"classes": 4, "size": 16, "train_seed": 1, "test_seed": 2}


def fixture_dataset(split: str = "test", per_class: int = 64) -> Dataset:
    seed = FIXTURE_DATA["train_seed" if split == "train" else "test_seed"]
    return gen_synthetic(FIXTURE_DATA["classes"], per_class, FIXTURE_DATA["size"], seed)
