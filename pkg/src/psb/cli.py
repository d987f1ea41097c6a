"""``psb`` command line: convert, sweep, attention, stats, gen-data.

Every run writes CSV whose leading ``#`` lines carry the schema version and
the fully resolved configuration, so a file alone says how it was made.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 model error.
"""
from __future__ import annotations

import argparse
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import last_conv, two_pass_forward, write_pgm
from .capacitor import Mode, SamplingConfig
from .encoding import EncodingConfig, relative_std_bound
from .errors import ConfigError, DataError, ModelError, PsbError
from .graph import (Model, convert_to_psb, fold_batchnorm, forward, prune_magnitude,
                    psb_to_float)
from .modelio import (MAX_BLOB_PROB_BITS, Dataset, fixture_dataset, gen_synthetic, load_fixture,
                      load_idx, load_model, resolve_data_path, save_idx, save_model)
from .oracle import float_forward, relative_logit_error

SCHEMA_VERSION = 1
FOOTPRINT_PROB_BITS = (1, 2, 3, 4, 6, 10)
DISK_BITS = 16


# argument parsing ----------------------------------------------------------

def _sample_list(text: str) -> list[int]:
    try:
        ns = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ns:
        raise argparse.ArgumentTypeError("empty sample list")
    for n in ns:
        try:
            SamplingConfig(n)  # power of two within range
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return ns


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="psb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"psb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def encoding_flags(p):
        p.add_argument("--prob-bits", type=int, default=10,
                       help=f"probability bits, 1..{MAX_BLOB_PROB_BITS} (default 10)")
        p.add_argument("--exp-bits", type=int, default=4)
        p.add_argument("--prune", type=_fraction, default=0.0, help="magnitude-prune this fraction of weights")
        p.add_argument("--prune-scope", choices=("layer", "global"), default="layer")
        p.add_argument("--fold-bn", action=argparse.BooleanOptionalAction, default=True,
                       help="fold batchnorm into the preceding linear layer")

    def run_flags(p):
        p.add_argument("model", help="model container, or 'fixture' for the bundled CNN; "
                                     "float models are converted on the fly")
        p.add_argument("--data", default="synthetic",
                       help="'synthetic' or a directory with *images* and *labels* IDX files")
        p.add_argument("--limit", type=int, default=None, help="use only the first N samples")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.PER_CALL_FILTER.value)
        p.add_argument("--sampler", choices=("direct", "gumbel"), default="direct")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", type=Path, default=None, help="CSV path (default stdout)")
        encoding_flags(p)

    p = sub.add_parser("convert", help="fold, prune and encode a float model")
    p.add_argument("model")
    p.add_argument("--out", type=Path, required=True)
    encoding_flags(p)

    p = sub.add_parser("sweep", help="accuracy and logit error against sample count")
    run_flags(p)
    p.add_argument("--samples", type=_sample_list, default=_sample_list("1,2,4,8,16,32,64"))

    p = sub.add_parser("attention", help="two-pass entropy-masked evaluation")
    run_flags(p)
    p.add_argument("--n-low", type=int, default=8)
    p.add_argument("--n-high", type=int, default=16)
    p.add_argument("--mask-dump", type=Path, default=None, help="directory for per-image PGM masks")

    p = sub.add_parser("stats", help="weight histograms, variance bounds and storage footprint")
    p.add_argument("model")
    p.add_argument("--samples", type=_sample_list, default=_sample_list("1,2,4,8,16,32,64"))
    p.add_argument("--out", type=Path, default=None)
    encoding_flags(p)

    p = sub.add_parser("gen-data", help="write the synthetic blob dataset as IDX files")
    p.add_argument("out", type=Path)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=2)
    return ap


# shared helpers -------------------------------------------------------------

def _encoding(args) -> EncodingConfig:
    if not 1 <= args.prob_bits <= MAX_BLOB_PROB_BITS:
        raise ConfigError(f"--prob-bits must be in [1, {MAX_BLOB_PROB_BITS}]")
    return EncodingConfig(prob_bits=args.prob_bits, exp_bits=args.exp_bits)


def open_model(spec: str) -> Model:
    if spec == "fixture" and not Path(spec).exists():
        return load_fixture()
    return load_model(spec)


def prepare_model(model: Model, args) -> tuple[Model, Model]:
    """Return ``(psb_model, float_reference)`` for a float or PSB input model."""
    if model.is_psb:
        if args.prune:
            model = prune_magnitude(model, args.prune, args.prune_scope)
        return model, psb_to_float(model)
    if args.fold_bn:
        model = fold_batchnorm(model)
    reference = model
    if args.prune:
        model = prune_magnitude(model, args.prune, args.prune_scope)
    return convert_to_psb(model, _encoding(args)), reference


def load_dataset(spec: str, limit: int | None = None) -> Dataset:
    if spec == "synthetic":
        ds = fixture_dataset("test")
    else:
        root = resolve_data_path(spec)
        if not root.is_dir():
            raise DataError(f"--data must be 'synthetic' or a directory, got {root}")
        imgs = sorted(p for p in root.iterdir() if "images" in p.name)
        labs = sorted(p for p in root.iterdir() if "labels" in p.name)
        if len(imgs) != 1 or len(labs) != 1:
            raise DataError(f"{root} must hold exactly one *images* and one *labels* IDX file")
        images = load_idx(imgs[0], scale=True)
        labels = load_idx(labs[0], scale=False)
        if len(images) != len(labels):
            raise DataError(f"{len(images)} images but {len(labels)} labels")
        ds = Dataset(images, labels)
    if limit is not None:
        ds = ds.subset(limit)
    if len(ds) == 0:
        raise DataError("dataset is empty")
    return ds


def _inputs(ds: Dataset, model: Model) -> np.ndarray:
    x = ds.inputs
    if x.shape[1:] != model.input_shape:
        raise DataError(f"data samples have shape {x.shape[1:]}, model expects {model.input_shape}")
    return x


def _header(command: str, config: dict) -> str:
    lines = [f"# psb {command}", f"# schema_version={SCHEMA_VERSION}"]
    lines += [f"# {k}={config[k]}" for k in sorted(config)]
    return "\n".join(lines) + "\n"


def _run_config(args, psb: Model, **extra) -> dict:
    cfg = {"effective_prob_bits": psb.meta.get("prob_bits"),
           "effective_exp_bits": psb.meta.get("exp_bits"),
           "model": args.model, "data": args.data, "limit": args.limit, "seed": args.seed,
           "mode": args.mode, "sampler": args.sampler, "prob_bits": args.prob_bits,
           "exp_bits": args.exp_bits, "prune": args.prune, "prune_scope": args.prune_scope,
           "fold_bn": args.fold_bn}
    cfg.update(extra)
    return cfg


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


# subcommands ----------------------------------------------------------------

def cmd_convert(args) -> int:
    model = open_model(args.model)
    if model.is_psb:
        raise ModelError(f"{args.model} is already a PSB model")
    if args.fold_bn:
        model = fold_batchnorm(model)
    if args.prune:
        model = prune_magnitude(model, args.prune, args.prune_scope)
    psb = convert_to_psb(model, _encoding(args))
    size = save_model(psb, args.out)
    weights = sum(l.weight.size for l in psb.linear_layers())
    zeros = sum(int(l.weight.zero.sum()) for l in psb.linear_layers())
    print(f"weights {weights}")
    print(f"zeros {zeros}")
    print(f"bytes {size}")
    return 0


def cmd_sweep(args) -> int:
    psb, reference = prepare_model(open_model(args.model), args)
    ds = load_dataset(args.data, args.limit)
    x = _inputs(ds, psb)
    ref = float_forward(reference, x)
    buf = io.StringIO()
    buf.write(_header("sweep", _run_config(args, psb, samples=",".join(map(str, args.samples)))))
    buf.write(f"# float_top1={_fmt(np.mean(np.argmax(ref, axis=1) == ds.labels))}\n")
    buf.write("n,top1,median_rel_logit_err,ops\n")
    for n in args.samples:
        cfg = SamplingConfig(n, args.mode, args.sampler, psb.meta.get("prob_bits"))
        rep = forward(psb, x, cfg, seed=args.seed, workers=args.workers)
        top1 = np.mean(rep.predictions == ds.labels)
        err = np.median(relative_logit_error(rep.logits, ref))
        buf.write(f"{n},{_fmt(top1)},{_fmt(err)},{rep.shift_accumulate_ops}\n")
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_attention(args) -> int:
    if args.n_low > args.n_high:
        raise ConfigError(f"--n-low ({args.n_low}) must not exceed --n-high ({args.n_high})")
    SamplingConfig(args.n_low)  # validate before any work
    psb, _ = prepare_model(open_model(args.model), args)
    last_conv(psb)
    ds = load_dataset(args.data, args.limit)
    x = _inputs(ds, psb)
    cfg = SamplingConfig(args.n_high, args.mode, args.sampler, psb.meta.get("prob_bits"))
    rep = two_pass_forward(psb, x, args.n_low, args.n_high, args.seed, cfg, args.workers)
    if args.mask_dump is not None:
        args.mask_dump.mkdir(parents=True, exist_ok=True)
        for i, bm in enumerate(rep.masks):
            write_pgm(args.mask_dump / f"mask_{i:05d}.pgm", bm.mask)
    top1 = np.mean(rep.predictions == ds.labels)
    buf = io.StringIO()
    buf.write(_header("attention", _run_config(args, psb, n_low=args.n_low, n_high=args.n_high)))
    buf.write("# ops_pass2 and ops_uniform_high count conv layers only; reduction_pct compares them\n")
    buf.write("# ops_pass1 is the discarded low-budget pass; ops_total = ops_pass1 + ops_pass2_all\n")
    buf.write("top1,mask_fraction,ops_pass2,ops_uniform_high,reduction_pct,ops_pass1,ops_pass2_all,ops_total\n")
    buf.write(f"{_fmt(top1)},{_fmt(rep.mask_fraction)},{rep.ops_pass2_conv},{rep.ops_uniform_high_conv},"
              f"{_fmt(100.0 * rep.reduction)},{rep.ops_pass1},{rep.ops_pass2},{rep.ops_total}\n")
    _emit(buf.getvalue(), args.out)
    return 0


def stats_rows(psb: Model, samples: list[int]) -> list[tuple]:
    rows = []
    exp_bits = psb.meta.get("exp_bits", 4)
    cfg = EncodingConfig(prob_bits=psb.meta.get("prob_bits"), exp_bits=exp_bits)
    for l in psb.linear_layers():
        w = l.weight
        live = ~w.zero
        e = w.exponent[live]
        for k in range(cfg.e_min, cfg.e_max + 1):
            rows.append(("exp_hist", l.name, k, int(np.sum(e == k))))
        p = w.probabilities()[live]
        hist, _ = np.histogram(p, bins=10, range=(0.0, 1.0))
        for b, c in enumerate(hist):
            rows.append(("prob_hist", l.name, f"{b / 10:.1f}", int(c)))
        ratio = (w.variance()[live] / w.decode_mean()[live] ** 2).max() if live.any() else 0.0
        rows.append(("max_var_over_w2", l.name, "n=1", _fmt(ratio)))
        rows.append(("zeros", l.name, "count", int(w.zero.sum())))
    for n in samples:
        rows.append(("rel_std_bound", "all", n, _fmt(relative_std_bound(n))))
    total = sum(l.weight.size for l in psb.linear_layers())
    for k in FOOTPRINT_PROB_BITS:
        bits = 1 + exp_bits + k
        rows.append(("footprint_bytes", "all", k, math.ceil(total * bits / 8)))
        rows.append(("footprint_ratio_vs_disk", "all", k, _fmt(bits / DISK_BITS)))
    return rows


def cmd_stats(args) -> int:
    psb, _ = prepare_model(open_model(args.model), args)
    rows = stats_rows(psb, args.samples)
    cfg = {"model": args.model, "samples": ",".join(map(str, args.samples)),
           "prob_bits": psb.meta.get("prob_bits"), "exp_bits": psb.meta.get("exp_bits"),
           "prune": args.prune}
    buf = io.StringIO()
    buf.write(_header("stats", cfg))
    buf.write("section,layer,key,value\n")
    for r in rows:
        buf.write(",".join(str(v) for v in r) + "\n")
    text = buf.getvalue()
    if args.out is not None:
        args.out.write_text(text)
    # human-readable summary
    total = sum(l.weight.size for l in psb.linear_layers())
    zeros = sum(int(l.weight.zero.sum()) for l in psb.linear_layers())
    print(f"model {args.model}: {total} weights, {zeros} zero")
    for l in psb.linear_layers():
        w = l.weight
        live = ~w.zero
        e = w.exponent[live]
        rng = f"[{e.min()}, {e.max()}]" if e.size else "-"
        print(f"  {l.name:<12} {l.kind:<7} {w.size:>7} weights  exponents {rng}")
    print("relative std bound: " + ", ".join(f"n={n} {relative_std_bound(n):.4f}" for n in args.samples))
    for k in FOOTPRINT_PROB_BITS:
        bits = 1 + psb.meta.get("exp_bits", 4) + k
        print(f"  prob_bits={k:<2} {bits:>2} bits/weight  {math.ceil(total * bits / 8):>8} bytes"
              f"  {bits}/{DISK_BITS} of disk layout")
    if args.out is None:
        sys.stdout.write(text)
    return 0


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.classes, args.per_class, args.size, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    save_idx(args.out / "images.idx", ds.images)
    save_idx(args.out / "labels.idx", ds.labels)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


COMMANDS = {"convert": cmd_convert, "sweep": cmd_sweep, "attention": cmd_attention,
            "stats": cmd_stats, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be at least 1")
        return COMMANDS[args.command](args)
    except PsbError as exc:
        print(f"psb: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"psb: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
