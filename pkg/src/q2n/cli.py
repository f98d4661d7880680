"""``q2n`` command line: gen, run, sweep, bench, compare-bp.

Reports go to stdout as CSV; logs go to stderr. Exit codes: 0 success,
1 unreadable/malformed input file, 2 usage error, 3 shape mismatch,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import calibgen, nullspace, pipeline, quantizer
from .errors import ArgumentError, DimensionError, NumericalError, Q2NError
from .tensorio import LayerBundle, Tensor, load_layer_bundle, load_tensor, save_tensor

log = logging.getLogger("q2n")

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_SHAPE = 3
EXIT_NUMERIC = 4

GEN_KINDS = ("exact-rank", "decay", "dominant", "weights")


def _positive_float(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not np.isfinite(val) or val <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return val


def _nonneg_float(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not np.isfinite(val) or val < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative finite number, got {text}")
    return val


def _positive_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {val}")
    return val


def _nonneg_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if val < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {val}")
    return val


def _bits(text):
    val = _positive_int(text)
    if not 2 <= val <= 8:
        raise argparse.ArgumentTypeError(f"bits must lie in [2, 8], got {val}")
    return val


def _group(text):
    if text in ("row", "per-row"):
        return quantizer.PER_ROW
    return _positive_int(text)


def _damp(text):
    val = _positive_float(text)
    if val > 1:
        raise argparse.ArgumentTypeError(f"damp must lie in (0, 1], got {val}")
    return val


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not np.isfinite(v) or v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"grid values must be positive, got {text!r}")
    return vals


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 2 for v in vals):
        raise argparse.ArgumentTypeError(f"sizes must be >= 2, got {text!r}")
    return vals


def _add_layer_inputs(p):
    p.add_argument("--weights", type=Path, help="weight tensor (.q2nt, n x m)")
    p.add_argument("--acts", type=Path, help="activation tensor (.q2nt, m x c)")
    p.add_argument("--dir", type=Path, help="directory holding <name>.weight.q2nt and <name>.acts.q2nt")
    p.add_argument("--name", default=None, help="layer name (required with --dir)")


def _add_q2n_flags(p):
    p.add_argument("--bits", type=_bits, default=2)
    p.add_argument("--group", type=_group, default=None, help="group size or 'row' (default: 128 for 2-bit, else row)")
    p.add_argument("--t", type=_positive_float, default=nullspace.DEFAULT_T, help="ratio threshold")
    p.add_argument("--lambda", dest="lambda_reg", type=_positive_float, default=nullspace.DEFAULT_LAMBDA)
    p.add_argument("--selector", choices=nullspace.SELECTORS, default="psr")
    p.add_argument("--quantizer", choices=pipeline.QUANTIZERS, default="gptq")
    p.add_argument("--exclude-top", type=_nonneg_int, default=nullspace.DEFAULT_EXCLUDED_TOP)
    p.add_argument("--damp", type=_damp, default=0.01, help="GPTQ Hessian damping fraction")
    p.add_argument("--seed", type=_nonneg_int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="q2n", description="Null-space post-quantization optimizer")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic weight or activation tensor")
    g.add_argument("--kind", choices=GEN_KINDS, required=True)
    g.add_argument("--m", type=_positive_int, help="activation rows / weight columns")
    g.add_argument("--c", type=_positive_int, help="calibration samples (activation columns)")
    g.add_argument("--n", type=_positive_int, help="weight rows (output channels)")
    g.add_argument("--r", type=_nonneg_int, help="rank for exact-rank")
    g.add_argument("--rate", type=_positive_float, help="singular value decay rate for decay")
    g.add_argument("--k", type=_nonneg_int, default=1, help="massive directions for dominant")
    g.add_argument("--noise", type=_nonneg_float, default=1e-3, help="noise scale for dominant")
    g.add_argument("--scale", type=_nonneg_float, default=1.0, help="weight standard deviation")
    g.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("-o", "--out", type=Path, required=True)

    r = sub.add_parser("run", help="quantize one layer and apply the null-space correction")
    _add_layer_inputs(r)
    _add_q2n_flags(r)
    r.add_argument("--no-q2n", action="store_true", help="baseline only: skip the correction")
    r.add_argument("-o", "--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("sweep", help="grid search over t and lambda")
    _add_layer_inputs(s)
    _add_q2n_flags(s)
    s.add_argument("--t-grid", type=_float_list, default=None)
    s.add_argument("--lambda-grid", type=_float_list, default=None)
    s.add_argument("-o", "--out", type=Path, default=None, help="also write the CSV here")

    b = sub.add_parser("bench", help="time eigendecomposition against SVD")
    b.add_argument("--sizes", type=_int_list, default=[64, 128, 256, 512])
    b.add_argument("--repeats", type=_positive_int, default=1)
    b.add_argument("--seed", type=_nonneg_int, default=0)
    b.add_argument("-o", "--out", type=Path, default=None)

    c = sub.add_parser("compare-bp", help="closed-form alpha versus gradient descent")
    _add_layer_inputs(c)
    _add_q2n_flags(c)
    c.add_argument("-o", "--out", type=Path, default=None)
    return parser


def _load_bundle(args, parser) -> LayerBundle:
    if args.dir is not None:
        if args.weights or args.acts:
            parser.error("use either --dir/--name or --weights/--acts, not both")
        if not args.name:
            parser.error("--dir requires --name")
        return load_layer_bundle(args.dir, args.name)
    if args.weights is None or args.acts is None:
        parser.error("need --weights and --acts (or --dir and --name)")
    name = args.name or args.weights.name.split(".")[0]
    return LayerBundle(load_tensor(args.weights), load_tensor(args.acts), name)


def _qcfg(args, cols: int) -> quantizer.QuantConfig:
    if args.group is None:
        return quantizer.default_config(args.bits, cols)
    return quantizer.QuantConfig(args.bits, args.group)


def _emit(text: str, out: Path | None = None):
    sys.stdout.write(text)
    sys.stdout.flush()
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _dict_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def cmd_gen(args, parser) -> int:
    kind = args.kind
    if kind == "weights":
        if args.n is None or args.m is None:
            parser.error("gen --kind weights needs --n and --m")
        data = calibgen.gen_weights(args.n, args.m, args.seed, args.scale)
    else:
        if args.m is None or args.c is None:
            parser.error(f"gen --kind {kind} needs --m and --c")
        if kind == "exact-rank":
            if args.r is None:
                parser.error("gen --kind exact-rank needs --r")
            spec = calibgen.SpectrumSpec(args.m, args.c, "exact_rank", args.seed, rank=args.r)
        elif kind == "decay":
            if args.rate is None:
                parser.error("gen --kind decay needs --rate")
            spec = calibgen.SpectrumSpec(args.m, args.c, "decay", args.seed, rate=args.rate)
        else:
            spec = calibgen.SpectrumSpec(
                args.m, args.c, "dominant_plus_noise", args.seed, k=args.k, noise_scale=args.noise
            )
        data = calibgen.gen_activations(spec)
    save_tensor(Tensor(data, args.dtype), args.out)
    log.info("wrote %s (%dx%d)", args.out, *data.shape)
    return EXIT_OK


def cmd_run(args, parser) -> int:
    bundle = _load_bundle(args, parser)
    qcfg = _qcfg(args, bundle.weight.cols)
    result, report = pipeline.run_q2n(
        bundle,
        qcfg,
        t=args.t,
        lambda_reg=args.lambda_reg,
        selector=args.selector,
        quantizer_name=args.quantizer,
        excluded_top=args.exclude_top,
        damp=args.damp,
        apply_q2n=not args.no_q2n,
    )
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    stem = bundle.name
    save_tensor(Tensor(result.codes.astype(np.float64)), out / f"{stem}.codes.q2nt")
    save_tensor(Tensor(result.scales), out / f"{stem}.scales.q2nt")
    save_tensor(Tensor(result.zeros), out / f"{stem}.zeros.q2nt")
    (out / f"{stem}.report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit(pipeline.write_csv([report]), out / f"{stem}.report.csv")
    return EXIT_OK


def cmd_sweep(args, parser) -> int:
    bundle = _load_bundle(args, parser)
    qcfg = _qcfg(args, bundle.weight.cols)
    common = dict(
        selector=args.selector, quantizer_name=args.quantizer, excluded_top=args.exclude_top, damp=args.damp
    )
    if args.t_grid is None and args.lambda_grid is None:
        reports = pipeline.default_sweep(bundle, qcfg, **common)
    else:
        t_grid = args.t_grid or [args.t]
        lambda_grid = args.lambda_grid or [args.lambda_reg]
        reports = pipeline.sweep(bundle, qcfg, t_grid, lambda_grid, **common)
    _emit(pipeline.write_csv(reports), args.out)
    return EXIT_OK


def cmd_bench(args, parser) -> int:
    rows = pipeline.bench_decomposition(args.sizes, seed=args.seed, repeats=args.repeats)
    for row in rows:
        log.info("m=%d eig %.1f ms, svd %.1f ms, speedup %.2fx", row["m"], row["ms_eig"], row["ms_svd"], row["speedup"])
    _emit(_dict_csv(rows, ["m", "ms_eig", "ms_svd", "speedup", "max_value_discrepancy"]), args.out)
    return EXIT_OK


def cmd_compare_bp(args, parser) -> int:
    if args.weights is None and args.dir is None:
        w, wq, delta = pipeline.bp_fixture(args.seed)
    else:
        bundle = _load_bundle(args, parser)
        qcfg = _qcfg(args, bundle.weight.cols)
        prep = pipeline.prepare_layer(bundle, qcfg, args.quantizer, args.damp)
        sel = nullspace.select(prep.basis.values, args.selector, args.t, args.exclude_top)
        delta = nullspace.build_projection(prep.basis, sel).delta
        w, wq = prep.w, prep.quant.w_q
    rows = pipeline.compare_bp(w, wq, delta, args.lambda_reg)
    worst = min(r["gap"] for r in rows)
    log.info("closed form beats every gradient-descent cell by at least %.3e", worst)
    fields = ["epochs", "lr", "objective_bp", "objective_closed", "objective_unit", "gap", "diverged"]
    _emit(_dict_csv(rows, fields), args.out)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "compare-bp": cmd_compare_bp,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args, parser)
    except DimensionError as exc:
        print(f"q2n: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericalError as exc:
        print(f"q2n: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArgumentError as exc:
        print(f"q2n: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Q2NError, OSError) as exc:
        print(f"q2n: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
