"""Command-line pipeline: calibrate -> convert -> run / compare / sweeps.

Any flag may also be given in a TOML config file (--config); explicit
flags win. Artifacts are written atomically (temp file, then rename).
Exit codes: 0 success, 1 validation problem, 2 I/O or format problem,
3 numeric failure.
"""

import argparse
import math
import os
import sys
import tempfile

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import builder as bd
from . import calibrate as cal
from . import codec, dataio, engine, metrics
from .errors import (
    BlobLayoutError,
    CalibrationError,
    ConversionError,
    ManifestError,
    NonFiniteWeightError,
    PhasesnnError,
    ShapeMismatchError,
    UnsupportedLayerError,
)
from .model import argmax_class, forward_batch, load_model

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _atomic_write(path, text) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_grid(text: str, integer=False):
    try:
        lo, hi, step = (float(tok) for tok in text.split(":"))
    except ValueError:
        raise CalibrationError(f"grid {text!r} is not lo:hi:step") from None
    if step <= 0 or hi < lo:
        raise CalibrationError(f"grid {text!r} is empty or reversed")
    n = int(round((hi - lo) / step)) + 1
    values = [round(lo + i * step, 10) for i in range(n) if lo + i * step <= hi + 1e-9]
    if integer:
        values = [int(v) for v in values]
    return values


def _load_labeled_batch(args):
    data = dataio.load_batch(args.data)
    labels = dataio.load_labels(args.labels)
    if data.shape[0] == 0:
        raise CalibrationError("empty dataset")
    if len(labels) != data.shape[0]:
        raise CalibrationError(
            f"{data.shape[0]} samples but {len(labels)} labels")
    if args.limit and args.limit < data.shape[0]:
        rng = np.random.default_rng(args.seed)
        pick = rng.choice(data.shape[0], size=args.limit, replace=False)
        data, labels = data[pick], labels[pick]
    return data, labels


def _normalized_from_files(args):
    model = load_model(args.model)
    if getattr(args, "plan_gcn", False):
        model = bd.plan_gcn(model)
    stats = cal.load_stats(args.stats)
    return model, cal.normalize(model, stats)


def _resolve_q(args):
    if str(args.q).lower() == "auto":
        grid = _parse_grid(args.q_grid)
        q = codec.optimal_q(args.t, args.mu, args.sigma, grid,
                            points=args.mape_points)
        print(f"auto-selected base q={q}")
        if not (1.0 < q <= 2.0):
            raise ConversionError(f"auto-selected base {q} unusable")
        return q
    return float(args.q)


# ------------------------------------------------------------- subcommands


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    if args.plan_gcn:
        model = bd.plan_gcn(model)
    batch = dataio.load_batch(args.calib)
    if batch.shape[0] == 0:
        raise CalibrationError("empty dataset")
    stats = cal.collect_stats(model, batch, percentile=args.percentile)
    cal.save_stats(stats, args.out + ".tmp")
    os.replace(args.out + ".tmp", args.out)
    print(f"calibrated on {stats.count} samples -> {args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    _, norm = _normalized_from_files(args)
    q = _resolve_q(args)
    snn = bd.build(norm, t=args.t, w=args.w, schedule=q,
                   threshold_shift=not args.no_threshold_shift)
    if args.int8:
        snn = bd.quantize_weights(snn)
    bd.save_snn(snn, args.out)
    kinds = "/".join(l.kind for l in snn.layers)
    print(f"converted {snn.name}: T={snn.t} w={snn.w} q={q} "
          f"mode={snn.mode} int8={snn.int8} layers={kinds} -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    snn = bd.load_snn(args.snn)
    data, labels = _load_labeled_batch(args)
    ann = load_model(args.model) if args.model else None
    run = engine.infer_batch(snn, data, w=args.w,
                             single_spike_input=args.single_spike_input)
    if ann is not None:
        report = metrics.build_report(snn, ann, run, labels, seed=args.seed)
        _atomic_write(args.report, metrics.report_csv(report))
        print(f"accuracy={report.accuracy:.4f} alpha_fp32={report.alpha_fp32:.3f} "
              f"alpha_int8={report.alpha_int8:.3f} -> {args.report}")
    else:
        accuracy = float((run.preds.reshape(len(labels)) == labels).mean())
        lines = [f"# seed={args.seed}", "accuracy,T,w,n_images",
                 f"{accuracy:.6g},{run.t},{run.w},{len(labels)}", ""]
        _atomic_write(args.report, "\n".join(lines))
        print(f"accuracy={accuracy:.4f} -> {args.report} "
              "(pass --model for spike accounting)")
    return EXIT_OK


def cmd_compare(args) -> int:
    snn = bd.load_snn(args.snn)
    ann = load_model(args.model)
    data, labels = _load_labeled_batch(args)
    logits = forward_batch(ann, data)[-1]
    ann_preds = np.array([argmax_class(row) for row in logits])
    ann_acc = float((ann_preds == labels).mean())
    run = engine.infer_batch(snn, data, w=args.w)
    snn_acc = float((run.preds.reshape(len(labels)) == labels).mean())
    print(f"ANN accuracy: {ann_acc:.4f}")
    print(f"SNN accuracy: {snn_acc:.4f}  (T={run.t}, w={run.w})")
    print(f"conversion loss: {(ann_acc - snn_acc) * 100:.2f} points")
    if args.report:
        report = metrics.build_report(snn, ann, run, labels, seed=args.seed)
        _atomic_write(args.report, metrics.report_csv(report))
    return EXIT_OK


def cmd_sweep_q(args) -> int:
    grid = _parse_grid(args.grid)
    lines = [f"# seed={args.seed}", "q,mape"]
    for q in grid:
        err = codec.mape(codec.CodecConfig(q, args.t), args.mu, args.sigma,
                         points=args.mape_points)
        lines.append(f"{q},{err:.8g}")
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"swept {len(grid)} bases -> {args.out}")
    return EXIT_OK


def cmd_sweep_w(args) -> int:
    ann, norm = _normalized_from_files(args)
    data, labels = _load_labeled_batch(args)
    q = _resolve_q(args)
    grid = _parse_grid(args.grid, integer=True)
    results = metrics.sweep(norm, ann, data, labels, t=args.t, w=max(grid),
                            param="w", grid=grid, schedule=q, seed=args.seed)
    _atomic_write(args.report, metrics.sweep_csv(results, "w", seed=args.seed))
    print(f"swept w over {grid} -> {args.report}")
    return EXIT_OK


# -------------------------------------------------------------- arg wiring


def _add_common(sub):
    sub.add_argument("--config", help="TOML file supplying defaults for any flag")
    sub.add_argument("--seed", type=int, default=0,
                     help="seed recorded in report headers and used for --limit")


def _add_q_flags(sub):
    sub.add_argument("--q", default="auto",
                     help="spike base in (1, 2], or 'auto' to minimize coding error")
    sub.add_argument("--q-grid", default="1.0:2.0:0.01",
                     help="search grid for --q auto, as lo:hi:step")
    sub.add_argument("--mu", type=float, default=0.0)
    sub.add_argument("--sigma", type=float, default=1.0)
    sub.add_argument("--mape-points", type=int, default=1_000_000,
                     help="quadrature nodes for the coding-error integral")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasesnn",
        description="Convert ReLU networks to one-spike-per-neuron models, "
                    "simulate them, and report accuracy/energy/latency.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("calibrate", help="collect activation maxima")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--calib", required=True, help="calibration batch .bin")
    p.add_argument("--percentile", type=float, default=1.0)
    p.add_argument("--plan-gcn", action="store_true",
                   help="split graph-convolution steps before calibration")
    p.add_argument("--out", default="stats.json")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = subs.add_parser("convert", help="build the spiking model")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--int8", action="store_true")
    p.add_argument("--no-threshold-shift", action="store_true",
                   help="naive floor coding instead of round-off")
    p.add_argument("--plan-gcn", action="store_true")
    p.add_argument("--out", default="snn.json")
    _add_q_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_convert)

    p = subs.add_parser("run", help="simulate inference over a batch")
    p.add_argument("--snn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--model", help="source model directory, for MAC accounting")
    p.add_argument("--w", type=int, default=None)
    p.add_argument("--single-spike-input", action="store_true")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--report", default="report.csv")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("compare", help="ANN vs SNN accuracy on one batch")
    p.add_argument("--model", required=True)
    p.add_argument("--snn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--w", type=int, default=None)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--report")
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    p = subs.add_parser("sweep-q", help="coding-error sweep over the base")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--grid", default="1.0:2.0:0.01")
    p.add_argument("--mape-points", type=int, default=1_000_000)
    p.add_argument("--out", default="qsweep.csv")
    _add_common(p)
    p.set_defaults(func=cmd_sweep_q)

    p = subs.add_parser("sweep-w", help="accuracy sweep over the wait timestep")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--grid", default="0:16:2")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--plan-gcn", action="store_true")
    p.add_argument("--report", default="wsweep.csv")
    _add_q_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep_w)

    return parser


def _apply_config(parser, argv):
    """Let a TOML file supply defaults; command-line flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    args = parser.parse_args(argv)
    if not known.config:
        return args
    try:
        with open(known.config, "rb") as fh:
            table = tomllib.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read config {known.config}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CalibrationError(f"config field error: {exc}") from None
    given = {a.split("=")[0].lstrip("-").replace("-", "_")
             for a in argv if a.startswith("--")}
    for key, value in table.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CalibrationError(f"config field {key!r} is not a known flag")
        if attr not in given:
            setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except (ManifestError, BlobLayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteWeightError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CalibrationError, ConversionError, ShapeMismatchError,
            UnsupportedLayerError, PhasesnnError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
