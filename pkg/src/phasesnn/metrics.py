"""Spike accounting, energy-efficiency ratio, latency model and sweeps.

The efficiency ratio compares the MAC energy an equivalent dense network
would spend against the addition energy the spiking run actually spent,
using per-operation costs of 45nm arithmetic units: 4.6 pJ / 0.9 pJ for
FP32 MAC/add and 0.2 pJ / 0.03 pJ for INT8. Addition counts are exact
per-synapse event counts from the engine, not a rate approximation, and
per-image averages are reported so they compare directly against MAC
counts. The input layer is binary coded (multi-spike), so ratios are
reported both with and without the layer it drives.
"""

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConversionError
from .model import AnnModel, infer_shapes


@dataclass(frozen=True)
class EnergyModel:
    e_mac: float
    e_add: float
    label: str

    def __post_init__(self):
        if not self.e_mac > self.e_add > 0:
            raise ValueError("need e_mac > e_add > 0")


FP32 = EnergyModel(4.6, 0.9, "FP32")
INT8 = EnergyModel(0.2, 0.03, "INT8")


def alpha(op_ann, additions, energy: EnergyModel = FP32) -> float:
    """Energy ratio: MAC cost of the dense network over addition cost spent.

    `op_ann` and `additions` are aligned per-layer sequences (per-image
    counts). Zero additions yield an infinite ratio with a warning.
    """
    total_ops = float(np.sum(op_ann))
    total_adds = float(np.sum(additions))
    if total_adds == 0.0:
        warnings.warn("no additions recorded; energy ratio is unbounded",
                      RuntimeWarning)
        return math.inf
    return (energy.e_mac * total_ops) / (energy.e_add * total_adds)


def op_count_ann(model: AnnModel) -> list:
    """Per-layer MAC counts of the dense forward pass.

    Convolution counts output elements times kernel volume times input
    channels; linear counts rows times columns; sparse aggregation counts
    stored entries times feature width. Pooling, BatchNorm, ReLU and
    reshapes do no MACs.
    """
    shapes = infer_shapes(model)
    counts = []
    for i, layer in enumerate(model.layers):
        if layer.kind == "Conv2d":
            out_c, in_c, kh, kw = layer.weights.shape
            counts.append(int(np.prod(shapes[i])) * kh * kw * in_c)
        elif layer.kind == "Linear":
            lead = int(np.prod(shapes[i][:-1])) if len(shapes[i]) > 1 else 1
            counts.append(lead * layer.weights.size)
        elif layer.kind == "SparseLinear":
            counts.append(int(layer.adjacency.nnz) * int(shapes[i][-1]))
        else:
            counts.append(0)
    return counts


def latency(n_image: int, t: int, w: int, n_layers: int) -> int:
    """Total pipeline latency in phases for a stream of images."""
    if n_image < 1 or t < 1 or n_layers < 1 or w < 0:
        raise ValueError("latency arguments out of range")
    return n_image * (t + w) + w * (n_layers - 1)


@dataclass
class LayerRow:
    layer: int
    kind: str
    op_ann: float
    spikes: float
    additions: float
    spike_rate: float


@dataclass
class RunReport:
    rows: list
    accuracy: float
    alpha_fp32: float
    alpha_int8: float
    alpha_fp32_hidden: float
    alpha_int8_hidden: float
    t: int
    w: int
    q: float
    latency_total: int
    n_images: int
    seed: int | None = None
    single_spike_input: bool = False


def build_report(snn, ann: AnnModel, run, labels=None, seed=None) -> RunReport:
    """Fold one engine run plus the source network into a report."""
    n = run.logits.shape[0]
    ann_ops = op_count_ann(ann)
    rows = [LayerRow(
        layer=0, kind="input", op_ann=0.0,
        spikes=run.input_activity.spikes / n,
        additions=0.0,
        spike_rate=run.input_activity.spikes / n / max(run.input_activity.neurons, 1))]
    for i, (layer, act) in enumerate(zip(snn.layers, run.activities)):
        op = float(ann_ops[layer.ann_index]) if layer.ann_index >= 0 else 0.0
        rows.append(LayerRow(
            layer=i + 1, kind=layer.kind, op_ann=op,
            spikes=act.spikes / n, additions=act.additions / n,
            spike_rate=act.spikes / n / max(act.neurons, 1)))

    ops = [r.op_ann for r in rows]
    adds = [r.additions for r in rows]
    # layers beyond the first weighted one are driven by single-spike inputs
    first_weighted = next(i for i, r in enumerate(rows) if r.op_ann > 0)
    hidden_ops = ops[first_weighted + 1:]
    hidden_adds = adds[first_weighted + 1:]

    if labels is not None:
        preds = run.preds.reshape(len(labels))
        accuracy = float((preds == np.asarray(labels)).mean())
    else:
        accuracy = math.nan

    qs = {l.q_cur for l in snn.layers if l.fires and l.kind not in ("maxpool",)}
    q = qs.pop() if len(qs) == 1 else math.nan
    n_layers = len(snn.compute_layers)
    return RunReport(
        rows=rows, accuracy=accuracy,
        alpha_fp32=alpha(ops, adds, FP32), alpha_int8=alpha(ops, adds, INT8),
        alpha_fp32_hidden=alpha(hidden_ops, hidden_adds, FP32),
        alpha_int8_hidden=alpha(hidden_ops, hidden_adds, INT8),
        t=run.t, w=run.w, q=q,
        latency_total=latency(n, run.t, run.w, n_layers),
        n_images=n, seed=seed, single_spike_input=run.single_spike_input)


def report_csv(report: RunReport) -> str:
    """Render a report; one row per layer plus a summary row."""
    buf = io.StringIO()
    if report.seed is not None:
        buf.write(f"# seed={report.seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "kind", "op_ann", "spikes", "additions", "spike_rate"])
    for r in report.rows:
        writer.writerow([r.layer, r.kind, f"{r.op_ann:.6g}", f"{r.spikes:.6g}",
                         f"{r.additions:.6g}", f"{r.spike_rate:.8g}"])
    writer.writerow([])
    writer.writerow(["alpha_fp32", "alpha_int8", "accuracy", "T", "w", "Q",
                     "latency_total", "alpha_fp32_hidden", "alpha_int8_hidden",
                     "n_images"])
    writer.writerow([
        f"{report.alpha_fp32:.6g}", f"{report.alpha_int8:.6g}",
        f"{report.accuracy:.6g}", report.t, report.w, f"{report.q:.6g}",
        report.latency_total, f"{report.alpha_fp32_hidden:.6g}",
        f"{report.alpha_int8_hidden:.6g}", report.n_images])
    return buf.getvalue()


def sweep(norm, ann: AnnModel, data, labels, t: int, w: int, param: str, grid,
          schedule=1.3, seed=None, chunk: int = 256) -> list:
    """Accuracy and energy ratio per grid point of the wait timestep or base.

    Rebuilds the spiking model per point for the base sweep; the wait sweep
    reuses one build. Returns (value, RunReport) pairs in grid order.
    """
    from . import engine
    from .builder import build

    if param not in ("q", "w"):
        raise ConversionError(f"sweep parameter must be 'q' or 'w', not {param!r}")
    if len(list(grid)) == 0:
        raise ConversionError("empty sweep grid")
    results = []
    if param == "w":
        snn = build(norm, t=t, w=w, schedule=schedule)
        for value in grid:
            run = engine.infer_batch(snn, data, w=int(value), chunk=chunk)
            results.append((value, build_report(snn, ann, run, labels, seed=seed)))
    else:
        for value in grid:
            snn = build(norm, t=t, w=w, schedule=float(value))
            run = engine.infer_batch(snn, data, chunk=chunk)
            results.append((value, build_report(snn, ann, run, labels, seed=seed)))
    return results


def sweep_csv(results, param: str, seed=None) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([param, "accuracy", "alpha_fp32", "alpha_int8"])
    for value, report in results:
        writer.writerow([value, f"{report.accuracy:.6g}",
                         f"{report.alpha_fp32:.6g}", f"{report.alpha_int8:.6g}"])
    return buf.getvalue()
