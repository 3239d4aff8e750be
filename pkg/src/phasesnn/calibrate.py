"""Activation-range calibration and weight normalization.

Statistics are gathered on the original model in one pass. Normalization
rewrites weights so that every post-activation value seen during
calibration lands in [0, 1]: conv blocks channel-wise, fully-connected and
pooling layers by their layer-wide maximum. A rewritten model computes
exactly the original activations divided by per-layer anchors, which the
tests verify directly.

A "block" is one weighted layer plus the BatchNorm / ResidualAdd / ReLU
layers that immediately follow it; the block's anchor is the activation
maximum at its last layer. BatchNorm shift parameters are rescaled in
place (gain and variance are untouched, the converter folds those into
thresholds). Max pooling keeps its input scale; average pooling re-anchors
through an output rescale so small averages still use the full code range.
"""

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import CalibrationError, UnsupportedLayerError
from .model import AnnModel, WEIGHTED_KINDS, forward_batch, infer_shapes

INPUT_LAYER = -1


def broadcast_anchor(anchor: np.ndarray, shape: tuple) -> np.ndarray:
    """Reshape a per-channel/per-unit anchor against an unbatched shape."""
    if len(shape) >= 3:  # channel-major image data
        return anchor.reshape(anchor.shape + (1,) * (len(shape) - 1))
    return anchor  # aligns with the last (feature) axis


@dataclass
class LayerStats:
    layer_index: int
    channel_max: np.ndarray
    layer_max: float


@dataclass
class CalibrationStats:
    per_layer: list
    input_stats: LayerStats
    count: int
    percentile: float

    def for_layer(self, index: int) -> LayerStats:
        if index == INPUT_LAYER:
            return self.input_stats
        return self.per_layer[index]


@dataclass
class NormalizedAnn:
    model: AnnModel
    stats: CalibrationStats
    anchors: list       # per layer: 1-D per-channel/per-unit scale
    input_anchor: np.ndarray
    modes: list         # per layer: "channel" | "layer" | None

    def normalized_input(self, x: np.ndarray) -> np.ndarray:
        """Scale raw inputs into the normalized model's input domain."""
        x = np.asarray(x, dtype=np.float64)
        return x / broadcast_anchor(self.input_anchor, self.model.input_shape)


def _channel_axis_reduce(values: np.ndarray):
    """(per-channel view, reduction axes) for a batched activation tensor.

    Rank >= 4 is channel-major image data (B, C, spatial...); rank 3 is a
    batch of node-feature matrices (B, N, F) reduced per feature; rank 2
    treats every unit as its own channel.
    """
    if values.ndim >= 4:
        return values, (0,) + tuple(range(2, values.ndim))
    return values, tuple(range(values.ndim - 1))


def _quantile_max(values: np.ndarray, percentile: float) -> np.ndarray:
    view, axes = _channel_axis_reduce(values)
    if percentile >= 1.0:
        cm = view.max(axis=axes)
    else:
        cm = np.quantile(view, percentile, axis=axes)
    return np.maximum(cm, 0.0)


def collect_stats(model: AnnModel, calib_inputs, percentile: float = 1.0) -> CalibrationStats:
    """Per-channel and per-layer activation maxima over a calibration batch.

    `percentile` in (0, 1] picks a linear-interpolation quantile instead of
    the exact maximum (1.0, the default).
    """
    if not (0.0 < percentile <= 1.0):
        raise CalibrationError(f"percentile {percentile} outside (0, 1]")
    batch = np.asarray(calib_inputs, dtype=np.float64)
    if batch.ndim == len(model.input_shape):
        batch = batch[None]
    if batch.shape[0] == 0:
        raise CalibrationError("empty calibration set")

    outputs = forward_batch(model, batch)
    per_layer = []
    dead_layers = []
    for i, out in enumerate(outputs):
        cm = _quantile_max(out, percentile)
        per_layer.append(LayerStats(i, cm, float(cm.max())))
        # only spike-feeding layers can meaningfully have dead channels
        if model.layers[i].kind in ("ReLU", "MaxPool", "AvgPool") and np.any(cm == 0.0):
            dead_layers.append(i)
    if dead_layers:
        warnings.warn(
            f"dead channels (zero activation max) at layers {dead_layers}",
            RuntimeWarning,
        )
    input_cm = _quantile_max(batch, percentile)
    return CalibrationStats(
        per_layer=per_layer,
        input_stats=LayerStats(INPUT_LAYER, input_cm, float(input_cm.max())),
        count=int(batch.shape[0]),
        percentile=percentile,
    )


def save_stats(stats: CalibrationStats, path) -> None:
    doc = {
        "count": stats.count,
        "percentile": stats.percentile,
        "input": {
            "channel_max": stats.input_stats.channel_max.tolist(),
            "layer_max": stats.input_stats.layer_max,
        },
        "per_layer": [
            {"layer": s.layer_index, "channel_max": s.channel_max.tolist(),
             "layer_max": s.layer_max}
            for s in stats.per_layer
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_stats(path) -> CalibrationStats:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    per_layer = [
        LayerStats(int(e["layer"]), np.asarray(e["channel_max"], dtype=np.float64),
                   float(e["layer_max"]))
        for e in doc["per_layer"]
    ]
    inp = doc["input"]
    return CalibrationStats(
        per_layer=per_layer,
        input_stats=LayerStats(INPUT_LAYER, np.asarray(inp["channel_max"], dtype=np.float64),
                               float(inp["layer_max"])),
        count=int(doc.get("count", 0)),
        percentile=float(doc.get("percentile", 1.0)),
    )


# ------------------------------------------------------------ normalization


def block_end(model: AnnModel, start: int) -> int:
    """Index of the last layer fused with the weighted layer at `start`.

    Accepts the chain weighted -> [BatchNorm] -> [ResidualAdd] -> [ReLU];
    any prefix of it is a valid block.
    """
    layers = model.layers
    j = start
    if j + 1 < len(layers) and layers[j + 1].kind == "BatchNorm":
        j += 1
    if j + 1 < len(layers) and layers[j + 1].kind == "ResidualAdd":
        j += 1
    if j + 1 < len(layers) and layers[j + 1].kind == "ReLU":
        j += 1
    return j


def _denominator(stat: LayerStats, size: int, mode: str, index: int) -> np.ndarray:
    if mode == "channel":
        denom = stat.channel_max.astype(np.float64).copy()
        if denom.size != size:
            raise CalibrationError(
                f"stats give {denom.size} channels, layer has {size}", index
            )
    else:
        denom = np.full(size, stat.layer_max, dtype=np.float64)
    if stat.layer_max <= 0.0:
        raise CalibrationError("every channel of this layer is dead", index)
    dead = denom <= 0.0
    if dead.any():
        warnings.warn(
            f"layer {index}: substituting layer max for {int(dead.sum())} "
            "dead channel(s)",
            RuntimeWarning,
        )
        denom[dead] = stat.layer_max
    return denom


def normalize(model: AnnModel, stats: CalibrationStats) -> NormalizedAnn:
    """Rewrite weights and biases so calibration activations lie in [0, 1]."""
    shapes = infer_shapes(model)
    layers = [replace(layer) for layer in model.layers]
    anchors = [None] * len(layers)
    modes = [None] * len(layers)

    input_anchor = _denominator(stats.input_stats, stats.input_stats.channel_max.size,
                                "channel", INPUT_LAYER)
    cur = input_anchor
    i = 0
    while i < len(layers):
        layer = layers[i]
        kind = layer.kind
        if kind in WEIGHTED_KINDS:
            end = block_end(model, i)
            mode = "channel" if kind == "Conv2d" else "layer"
            if kind == "Conv2d":
                out_units = shapes[i][0]
            elif kind == "Linear":
                out_units = shapes[i][-1]
            else:
                out_units = shapes[i][-1]
            denom = _denominator(stats.for_layer(end), out_units, mode, i)

            if kind == "Conv2d":
                if cur.size != layer.weights.shape[1]:
                    raise CalibrationError(
                        f"input anchors ({cur.size}) do not match conv input "
                        f"channels ({layer.weights.shape[1]})", i)
                layer.weights = (layer.weights * cur[None, :, None, None]
                                 / denom[:, None, None, None])
            elif kind == "Linear":
                if cur.size != layer.weights.shape[1]:
                    raise CalibrationError(
                        f"input anchors ({cur.size}) do not match linear input "
                        f"features ({layer.weights.shape[1]})", i)
                layer.weights = layer.weights * cur[None, :] / denom[:, None]
            else:  # SparseLinear: node mixing needs one uniform input scale
                if not np.all(cur == cur.flat[0]):
                    raise CalibrationError(
                        "sparse aggregation requires a layer-wise input scale", i)
                adj = layer.adjacency.copy()
                adj.data = adj.data * (cur.flat[0] / denom[0])
                layer.adjacency = adj
            if layer.bias is not None:
                layer.bias = layer.bias / denom

            for j in range(i + 1, end + 1):
                member = layers[j]
                if member.kind == "BatchNorm":
                    member.beta = member.beta / denom
                    member.running_mean = member.running_mean / denom
                elif member.kind == "ResidualAdd":
                    src = model.skip_source(j)
                    if anchors[src] is None:
                        raise CalibrationError(
                            f"skip source {src} has no anchor yet", j)
                    member.skip_scale = anchors[src] / denom
                anchors[j] = denom
                modes[j] = mode
            anchors[i] = denom
            modes[i] = mode
            cur = denom
            i = end + 1
        elif kind == "MaxPool":
            anchors[i] = cur  # first-spike pooling cannot rescale
            i += 1
        elif kind == "AvgPool":
            stat = stats.for_layer(i)
            if stat.layer_max <= 0.0:
                raise CalibrationError("average pool output is all dead", i)
            layer.out_scale = cur / stat.layer_max
            anchors[i] = np.full(cur.size, stat.layer_max)
            modes[i] = "layer"
            cur = anchors[i]
            i += 1
        elif kind == "Flatten":
            prev_shape = shapes[i - 1] if i else tuple(model.input_shape)
            per_channel = int(np.prod(prev_shape[1:])) if len(prev_shape) > 1 else 1
            cur = np.repeat(cur, per_channel)
            anchors[i] = cur
            i += 1
        else:
            raise UnsupportedLayerError(
                f"{kind} outside a weighted block cannot be normalized", i)

    out = AnnModel(model.name, model.input_shape, model.num_classes, layers,
                   list(model.skip_edges))
    return NormalizedAnn(out, stats, anchors, input_anchor, modes)
