"""Build a spiking model from a normalized network.

Each weighted block becomes one spiking layer. BatchNorm folds into the
firing threshold (gain over standard deviation) and the initial membrane
potential (shifted bias), never into the weights, which keeps the weight
distribution narrow for quantization. The threshold carries the round-off
shift (Q+1)/(2Q) unless the naive floor variant is requested.

Per-phase base manipulation is represented in time-invariant form: every
layer records the base of its incoming spikes (q_prev) and of its outgoing
spikes (q_cur); the engine weights arrivals by q_prev**-tau and compares
against threshold * q_cur**-t, which is algebraically identical to
multiplying the running potential by q_prev and rescaling the threshold by
q_prev/q_cur at every phase. The first hidden layer's 2/Q factor falls out
of q_prev being the binary input base.
"""

import json
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .calibrate import NormalizedAnn, block_end
from .codec import midpoint_factor
from .errors import ConversionError, ManifestError, UnsupportedLayerError
from .model import AnnModel, Layer, WEIGHTED_KINDS, infer_shapes

_KIND_MAP = {"Conv2d": "conv", "Linear": "linear", "SparseLinear": "sparse"}


@dataclass
class BaseSchedule:
    """Input coding base (fixed binary) and per-layer hidden spike bases."""

    q_hidden: object = 1.3  # scalar or sequence, one entry per firing layer
    q_in: float = 2.0

    def __post_init__(self):
        if self.q_in != 2.0:
            raise ConversionError("input coding base is fixed at 2")

    def expand(self, n_firing: int) -> list:
        if np.isscalar(self.q_hidden):
            qs = [float(self.q_hidden)] * n_firing
        else:
            qs = [float(q) for q in self.q_hidden]
            if len(qs) != n_firing:
                raise ConversionError(
                    f"schedule lists {len(qs)} bases, model has {n_firing} "
                    "firing layers")
        for q in qs:
            if not (1.0 < q <= 2.0):
                raise ConversionError(f"hidden base {q} outside (1, 2]")
        return qs


@dataclass
class SnnLayer:
    kind: str               # conv | linear | sparse | avgpool | maxpool | flatten
    q_prev: float
    q_cur: float
    fires: bool
    in_shape: tuple
    out_shape: tuple
    ann_index: int = -1     # weighted source layer in the ANN, for MAC counts
    weights: np.ndarray | None = None
    v_theta: np.ndarray | None = None   # per output channel/unit
    v_init: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    kernel: int = 0
    adjacency: sparse.csr_matrix | None = None
    skip_source: int | None = None      # spiking-layer index feeding the merge
    skip_weights: np.ndarray | None = None
    quant_scale: float | None = None

    @property
    def neurons(self) -> int:
        return int(np.prod(self.out_shape))


@dataclass
class SnnModel:
    name: str
    layers: list
    t: int
    w: int
    num_classes: int
    schedule: BaseSchedule
    input_anchor: np.ndarray
    input_shape: tuple
    mode: str = "round"     # round (threshold shift) | floor (naive)
    int8: bool = False

    @property
    def compute_layers(self) -> list:
        return [l for l in self.layers if l.kind != "flatten"]

    def firing_indices(self) -> list:
        return [i for i, l in enumerate(self.layers)
                if l.fires and l.kind not in ("maxpool", "flatten")]


def _flip_negative_gain(weights, bias, gamma, mean):
    """Channels with negative BN gain flip their incoming sign instead."""
    flip = gamma < 0
    if not np.any(flip):
        return weights, bias, gamma, mean
    weights = weights.copy()
    weights[flip] = -weights[flip]
    if bias is not None:
        bias = bias.copy()
        bias[flip] = -bias[flip]
    mean = mean.copy()
    mean[flip] = -mean[flip]
    return weights, bias, np.abs(gamma), mean


def build(norm: NormalizedAnn, t: int, w: int, schedule=None,
          threshold_shift: bool = True) -> SnnModel:
    """Convert a normalized network into a one-spike-per-neuron model."""
    if not isinstance(norm, NormalizedAnn):
        raise ConversionError("build requires a NormalizedAnn (missing stats)")
    if t < 1:
        raise ConversionError(f"timestep {t} must be >= 1")
    if not (0 <= w <= t):
        raise ConversionError(f"wait timestep {w} outside [0, {t}]")
    if schedule is None:
        schedule = BaseSchedule()
    elif np.isscalar(schedule):
        schedule = BaseSchedule(q_hidden=float(schedule))

    model = norm.model
    shapes = infer_shapes(model)
    layers = model.layers

    # segment the layer list, then expand the schedule over firing layers
    i = 0
    segments = []
    while i < len(layers):
        kind = layers[i].kind
        if kind in WEIGHTED_KINDS:
            end = block_end(model, i)
            segments.append(("block", i, end))
            i = end + 1
        elif kind in ("MaxPool", "AvgPool", "Flatten"):
            segments.append((kind.lower(), i, i))
            i += 1
        else:
            raise UnsupportedLayerError(
                f"{kind} cannot start a convertible segment", i)
    if not segments or segments[-1][0] != "block":
        raise UnsupportedLayerError("network must end in a weighted layer")
    for idx, (seg_kind, start, end) in enumerate(segments):
        if seg_kind == "block" and idx < len(segments) - 1 \
                and layers[end].kind not in ("ReLU",):
            raise UnsupportedLayerError(
                "hidden weighted blocks must end in a ReLU", end)
    n_firing = sum(1 for s in segments[:-1] if s[0] in ("block", "avgpool"))
    qs = iter(schedule.expand(n_firing))

    mid = midpoint_factor
    snn_layers = []
    ann_end_to_snn = {}
    chain_q = schedule.q_in
    for seg_index, (seg_kind, start, end) in enumerate(segments):
        is_last = seg_index == len(segments) - 1
        in_shape = tuple(model.input_shape) if start == 0 else shapes[start - 1]
        out_shape = shapes[end]
        if seg_kind == "maxpool":
            layer = layers[start]
            snn_layers.append(SnnLayer(
                kind="maxpool", q_prev=chain_q, q_cur=chain_q, fires=True,
                in_shape=in_shape, out_shape=out_shape, ann_index=start,
                kernel=layer.kernel, stride=layer.stride))
        elif seg_kind == "flatten":
            snn_layers.append(SnnLayer(
                kind="flatten", q_prev=chain_q, q_cur=chain_q, fires=False,
                in_shape=in_shape, out_shape=out_shape, ann_index=start))
        elif seg_kind == "avgpool":
            layer = layers[start]
            if layer.out_scale is None:
                raise ConversionError(
                    "average pool lacks its normalization scale; "
                    "run calibration first", start)
            q_cur = next(qs)
            channels = out_shape[0]
            shift = mid(q_cur) if threshold_shift else 1.0
            snn_layers.append(SnnLayer(
                kind="avgpool", q_prev=chain_q, q_cur=q_cur, fires=True,
                in_shape=in_shape, out_shape=out_shape, ann_index=start,
                kernel=layer.kernel, stride=layer.stride,
                weights=layer.out_scale / float(layer.kernel ** 2),
                v_theta=np.full(channels, shift),
                v_init=np.zeros(channels)))
            chain_q = q_cur
        else:  # weighted block
            layer = layers[start]
            bn = next((layers[j] for j in range(start + 1, end + 1)
                       if layers[j].kind == "BatchNorm"), None)
            res_idx = next((j for j in range(start + 1, end + 1)
                            if layers[j].kind == "ResidualAdd"), None)
            weights = layer.weights if layer.kind != "SparseLinear" else None
            bias = layer.bias
            units = out_shape[0] if layer.kind == "Conv2d" else out_shape[-1]

            if bn is not None:
                if layer.kind == "SparseLinear":
                    raise UnsupportedLayerError(
                        "BatchNorm after sparse aggregation is not convertible",
                        start + 1)
                if np.any(bn.gamma == 0.0):
                    raise ConversionError("BatchNorm gain of zero", start + 1)
                weights, bias, gamma, mean = _flip_negative_gain(
                    weights, bias, bn.gamma, bn.running_mean)
                factor = np.sqrt(bn.running_var) / gamma
                v_init = (bias if bias is not None else 0.0) \
                    + bn.beta * factor - mean
            else:
                factor = np.ones(units)
                v_init = bias.copy() if bias is not None else np.zeros(units)
            v_init = np.broadcast_to(np.asarray(v_init, dtype=np.float64),
                                     (units,)).copy()

            fires = not is_last
            q_cur = next(qs) if fires else chain_q
            shift = mid(q_cur) if threshold_shift else 1.0
            snn = SnnLayer(
                kind=_KIND_MAP[layer.kind], q_prev=chain_q, q_cur=q_cur,
                fires=fires, in_shape=in_shape, out_shape=out_shape,
                ann_index=start, weights=weights,
                v_theta=factor * shift, v_init=v_init,
                stride=layer.stride, padding=layer.padding,
                adjacency=layer.adjacency)
            if res_idx is not None:
                merge = layers[res_idx]
                if merge.skip_scale is None:
                    raise ConversionError(
                        "residual merge lacks its normalization scale", res_idx)
                src = model.skip_source(res_idx)
                if src not in ann_end_to_snn:
                    raise ConversionError(
                        f"skip source layer {src} is not a spiking layer output",
                        res_idx)
                snn.skip_source = ann_end_to_snn[src]
                snn.skip_weights = factor * merge.skip_scale
            snn_layers.append(snn)
            chain_q = q_cur
        ann_end_to_snn[end] = len(snn_layers) - 1

    # base-chain consistency across residual merges
    for k, snn in enumerate(snn_layers):
        if snn.skip_source is not None:
            src_q = snn_layers[snn.skip_source].q_cur
            if src_q != snn.q_prev:
                raise ConversionError(
                    f"skip branch base {src_q} != merge input base {snn.q_prev} "
                    f"at spiking layer {k}")

    return SnnModel(
        name=model.name, layers=snn_layers, t=t, w=w,
        num_classes=model.num_classes, schedule=schedule,
        input_anchor=norm.input_anchor.copy(),
        input_shape=tuple(model.input_shape),
        mode="round" if threshold_shift else "floor")


def quantize_weights(snn: SnnModel, bits: int = 8) -> SnnModel:
    """Symmetric per-tensor INT8 quantization of learned weights.

    Thresholds, initial potentials and pooling scales stay in full
    precision (batch norm lives there, not in the weights). Dequantized
    weights are stored so the simulation path is unchanged in kind.
    """
    if bits != 8:
        raise ConversionError("only 8-bit quantization is supported")
    qmax = 127.0
    out_layers = []
    for i, layer in enumerate(snn.layers):
        if layer.kind in ("conv", "linear"):
            w = layer.weights
        elif layer.kind == "sparse":
            w = layer.adjacency.data
        else:
            out_layers.append(layer)
            continue
        scale = float(np.max(np.abs(w))) / qmax
        if scale == 0.0:
            warnings.warn(f"spiking layer {i}: all-zero weights left unquantized",
                          RuntimeWarning)
            out_layers.append(replace(layer, quant_scale=0.0))
            continue
        q = np.sign(w) * np.floor(np.abs(w) / scale + 0.5)
        q = np.clip(q, -qmax, qmax)
        deq = q * scale
        if layer.kind == "sparse":
            adj = layer.adjacency.copy()
            adj.data = deq
            out_layers.append(replace(layer, adjacency=adj, quant_scale=scale))
        else:
            out_layers.append(replace(layer, weights=deq, quant_scale=scale))
    return replace(snn, layers=out_layers, int8=True)


def plan_gcn(ann: AnnModel) -> AnnModel:
    """Split graph-convolution steps into separately spiking layers.

    A graph layer arrives as Linear (feature mixing) directly followed by
    SparseLinear (neighborhood aggregation); an activation boundary is
    inserted between them so each step re-encodes into its own spikes.
    """
    layers = []
    index_map = {}
    for i, layer in enumerate(ann.layers):
        index_map[i] = len(layers)
        layers.append(layer)
        nxt = ann.layers[i + 1] if i + 1 < len(ann.layers) else None
        if layer.kind == "Linear" and nxt is not None and nxt.kind == "SparseLinear":
            layers.append(Layer(kind="ReLU"))
    skip_edges = [(index_map[s], index_map[m]) for s, m in ann.skip_edges]
    return AnnModel(ann.name, ann.input_shape, ann.num_classes, layers, skip_edges)


# ------------------------------------------------------------ serialization


def save_snn(snn: SnnModel, path) -> None:
    """Write snn.json plus a sibling .bin blob (float32, little endian)."""
    blob = bytearray()

    def put(arr):
        start = len(blob)
        data = np.ascontiguousarray(arr, dtype=np.float64).astype("<f4")
        blob.extend(data.tobytes())
        return {"offset_bytes": start, "length": int(data.size),
                "shape": list(np.shape(arr))}

    entries = []
    for layer in snn.layers:
        entry = {
            "kind": layer.kind, "q_prev": layer.q_prev, "q_cur": layer.q_cur,
            "fires": layer.fires, "in_shape": list(layer.in_shape),
            "out_shape": list(layer.out_shape), "ann_index": layer.ann_index,
            "stride": layer.stride, "padding": layer.padding,
            "kernel": layer.kernel,
        }
        if layer.weights is not None:
            entry["weights"] = put(layer.weights)
        if layer.v_theta is not None:
            entry["v_theta"] = put(layer.v_theta)
        if layer.v_init is not None:
            entry["v_init"] = put(layer.v_init)
        if layer.adjacency is not None:
            entry["adjacency"] = put(layer.adjacency.data)
            entry["indptr"] = layer.adjacency.indptr.tolist()
            entry["indices"] = layer.adjacency.indices.tolist()
            entry["adj_shape"] = list(layer.adjacency.shape)
        if layer.skip_source is not None:
            entry["skip_source"] = layer.skip_source
            entry["skip_weights"] = put(layer.skip_weights)
        if layer.quant_scale is not None:
            entry["quant_scale"] = layer.quant_scale
        entries.append(entry)

    blob_name = os.path.splitext(os.path.basename(path))[0] + ".bin"
    manifest = {
        "name": snn.name, "t": snn.t, "w": snn.w, "mode": snn.mode,
        "num_classes": snn.num_classes, "int8": snn.int8,
        "schedule": {"q_in": snn.schedule.q_in,
                     "q_hidden": snn.schedule.expand(len(snn.firing_indices()))},
        "input_anchor": snn.input_anchor.tolist(),
        "input_shape": list(snn.input_shape),
        "blob": blob_name,
        "layers": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(os.path.dirname(path) or ".", blob_name), "wb") as fh:
        fh.write(bytes(blob))


def load_snn(path) -> SnnModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from None
    blob_path = os.path.join(os.path.dirname(path) or ".", manifest["blob"])
    try:
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read {blob_path}: {exc}") from None

    def get(spec):
        arr = np.frombuffer(blob, dtype="<f4", count=spec["length"],
                            offset=spec["offset_bytes"]).astype(np.float64)
        return arr.reshape(spec["shape"])

    layers = []
    for i, entry in enumerate(manifest["layers"]):
        layer = SnnLayer(
            kind=entry["kind"], q_prev=float(entry["q_prev"]),
            q_cur=float(entry["q_cur"]), fires=bool(entry["fires"]),
            in_shape=tuple(entry["in_shape"]), out_shape=tuple(entry["out_shape"]),
            ann_index=int(entry.get("ann_index", -1)),
            stride=int(entry.get("stride", 1)), padding=int(entry.get("padding", 0)),
            kernel=int(entry.get("kernel", 0)),
            quant_scale=entry.get("quant_scale"))
        if "weights" in entry:
            layer.weights = get(entry["weights"])
        if "v_theta" in entry:
            layer.v_theta = get(entry["v_theta"])
        if "v_init" in entry:
            layer.v_init = get(entry["v_init"])
        if "adjacency" in entry:
            layer.adjacency = sparse.csr_matrix(
                (get(entry["adjacency"]), entry["indices"], entry["indptr"]),
                shape=tuple(entry["adj_shape"]))
        if "skip_source" in entry:
            layer.skip_source = int(entry["skip_source"])
            layer.skip_weights = get(entry["skip_weights"])
        layers.append(layer)

    schedule = BaseSchedule(q_hidden=manifest["schedule"]["q_hidden"],
                            q_in=manifest["schedule"]["q_in"])
    return SnnModel(
        name=manifest["name"], layers=layers, t=int(manifest["t"]),
        w=int(manifest["w"]), num_classes=int(manifest["num_classes"]),
        schedule=schedule,
        input_anchor=np.asarray(manifest["input_anchor"], dtype=np.float64),
        input_shape=tuple(manifest["input_shape"]),
        mode=manifest.get("mode", "round"), int8=bool(manifest.get("int8", False)))
