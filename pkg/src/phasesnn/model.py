"""Trained ReLU network representation, interchange I/O and reference forward.

On disk a model is `model.json` plus `weights.bin`, a concatenation of
little-endian float32 arrays at manifest byte offsets. In memory all
arithmetic is float64 so storage precision stays separate from conversion
error. Arrays are frozen after load; the forward pass never mutates state
and may be called concurrently.

Layout is fixed channel-major: conv tensors are (C, H, W) with conv weights
(out_c, in_c, kh, kw). Sparse matrices (graph adjacency) keep their CSR
structure in the manifest and their values in the blob.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .errors import (
    BlobLayoutError,
    ManifestError,
    NonFiniteWeightError,
    ShapeMismatchError,
    UnsupportedLayerError,
)

LAYER_KINDS = (
    "Conv2d",
    "Linear",
    "SparseLinear",
    "BatchNorm",
    "ReLU",
    "MaxPool",
    "AvgPool",
    "ResidualAdd",
    "Flatten",
)

WEIGHTED_KINDS = ("Conv2d", "Linear", "SparseLinear")

# kinds a ReLU may directly follow
_RELU_PRED = ("Conv2d", "Linear", "SparseLinear", "BatchNorm", "ResidualAdd")


@dataclass
class Layer:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    kernel: int = 0
    adjacency: sparse.csr_matrix | None = None
    # set by calibration.normalize: per-channel rescale of the skip branch
    # (ResidualAdd) or of the pooled output (AvgPool)
    skip_scale: np.ndarray | None = None
    out_scale: np.ndarray | None = None


@dataclass
class AnnModel:
    name: str
    input_shape: tuple
    num_classes: int
    layers: list
    skip_edges: list = field(default_factory=list)

    def skip_source(self, merge_index: int):
        for src, merge in self.skip_edges:
            if merge == merge_index:
                return src
        return None


def _freeze(arr):
    if arr is not None:
        arr.setflags(write=False)
    return arr


def _read_array(blob, spec, index, name):
    try:
        offset, length = int(spec["offset_bytes"]), int(spec["length"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad {name} offsets: {exc}", index) from None
    if offset < 0 or offset + 4 * length > len(blob):
        raise BlobLayoutError(
            f"{name} at bytes [{offset}, {offset + 4 * length}) exceeds blob of "
            f"{len(blob)} bytes",
            index,
        )
    arr = np.frombuffer(blob, dtype="<f4", count=length, offset=offset).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteWeightError(f"{name} contains non-finite values", index)
    return arr


def _load_layer(entry, blob, index):
    kind = entry.get("kind")
    if kind not in LAYER_KINDS:
        raise UnsupportedLayerError(f"unknown layer kind {kind!r}", index)
    layer = Layer(kind=kind)

    if kind in ("Conv2d", "Linear"):
        shape = tuple(entry.get("shape", ()))
        if not shape:
            raise ManifestError("missing weight shape", index)
        w = _read_array(blob, entry, index, "weights")
        if w.size != int(np.prod(shape)):
            raise BlobLayoutError(
                f"weight length {w.size} does not match shape {shape}", index
            )
        layer.weights = w.reshape(shape)
        if "bias" in entry:
            layer.bias = _read_array(blob, entry["bias"], index, "bias")
        layer.stride = int(entry.get("stride", 1))
        layer.padding = int(entry.get("padding", 0))
    elif kind == "SparseLinear":
        shape = tuple(entry.get("shape", ()))
        try:
            indptr = np.asarray(entry["indptr"], dtype=np.int64)
            indices = np.asarray(entry["indices"], dtype=np.int64)
        except KeyError as exc:
            raise ManifestError(f"sparse layer missing {exc}", index) from None
        values = _read_array(blob, entry, index, "sparse values")
        if len(indptr) != shape[0] + 1 or values.size != len(indices):
            raise BlobLayoutError("CSR structure inconsistent with values", index)
        layer.adjacency = sparse.csr_matrix((values, indices, indptr), shape=shape)
    elif kind == "BatchNorm":
        bn = entry.get("bn")
        if not bn:
            raise ManifestError("BatchNorm without bn offsets", index)
        parts = {}
        for name in ("gamma", "beta", "mean", "var"):
            if name not in bn:
                raise ManifestError(f"bn missing {name}", index)
            parts[name] = _read_array(blob, bn[name], index, f"bn {name}")
        sizes = {p.size for p in parts.values()}
        if len(sizes) != 1:
            raise ManifestError("bn parameter lengths differ", index)
        if np.any(parts["var"] <= 0):
            raise ManifestError("bn variance must be positive", index)
        layer.gamma, layer.beta = parts["gamma"], parts["beta"]
        layer.running_mean, layer.running_var = parts["mean"], parts["var"]
    elif kind in ("MaxPool", "AvgPool"):
        layer.kernel = int(entry.get("kernel", 2))
        layer.stride = int(entry.get("stride", layer.kernel))
        if layer.kernel < 1 or layer.stride < 1:
            raise ManifestError("pool kernel/stride must be >= 1", index)

    for arr in (layer.weights, layer.bias, layer.gamma, layer.beta,
                layer.running_mean, layer.running_var):
        _freeze(arr)
    return layer


def load_model(path) -> AnnModel:
    """Read and validate a model directory (model.json + weights.bin)."""
    manifest_path = os.path.join(path, "model.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read {manifest_path}: {exc}") from None
    try:
        with open(os.path.join(path, "weights.bin"), "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read weights.bin: {exc}") from None

    for key in ("name", "input_shape", "num_classes", "layers"):
        if key not in manifest:
            raise ManifestError(f"manifest missing {key!r}")

    layers = [_load_layer(e, blob, i) for i, e in enumerate(manifest["layers"])]
    model = AnnModel(
        name=str(manifest["name"]),
        input_shape=tuple(manifest["input_shape"]),
        num_classes=int(manifest["num_classes"]),
        layers=layers,
        skip_edges=[tuple(e) for e in manifest.get("skip_edges", [])],
    )
    validate_graph(model)
    infer_shapes(model)
    return model


def save_model(model: AnnModel, path) -> None:
    """Write a model directory in the interchange layout."""
    os.makedirs(path, exist_ok=True)
    blob = bytearray()

    def put(arr):
        start = len(blob)
        data = np.ascontiguousarray(arr, dtype=np.float64).astype("<f4")
        blob.extend(data.tobytes())
        return {"offset_bytes": start, "length": int(data.size)}

    entries = []
    for layer in model.layers:
        entry = {"kind": layer.kind}
        if layer.kind in ("Conv2d", "Linear"):
            entry.update(put(layer.weights))
            entry["shape"] = list(layer.weights.shape)
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
            if layer.bias is not None:
                entry["bias"] = put(layer.bias)
        elif layer.kind == "SparseLinear":
            adj = layer.adjacency
            entry.update(put(adj.data))
            entry["shape"] = list(adj.shape)
            entry["indptr"] = adj.indptr.tolist()
            entry["indices"] = adj.indices.tolist()
        elif layer.kind == "BatchNorm":
            entry["bn"] = {
                "gamma": put(layer.gamma),
                "beta": put(layer.beta),
                "mean": put(layer.running_mean),
                "var": put(layer.running_var),
            }
        elif layer.kind in ("MaxPool", "AvgPool"):
            entry["kernel"] = layer.kernel
            entry["stride"] = layer.stride
        entries.append(entry)

    manifest = {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": entries,
        "skip_edges": [list(e) for e in model.skip_edges],
    }
    with open(os.path.join(path, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        fh.write(bytes(blob))


def validate_graph(model: AnnModel) -> None:
    layers = model.layers
    for i, layer in enumerate(layers):
        if layer.kind == "ReLU":
            if i == 0 or layers[i - 1].kind not in _RELU_PRED:
                raise ManifestError("ReLU must follow a weighted/BN/merge layer", i)
    if layers and layers[-1].kind == "ReLU":
        raise ManifestError("output layer must not be a ReLU", len(layers) - 1)
    for src, merge in model.skip_edges:
        if not (0 <= src < merge < len(layers)):
            raise ManifestError(f"skip edge ({src}, {merge}) is not feed-forward")
        if layers[merge].kind != "ResidualAdd":
            raise ManifestError(f"skip edge target {merge} is not a ResidualAdd")
    for i, layer in enumerate(layers):
        if layer.kind == "ResidualAdd" and model.skip_source(i) is None:
            raise ManifestError("ResidualAdd without a skip edge", i)


def infer_shapes(model: AnnModel):
    """Output shape of every layer; raises on inconsistent geometry."""
    shape = tuple(model.input_shape)
    shapes = []
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "Conv2d":
            if len(shape) != 3:
                raise ShapeMismatchError(f"Conv2d input rank {len(shape)} != 3", i)
            out_c, in_c, kh, kw = layer.weights.shape
            c, h, w = shape
            if in_c != c:
                raise ShapeMismatchError(
                    f"Conv2d expects {in_c} input channels, got {c}", i
                )
            ho = (h + 2 * layer.padding - kh) // layer.stride + 1
            wo = (w + 2 * layer.padding - kw) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ShapeMismatchError("Conv2d output collapses to nothing", i)
            shape = (out_c, ho, wo)
        elif kind == "Linear":
            out_f, in_f = layer.weights.shape
            if shape[-1] != in_f:
                raise ShapeMismatchError(
                    f"Linear expects {in_f} features, got {shape[-1]}", i
                )
            shape = shape[:-1] + (out_f,)
        elif kind == "SparseLinear":
            rows, cols = layer.adjacency.shape
            if len(shape) != 2 or shape[0] != cols:
                raise ShapeMismatchError(
                    f"SparseLinear expects ({cols}, *) input, got {shape}", i
                )
            shape = (rows, shape[1])
        elif kind in ("MaxPool", "AvgPool"):
            if len(shape) != 3:
                raise ShapeMismatchError("pooling needs (C, H, W) input", i)
            c, h, w = shape
            k, s = layer.kernel, layer.stride
            shape = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif kind == "Flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "BatchNorm":
            if layer.gamma.size != shape[0]:
                raise ShapeMismatchError(
                    f"BatchNorm over {layer.gamma.size} channels, input has {shape[0]}", i
                )
        elif kind == "ResidualAdd":
            src = model.skip_source(i)
            src_shape = shapes[src]
            if src_shape != shape:
                raise ShapeMismatchError(
                    f"ResidualAdd merges {src_shape} into {shape}", i
                )
        # ReLU keeps shape
        shapes.append(shape)
    return shapes


# ------------------------------------------------------------ forward pass


def _conv2d(x, weights, bias, stride, padding):
    """x (B, C, H, W) float64 -> (B, O, Ho, Wo) via im2col matmul."""
    out_c, in_c, kh, kw = weights.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, in_c * kh * kw)
    out = cols @ weights.reshape(out_c, -1).T
    out = out.transpose(0, 2, 1).reshape(b, out_c, ho, wo)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _pool2d(x, kernel, stride, reduce_fn):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return reduce_fn(win, axis=(-2, -1))


def _batchnorm(x, layer):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    scale = (layer.gamma / np.sqrt(layer.running_var)).reshape(shape)
    shift = (layer.beta - layer.running_mean * layer.gamma
             / np.sqrt(layer.running_var)).reshape(shape)
    return x * scale + shift


def _apply_layer(model, layer, index, x, outputs):
    kind = layer.kind
    if kind == "Conv2d":
        return _conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
    if kind == "Linear":
        out = x @ layer.weights.T
        if layer.bias is not None:
            out = out + layer.bias
        return out
    if kind == "SparseLinear":
        return np.stack([layer.adjacency @ sample for sample in x])
    if kind == "BatchNorm":
        return _batchnorm(x, layer)
    if kind == "ReLU":
        return np.maximum(x, 0.0)
    if kind == "MaxPool":
        return _pool2d(x, layer.kernel, layer.stride, np.max)
    if kind == "AvgPool":
        out = _pool2d(x, layer.kernel, layer.stride, np.mean)
        if layer.out_scale is not None:
            out = out * layer.out_scale[None, :, None, None]
        return out
    if kind == "Flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "ResidualAdd":
        skip = outputs[model.skip_source(index)]
        if layer.skip_scale is not None:
            skip = skip * layer.skip_scale.reshape((1, -1) + (1,) * (x.ndim - 2))
        return x + skip
    raise UnsupportedLayerError(f"no forward rule for {kind}", index)


def forward_batch(model: AnnModel, x: np.ndarray) -> list:
    """Post-activation output of every layer for a batch (leading axis)."""
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeMismatchError(
            f"input shape {x.shape[1:]} does not match model {model.input_shape}"
        )
    outputs = []
    cur = x
    for i, layer in enumerate(model.layers):
        cur = _apply_layer(model, layer, i, cur, outputs)
        outputs.append(cur)
    return outputs


def forward(model: AnnModel, x: np.ndarray) -> list:
    """Per-layer activations for a single input; last entry is the logits."""
    outs = forward_batch(model, np.asarray(x, dtype=np.float64)[None])
    return [o[0] for o in outs]


def argmax_class(logits: np.ndarray) -> int:
    """Index of the largest logit; ties break to the smallest index."""
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeMismatchError("logits must be a nonempty rank-1 tensor")
    return int(np.argmax(logits))
