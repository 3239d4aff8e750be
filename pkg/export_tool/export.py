#!/usr/bin/env python3
"""Export a trained PyTorch model into the phasesnn interchange format.

Writes a self-contained bundle:

    model.json / weights.bin      network manifest + float32 blob
    calib.bin / calib.json        calibration batch
    eval.bin / eval.json          labeled evaluation batch
    labels.json                   evaluation labels
    reference_logits.bin/.json    framework logits on the exact exported weights
    reference_preds.json          framework argmax per evaluation sample

Supported architectures: a 3-layer MLP, a small CNN (4 conv blocks with
batch norm, max and average pooling) and a 2-layer GCN whose steps export
as Linear + SparseLinear pairs. All are ReLU networks; anything else is
rejected by name.

The synthetic task is 10-way classification of 12x12 grayscale patterns.
Classes 8 and 9 share a shape and differ only in foreground intensity
(bright vs mid), so input intensity resolution genuinely matters.
"""

import argparse
import copy
import json
import os
import sys

import numpy as np
import torch
import torch.nn as nn

IMAGE_SIZE = 12
NUM_CLASSES = 10
GCN_NODES = 60
GCN_FEATURES = 8
GCN_CLASSES = 3


# --------------------------------------------------------------- datasets


def _templates():
    n = IMAGE_SIZE
    t = np.zeros((NUM_CLASSES, n, n))
    t[0, 2::4, :] = 1.0                       # horizontal stripes
    t[1, :, 2::4] = 1.0                       # vertical stripes
    for i in range(n):                        # main diagonal band
        t[2, i, max(0, i - 1):i + 2] = 1.0
    t[3] = np.indices((n, n)).sum(axis=0) % 2  # checkerboard
    t[3] *= 0.9
    t[4, 3:9, 3:9] = 1.0                      # center block
    t[5, 1:-1, 1] = t[5, 1:-1, -2] = 1.0      # border ring
    t[5, 1, 1:-1] = t[5, -2, 1:-1] = 1.0
    t[6, 5:7, 1:-1] = t[6, 1:-1, 5:7] = 1.0   # cross
    for i in range(n):                        # X
        t[7, i, i] = t[7, i, n - 1 - i] = 1.0
    disc = np.zeros((n, n))
    yy, xx = np.mgrid[0:n, 0:n]
    disc[((yy - 5.5) ** 2 + (xx - 5.5) ** 2) <= 12.0] = 1.0
    t[8] = disc * 0.95                        # bright disc
    t[9] = disc * 0.55                        # mid-intensity disc, same shape
    return t


def make_images(n_samples: int, rng: np.random.Generator):
    """Synthetic labeled image batch in [0, 1], (N, 1, 12, 12)."""
    templates = _templates()
    labels = rng.integers(0, NUM_CLASSES, n_samples)
    images = np.empty((n_samples, 1, IMAGE_SIZE, IMAGE_SIZE))
    for k, label in enumerate(labels):
        img = templates[label].copy()
        img *= rng.uniform(0.85, 1.0)
        dy, dx = rng.integers(-1, 2, 2)
        img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        img = img + 0.08 + rng.normal(0.0, 0.06, img.shape)
        images[k, 0] = np.clip(img, 0.0, 1.0)
    return images, labels


def make_graph(rng: np.random.Generator):
    """Planted-community graph: features, normalized adjacency, labels."""
    n, f, c = GCN_NODES, GCN_FEATURES, GCN_CLASSES
    labels = rng.integers(0, c, n)
    feats = rng.uniform(0.0, 0.25, (n, f))
    for node, lab in enumerate(labels):
        lanes = slice(lab * 2, lab * 2 + 2)
        feats[node, lanes] += rng.uniform(0.4, 0.75)
    feats = np.clip(feats, 0.0, 1.0)
    adj = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            p = 0.25 if labels[i] == labels[j] else 0.02
            if rng.uniform() < p:
                adj[i, j] = adj[j, i] = 1.0
    adj += np.eye(n)
    deg = adj.sum(axis=1)
    norm = adj / np.sqrt(np.outer(deg, deg))
    return feats, norm, labels


# ------------------------------------------------------------ torch models


class SmallCnn(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, 3, padding=1, bias=False), nn.BatchNorm2d(8), nn.ReLU(),
            nn.Conv2d(8, 8, 3, padding=1, bias=False), nn.BatchNorm2d(8), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1, bias=False), nn.BatchNorm2d(16), nn.ReLU(),
            nn.Conv2d(16, 16, 3, padding=1, bias=False), nn.BatchNorm2d(16), nn.ReLU(),
            nn.AvgPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(16 * 3 * 3, 48), nn.ReLU(),
            nn.Linear(48, NUM_CLASSES),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


class Mlp(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(IMAGE_SIZE * IMAGE_SIZE, 64, bias=False),
            nn.BatchNorm1d(64), nn.ReLU(),
            nn.Linear(64, 32), nn.ReLU(),
            nn.Linear(32, NUM_CLASSES),
        )

    def forward(self, x):
        return self.net(x)


class Gcn(nn.Module):
    """Two graph layers; each is feature mixing then fixed aggregation."""

    def __init__(self, adjacency):
        super().__init__()
        self.register_buffer("adj", torch.tensor(adjacency, dtype=torch.float32))
        self.w1 = nn.Linear(GCN_FEATURES, 16, bias=True)
        self.w2 = nn.Linear(16, GCN_CLASSES, bias=True)

    def forward(self, x):
        h = torch.relu(self.adj @ self.w1(x))
        return self.adj @ self.w2(h)


def build_arch(arch: str, rng: np.random.Generator):
    if arch == "smallcnn":
        return SmallCnn()
    if arch == "mlp":
        return Mlp()
    if arch == "gcn":
        _, adjacency, _ = make_graph(rng)
        return Gcn(adjacency)
    raise SystemExit(f"unsupported architecture {arch!r}")


# ------------------------------------------------------------- file output


class BlobWriter:
    def __init__(self):
        self.blob = bytearray()

    def put(self, tensor) -> dict:
        arr = np.ascontiguousarray(
            tensor.detach().cpu().numpy() if torch.is_tensor(tensor) else tensor,
            dtype=np.float32)
        start = len(self.blob)
        self.blob.extend(arr.astype("<f4").tobytes())
        return {"offset_bytes": start, "length": int(arr.size)}


def _bn_entry(writer, bn):
    # fold the stabilizer eps into the exported variance
    var = bn.running_var.detach().cpu().numpy() + bn.eps
    return {
        "gamma": writer.put(bn.weight), "beta": writer.put(bn.bias),
        "mean": writer.put(bn.running_mean), "var": writer.put(var),
    }


def export_layers(model, writer):
    """Walk torch modules in execution order into manifest entries."""
    entries = []
    modules = [m for m in model.modules()
               if m is not model and not isinstance(m, nn.Sequential)]
    for mod in modules:
        if isinstance(mod, nn.Conv2d):
            entry = {"kind": "Conv2d", "shape": list(mod.weight.shape),
                     "stride": mod.stride[0], "padding": mod.padding[0]}
            entry.update(writer.put(mod.weight))
            if mod.bias is not None:
                entry["bias"] = writer.put(mod.bias)
            entries.append(entry)
        elif isinstance(mod, nn.Linear):
            entry = {"kind": "Linear", "shape": list(mod.weight.shape)}
            entry.update(writer.put(mod.weight))
            if mod.bias is not None:
                entry["bias"] = writer.put(mod.bias)
            entries.append(entry)
        elif isinstance(mod, (nn.BatchNorm2d, nn.BatchNorm1d)):
            entries.append({"kind": "BatchNorm", "bn": _bn_entry(writer, mod)})
        elif isinstance(mod, nn.ReLU):
            entries.append({"kind": "ReLU"})
        elif isinstance(mod, nn.MaxPool2d):
            entries.append({"kind": "MaxPool", "kernel": mod.kernel_size,
                            "stride": mod.stride})
        elif isinstance(mod, nn.AvgPool2d):
            entries.append({"kind": "AvgPool", "kernel": mod.kernel_size,
                            "stride": mod.stride})
        elif isinstance(mod, nn.Flatten):
            entries.append({"kind": "Flatten"})
        else:
            raise SystemExit(f"unsupported layer kind for export: "
                             f"{type(mod).__name__}")
    return entries


def export_gcn_layers(model, writer):
    from scipy import sparse

    adj = sparse.csr_matrix(model.adj.cpu().numpy())
    entries = []
    for lin in (model.w1, model.w2):
        entry = {"kind": "Linear", "shape": list(lin.weight.shape)}
        entry.update(writer.put(lin.weight))
        entry["bias"] = writer.put(lin.bias)
        entries.append(entry)
        sparse_entry = {"kind": "SparseLinear", "shape": list(adj.shape),
                        "indptr": adj.indptr.tolist(),
                        "indices": adj.indices.tolist()}
        sparse_entry.update(writer.put(adj.data))
        entries.append(sparse_entry)
        if lin is model.w1:
            entries.append({"kind": "ReLU"})
    return entries


def save_batch(path, batch):
    arr = np.ascontiguousarray(batch, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(arr.astype("<f4").tobytes())
    with open(os.path.splitext(path)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump({"count": int(arr.shape[0]), "shape": list(arr.shape[1:])}, fh)


def export(arch: str, model, out_dir: str, n_calib: int, n_eval: int,
           seed: int = 0) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    model.eval()
    writer = BlobWriter()

    # reference logits in double precision over the exact exported weights,
    # so the round-trip comparison is not limited by float32 accumulation
    ref_model = copy.deepcopy(model).double()
    if arch == "gcn":
        feats, _, labels = make_graph(np.random.default_rng(seed + 1))
        entries = export_gcn_layers(model, writer)
        input_shape = [GCN_NODES, GCN_FEATURES]
        num_classes = GCN_CLASSES
        calib = feats[None]
        eval_x, eval_y = feats[None], labels
        with torch.no_grad():
            logits = ref_model(torch.tensor(feats, dtype=torch.float64)).numpy()[None]
    else:
        if n_calib < 1:
            raise SystemExit("empty calibration batch")
        entries = export_layers(model, writer)
        input_shape = [1, IMAGE_SIZE, IMAGE_SIZE]
        num_classes = NUM_CLASSES
        calib, _ = make_images(n_calib, rng)
        eval_x, eval_y = make_images(n_eval, rng)
        with torch.no_grad():
            logits = ref_model(torch.tensor(eval_x, dtype=torch.float64)).numpy()

    manifest = {
        "name": arch,
        "input_shape": input_shape,
        "num_classes": num_classes,
        "layers": entries,
        "skip_edges": [],
    }
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(out_dir, "weights.bin"), "wb") as fh:
        fh.write(bytes(writer.blob))

    save_batch(os.path.join(out_dir, "calib.bin"), calib)
    save_batch(os.path.join(out_dir, "eval.bin"), eval_x)
    with open(os.path.join(out_dir, "labels.json"), "w", encoding="utf-8") as fh:
        json.dump({"labels": [int(v) for v in eval_y]}, fh)

    save_batch(os.path.join(out_dir, "reference_logits.bin"), logits)
    preds = logits.argmax(axis=-1)
    with open(os.path.join(out_dir, "reference_preds.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"preds": np.asarray(preds).reshape(-1).tolist()}, fh)
    acc = float((np.asarray(preds).reshape(-1) == np.asarray(eval_y).reshape(-1)).mean())
    print(f"exported {arch} to {out_dir} "
          f"(eval accuracy of source model: {acc:.4f})")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--arch", required=True, choices=["mlp", "smallcnn", "gcn"])
    parser.add_argument("--weights", required=True, help="torch checkpoint (.pt)")
    parser.add_argument("--calib", type=int, default=256,
                        help="calibration sample count")
    parser.add_argument("--eval", type=int, default=1000, dest="n_eval",
                        help="evaluation sample count")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    ckpt = torch.load(args.weights, map_location="cpu", weights_only=False)
    model = build_arch(args.arch, np.random.default_rng(ckpt.get("graph_seed", 1)))
    model.load_state_dict(ckpt["state_dict"])
    export(args.arch, model, args.out, n_calib=args.calib, n_eval=args.n_eval,
           seed=args.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
