#!/usr/bin/env python3
"""Fit the desk-scale reference models on the synthetic task.

Convenience only: produces the checkpoints that export.py consumes.
"""

import argparse
import sys

import numpy as np
import torch
import torch.nn as nn

from export import Gcn, Mlp, SmallCnn, make_graph, make_images


def train_images(model, epochs, n_train, seed, lr=1e-3):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed + 100)
    x, y = make_images(n_train, rng)
    x = torch.tensor(x, dtype=torch.float32)
    y = torch.tensor(y, dtype=torch.long)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(x))
        total, correct = 0.0, 0
        for i in range(0, len(x), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            out = model(x[idx])
            loss = loss_fn(out, y[idx])
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
            correct += int((out.argmax(1) == y[idx]).sum())
        print(f"epoch {epoch + 1}: loss={total / len(x):.4f} "
              f"train_acc={correct / len(x):.4f}")
    return model


def train_gcn(graph_seed, epochs, seed, lr=1e-2):
    torch.manual_seed(seed)
    feats, adjacency, labels = make_graph(np.random.default_rng(graph_seed))
    model = Gcn(adjacency)
    x = torch.tensor(feats, dtype=torch.float32)
    y = torch.tensor(labels, dtype=torch.long)
    train_mask = torch.arange(len(y)) % 2 == 0
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(epochs):
        model.train()
        opt.zero_grad()
        out = model(x)
        loss = loss_fn(out[train_mask], y[train_mask])
        loss.backward()
        opt.step()
        if (epoch + 1) % 20 == 0:
            acc = float((out.argmax(1) == y).float().mean())
            print(f"epoch {epoch + 1}: loss={float(loss):.4f} acc={acc:.4f}")
    return model


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--arch", required=True, choices=["mlp", "smallcnn", "gcn"])
    parser.add_argument("--epochs", type=int, default=0, help="0 = per-arch default")
    parser.add_argument("--train-samples", type=int, default=6000)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--graph-seed", type=int, default=1)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    if args.arch == "gcn":
        epochs = args.epochs or 120
        model = train_gcn(args.graph_seed, epochs, args.seed)
    else:
        epochs = args.epochs or (8 if args.arch == "smallcnn" else 10)
        model = SmallCnn() if args.arch == "smallcnn" else Mlp()
        train_images(model, epochs, args.train_samples, args.seed)

    torch.save({"state_dict": model.state_dict(), "arch": args.arch,
                "graph_seed": args.graph_seed}, args.out)
    print(f"saved checkpoint -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
