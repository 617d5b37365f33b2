"""Shared test oracles."""

from pathlib import Path

import numpy as np
import torch

GOLDEN = Path(__file__).parent / "golden"


def read_layout_table():
    rows = []
    for line in (GOLDEN / "discriminator_layout.tsv").read_text().splitlines():
        if line.startswith("#") or line.startswith("layer\t") or not line.strip():
            continue
        name, op, res, cin, cout, kernel = line.split("\t")
        rows.append({"name": name, "op": op, "res": int(res.split("x")[0]), "in": int(cin), "out": int(cout),
                     "kernel": None if kernel == "-" else tuple(int(k) for k in kernel.split("x"))})
    return rows


def max_relative_fd_error(fn, tensors, eps=1e-6):
    """Worst relative gap between autograd and central differences for a scalar ``fn()``.

    ``tensors`` are float64 leaves with ``requires_grad``; error is measured per
    tensor as max|a - n| / max(max|a|, max|n|).
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            numeric = torch.zeros_like(t)
            flat, nflat = t.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            scale = max(a.abs().max().item(), numeric.abs().max().item(), 1e-30)
            worst = max(worst, (a - numeric).abs().max().item() / scale)
    return worst


def brute_force_auc(scores, labels):
    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    pos, neg = scores[labels], scores[~labels]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))
