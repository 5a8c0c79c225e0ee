"""Central finite-difference checks against the engine's reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from gap import zoo
from gap.engine import Batch, LossSpec, forward, loss_and_grads, softmax_cross_entropy, to_torch
from gap.ir import copy_weights
from gap.regularize import SparsityConfig, attach_edge_scales, sparsity_penalty
from gap.topology import select_edge_candidates


def all_ops_net(seed: int = 0):
    """Conv, BN, Add, Concat, EdgeScale, GlobalPool and FC in one small graph."""
    n = zoo._Net((2, 5, 5), seed)
    x = n.bn(n.conv(n.b.input, 2, 3), 3)
    h = n.bn(n.conv(x, 3, 3), 3, relu=False)
    x = n.add([h, x], 3, relu=True)
    a = n.bn(n.conv(x, 3, 2, 1), 2)
    b = n.bn(n.conv(x, 3, 2), 2)
    n.head(n.concat([a, b]), 4, 3)
    g, w = n.build()
    g, delta = attach_edge_scales(g, select_edge_candidates(g))
    w = {**w, **delta}
    rng = np.random.default_rng(seed)
    for d in w.values():
        if "gamma" in d:
            c = d["gamma"].shape
            d["gamma"][:] = rng.uniform(0.5, 1.5, c) * rng.choice([-1, 1], c)
            d["beta"][:] = rng.normal(0, 0.5, c)
            d["mean"][:] = rng.normal(0, 0.3, c)
            d["var"][:] = rng.uniform(0.5, 2, c)
        if "scale" in d:
            d["scale"][:] = rng.uniform(0.5, 1.5)
    return g, w


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheck:
    max_rel_err: float
    checked: int
    skipped_kinks: int


def check_graph_gradients(g, w, batch: Batch, mode: str, data_loss=None, penalty=None, h: float = 1e-5,
                          per_tensor: int = 40, seed: int = 0) -> GradCheck:
    """Max relative error between analytic and central-difference gradients.

    ``penalty(tw) -> (value, grads, parts)`` is included in both sides.  A
    coordinate whose ±h probe flips the sign of some ReLU input sits on a kink
    where the difference quotient is meaningless; those are counted and skipped.
    """
    rng = np.random.default_rng(seed)
    tw = to_torch(copy_weights(w), torch.float64)
    batch = Batch(batch.inputs.to(torch.float64), batch.labels)
    spec = LossSpec(data_loss=data_loss, penalty=penalty, mode=mode)
    _, grads, _ = loss_and_grads(g, tw, batch, spec)
    fn = data_loss or softmax_cross_entropy

    relu = [v.id for v in g.vertices if v.attrs.get("relu")]

    def objective():
        with torch.no_grad():
            logits, acts = forward(g, tw, batch.inputs, mode, keep=True, bn_momentum=1.0)
            val = float(fn(logits, batch.labels))
            pattern = torch.cat([(acts[v] > 0).reshape(-1) for v in relu]) if relu else torch.zeros(0)
        if penalty is not None:
            val += float(penalty(tw)[0])
        return val, pattern

    worst, checked, skipped = 0.0, 0, 0
    for (vid, name), gr in sorted(grads.items()):
        t = tw[vid][name]
        flat = t.detach().view(-1)
        n = flat.numel()
        idx = range(n) if n <= per_tensor else rng.choice(n, per_tensor, replace=False)
        analytic = gr.reshape(-1).numpy()
        for i in idx:
            i = int(i)
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                fp, pp = objective()
                flat[i] = orig - h
                fm, pm = objective()
                flat[i] = orig
            if not torch.equal(pp, pm):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            worst = max(worst, float(rel_err(np.array(analytic[i]), np.array(num))))
            checked += 1
    return GradCheck(worst, checked, skipped)


def sparsity_penalty_fn(groups, cands, cfg: SparsityConfig):
    def pen(tw):
        view = {vid: {k: t.detach().numpy() for k, t in d.items()} for vid, d in tw.items()}
        value, grads, _ = sparsity_penalty(view, groups, cands, cfg)
        return value, grads, {}

    return pen
