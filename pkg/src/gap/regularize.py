"""Sparsity-regularized retraining on BN scaling factors and edge scales."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .data import Dataset
from .engine import (
    LossSpec,
    NumericError,
    OptimizerState,
    evaluate,
    forward,
    loss_and_grads,
    sgd_nesterov_step,
    to_numpy,
    to_torch,
)
from .ir import COARSE, Edge, Graph, GranularityError, Vertex, WeightStore, copy_weights, require_valid
from .topology import EdgeCandidateSet, GroupSet

LEVELS = ("channel", "vertex", "edge")
SPARSE_THRESHOLD = 1e-3


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite weights and the log."""

    def __init__(self, message: str, weights: WeightStore, log: list[dict]):
        super().__init__(message)
        self.weights = weights
        self.log = log


@dataclass
class SparsityConfig:
    level: str = "vertex"
    lambda_s: float = 1e-3
    lambda_gs: float | None = None
    lambda_es: float = 1e-2
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.01
    schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    method: str = "subgradient"
    refresh_bn: bool = True
    decay_scales: bool = False

    def __post_init__(self):
        if self.method not in ("subgradient", "proximal"):
            raise ValueError("method must be 'subgradient' or 'proximal'")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        if self.lambda_gs is None:
            self.lambda_gs = 10.0 * self.lambda_s
        if min(self.lambda_s, self.lambda_gs, self.lambda_es) < 0:
            raise ValueError("sparsity weights must be non-negative")
        if self.schedule not in ("constant", "step"):
            raise ValueError("schedule must be 'constant' or 'step'")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PenaltyBreakdown:
    data_loss: float = 0.0
    weight_decay: float = 0.0
    l1_term: float = 0.0
    group_term: float = 0.0
    edge_term: float = 0.0

    @property
    def total(self) -> float:
        return self.data_loss + self.weight_decay + self.l1_term + self.group_term + self.edge_term


def lr_at(epoch: int, epochs: int, base: float, schedule: str) -> float:
    """Constant, or divided by 10 from 2/3 of the run onwards."""
    if schedule == "step" and epoch >= math.ceil(2 * epochs / 3):
        return base / 10
    return base


# ---------------------------------------------------------------- edge scales


def attach_edge_scales(g: Graph, cands: EdgeCandidateSet) -> tuple[Graph, WeightStore]:
    """Inserts an EdgeScale vertex (γ_e = 1) on every candidate edge.

    The scale takes over the candidate's edge id on its outgoing side, so the
    candidate set keeps addressing the same Concat slot.
    """
    if g.granularity != COARSE:
        raise GranularityError("edge scales are attached to coarse graphs")
    if not cands.candidates:
        return g, {}
    vid = g.next_vertex_id()
    eid = g.next_edge_id()
    vertices = list(g.vertices)
    edges = []
    delta: WeightStore = {}
    want = set(cands.candidates)
    missing = want - {e.id for e in g.edges}
    if missing:
        raise KeyError(f"candidate edges not in graph: {sorted(missing)}")
    for e in g.edges:
        if e.id not in want:
            edges.append(e)
            continue
        vertices.append(Vertex(vid, "EdgeScale", {"edge": e.id}))
        edges.append(Edge(eid, e.src, vid, 0))
        edges.append(Edge(e.id, vid, e.dst, e.dst_slot))
        delta[vid] = {"scale": np.ones(1, dtype=np.float32)}
        vid += 1
        eid += 1
    return Graph(vertices, edges, g.granularity, g.input_shape, dict(g.metadata)), delta


def edge_scale_vertices(g: Graph) -> dict[int, int]:
    """Candidate edge id -> EdgeScale vertex id."""
    return {v.attrs["edge"]: v.id for v in g.of_kind("EdgeScale") if "edge" in v.attrs}


# ---------------------------------------------------------------- penalties


def _coarse_index(gs: GroupSet, members) -> list[tuple[int, int]]:
    return [tuple(gs.provenance[m]) for m in members]


def sparsity_penalty(
    w: WeightStore,
    groups: GroupSet | None,
    cands: EdgeCandidateSet | None,
    cfg: SparsityConfig,
) -> tuple[float, dict[tuple[int, str], np.ndarray], PenaltyBreakdown]:
    """Value, subgradients and breakdown of the sparsity term.

    ``w`` is keyed by coarse vertex id; group members are mapped to coarse
    (vertex, channel) slices through the provenance stored in ``groups``.
    Subgradients are 0 at |γ| = 0 and at a zero group.
    """
    br = PenaltyBreakdown()
    grads: dict[tuple[int, str], np.ndarray] = {}

    def gamma(vid: int) -> np.ndarray:
        return np.asarray(w[vid]["gamma"], dtype=np.float64)

    def add_grad(vid: int, name: str, ch: int, value: float) -> None:
        key = (vid, name)
        if key not in grads:
            grads[key] = np.zeros(np.shape(w[vid][name]), dtype=np.float64)
        grads[key][ch] += value

    if cfg.level in ("channel", "vertex"):
        if groups is None:
            raise ValueError(f"{cfg.level}-level sparsity needs a GroupSet")
        lam = cfg.lambda_s
        for s in groups.singletons:
            vid, ch = groups.provenance[s]
            gval = gamma(vid)[ch]
            br.l1_term += lam * abs(gval)
            if lam:
                add_grad(vid, "gamma", ch, lam * np.sign(gval))
        if cfg.level == "vertex":
            lam = cfg.lambda_gs
            for gr in groups.groups:
                idx = _coarse_index(groups, gr.members)
                vals = np.array([gamma(v)[c] for v, c in idx])
                norm = float(np.sqrt(np.sum(vals**2)))
                br.group_term += lam * norm
                if lam and norm > 0:
                    for (v, c), x in zip(idx, vals):
                        add_grad(v, "gamma", c, lam * x / norm)
    elif cfg.level == "edge":
        if cands is None:
            raise ValueError("edge-level sparsity needs an EdgeCandidateSet")
        lam = cfg.lambda_es
        for vid in sorted(w):
            if "scale" in w[vid]:
                s = float(np.asarray(w[vid]["scale"], dtype=np.float64)[0])
                br.edge_term += lam * abs(s)
                if lam:
                    add_grad(vid, "scale", 0, lam * np.sign(s))
    value = br.l1_term + br.group_term + br.edge_term
    return value, grads, br


def proximal_step(tw, groups: GroupSet | None, cfg: SparsityConfig, lr: float) -> None:
    """Soft-thresholding for the sparsity term, applied in place after a
    gradient step on the smooth part (opt-in alternative to subgradients)."""
    with torch.no_grad():
        if cfg.level == "edge":
            for d in tw.values():
                if "scale" in d:
                    s = d["scale"]
                    s.copy_(torch.sign(s) * torch.clamp(s.abs() - lr * cfg.lambda_es, min=0))
            return
        t = lr * cfg.lambda_s
        for m in groups.singletons:
            vid, ch = groups.provenance[m]
            gam = tw[vid]["gamma"]
            x = float(gam[ch])
            gam[ch] = math.copysign(max(abs(x) - t, 0.0), x)
        if cfg.level == "vertex":
            t = lr * cfg.lambda_gs
            for gr in groups.groups:
                idx = _coarse_index(groups, gr.members)
                norm = math.sqrt(sum(float(tw[v]["gamma"][c]) ** 2 for v, c in idx))
                shrink = max(1.0 - t / norm, 0.0) if norm > 0 else 0.0
                for v, c in idx:
                    tw[v]["gamma"][c] *= shrink


def regularized_ids(groups: GroupSet | None) -> set[int]:
    if groups is None:
        return set()
    return groups.member_set()


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.01
    schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 1
    decay_scales: bool = False


def train_loop(
    g: Graph,
    w: WeightStore,
    data: Dataset,
    tc: TrainConfig,
    seed: int,
    batch_loss: Callable | None = None,
    penalty: Callable | None = None,
    epoch_hook: Callable[[int, dict], None] | None = None,
    on_epoch: Callable[[WeightStore, dict], dict] | None = None,
    post_step: Callable[[dict, float], None] | None = None,
) -> tuple[WeightStore, list[dict]]:
    """Mini-batch Nesterov SGD.  The batch order depends only on ``seed``.

    ``batch_loss(batch)`` returns the data loss ``(logits, labels) -> scalar``
    for that batch (cross-entropy when absent).  ``penalty(tw)`` returns
    (value, grads, breakdown dict); ``on_epoch`` may add
    fields to each epoch record.  Returns the trained weights and the per-epoch
    log.
    """
    require_valid(g, w)
    tw = to_torch(w, torch.float32)
    rng = np.random.default_rng(seed)
    state = OptimizerState(lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay, decay_scales=tc.decay_scales)
    spec = LossSpec(penalty=penalty, weight_decay=tc.weight_decay)
    log: list[dict] = []
    last_good = copy_weights(w)
    step = 0
    for epoch in range(tc.epochs):
        state.lr = lr_at(epoch, tc.epochs, tc.lr, tc.schedule)
        sums: dict[str, float] = {}
        seen = 0
        for batch in data.batches(tc.batch_size, rng):
            if batch_loss is not None:
                spec.data_loss = batch_loss(batch)
            try:
                _, grads, parts = loss_and_grads(g, tw, batch, spec)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", last_good, log) from exc
            sgd_nesterov_step(g, tw, grads, state)
            if post_step is not None:
                post_step(tw, state.lr)
            n = len(batch.labels)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * n
            seen += n
            step += 1
        current = to_numpy(tw)
        if not all(np.all(np.isfinite(t)) for d in current.values() for t in d.values()):
            raise TrainingDiverged(f"epoch {epoch}: non-finite weights", last_good, log)
        last_good = current
        rec = {"epoch": epoch, "step": step, "lr": state.lr}
        rec.update({k: v / seen for k, v in sums.items()})
        if tc.eval_every and ((epoch + 1) % tc.eval_every == 0 or epoch == tc.epochs - 1):
            ev = evaluate(g, current, data.x_test, data.y_test)
            rec["test_accuracy"] = ev["accuracy"]
            rec["test_loss"] = ev["loss"]
        if on_epoch is not None:
            rec.update(on_epoch(current, rec))
        log.append(rec)
        if epoch_hook is not None:
            epoch_hook(epoch, rec)
    return to_numpy(tw), log


def train_plain(g: Graph, w: WeightStore, data: Dataset, tc: TrainConfig, seed: int, **kw) -> tuple[WeightStore, list[dict]]:
    """Cross-entropy training with weight decay only."""
    return train_loop(g, w, data, tc, seed, **kw)


def gamma_values(w: WeightStore, groups: GroupSet | None = None) -> np.ndarray:
    """All BN γ of a coarse store (or only the regularized ones when ``groups`` is given)."""
    if groups is None:
        return np.concatenate([np.ravel(d["gamma"]) for _, d in sorted(w.items()) if "gamma" in d] or [np.zeros(0)])
    return np.array([w[v]["gamma"][c] for v, c in (groups.provenance[m] for m in sorted(groups.member_set()))])


def sparse_fraction(w: WeightStore, threshold: float = SPARSE_THRESHOLD) -> float:
    g = np.abs(gamma_values(w))
    return float(np.mean(g < threshold)) if g.size else 0.0


def train_sparse(
    g: Graph,
    w: WeightStore,
    data: Dataset,
    cfg: SparsityConfig,
    seed: int,
    groups: GroupSet | None = None,
    cands: EdgeCandidateSet | None = None,
    epoch_hook: Callable[[int, dict], None] | None = None,
) -> tuple[WeightStore, list[dict]]:
    """Retrains the coarse graph ``g`` under the sparsity term of ``cfg.level``.

    For edge level ``g`` must already carry EdgeScale vertices.
    """
    if cfg.level in ("channel", "vertex") and groups is None:
        raise ValueError(f"{cfg.level}-level training needs a GroupSet")
    if cfg.level == "edge":
        if cands is None:
            raise ValueError("edge-level training needs an EdgeCandidateSet")
        if len(g.of_kind("EdgeScale")) != len(cands.candidates):
            raise ValueError("attach edge scales before edge-level training")
    protected = set(groups.pinned) if (groups is not None and cfg.level == "vertex") else set()
    protected_slices = {tuple(groups.provenance[p]) for p in protected} if protected else set()

    def penalty(tw):
        value, grads, br = sparsity_penalty(_view(tw), groups, cands, cfg)
        for (vid, name), gr in grads.items():
            if name == "gamma":
                for ch in np.nonzero(gr)[0]:
                    assert (vid, int(ch)) not in protected_slices, f"penalty reached pinned channel {(vid, int(ch))}"
        return value, grads, {"l1_term": br.l1_term, "group_term": br.group_term, "edge_term": br.edge_term}

    def stats(current, rec):
        out = {"sparse_fraction": sparse_fraction(current)}
        scales = [float(d["scale"][0]) for _, d in sorted(current.items()) if "scale" in d]
        if scales:
            out["edge_scales"] = scales
        return out

    tc = TrainConfig(
        cfg.epochs, cfg.batch_size, cfg.lr, cfg.schedule, cfg.momentum, cfg.weight_decay, decay_scales=cfg.decay_scales
    )
    if cfg.method == "proximal":

        def report_only(tw):
            value, _, parts = penalty(tw)
            return value, {}, parts

        def prox(tw, lr):
            proximal_step(tw, groups, cfg, lr)

        w, log = train_loop(g, w, data, tc, seed, penalty=report_only, epoch_hook=epoch_hook, on_epoch=stats, post_step=prox)
    else:
        w, log = train_loop(g, w, data, tc, seed, penalty=penalty, epoch_hook=epoch_hook, on_epoch=stats)
    if cfg.refresh_bn and log:
        # near-zero γ flip sign step to step, so the running averages trail the
        # final weights; recompute them without touching any trainable value
        w = refresh_bn_stats(g, w, data, cfg.batch_size)
        ev = evaluate(g, w, data.x_test, data.y_test)
        log[-1]["test_accuracy_before_refresh"] = log[-1].get("test_accuracy")
        log[-1]["test_accuracy"] = ev["accuracy"]
        log[-1]["test_loss"] = ev["loss"]
    return w, log


def refresh_bn_stats(g: Graph, w: WeightStore, data: Dataset, batch_size: int = 128) -> WeightStore:
    """Running mean/var replaced by the cumulative average of the batch
    statistics over one ordered, unaugmented pass through the training set."""
    out = copy_weights(w)
    tw = to_torch(out, torch.float32)
    for d in tw.values():
        if "mean" in d:
            d["mean"].zero_()
            d["var"].zero_()
    with torch.no_grad():
        for k, batch in enumerate(data.batches(batch_size, None, augment=False)):
            forward(g, tw, batch.inputs, "train", bn_momentum=k / (k + 1))
    return to_numpy(tw)


def _view(tw) -> WeightStore:
    return {vid: {k: t.detach().numpy() for k, t in d.items()} for vid, d in tw.items()}
