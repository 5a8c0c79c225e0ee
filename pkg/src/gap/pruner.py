"""Global-threshold prune plans and vertex/edge surgery without selection layers."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .ir import (
    COARSE,
    CONV_KINDS,
    Edge,
    Graph,
    GranularityError,
    Vertex,
    WeightStore,
    copy_weights,
    infer_shapes,
    reachable,
    require_valid,
)
from .topology import EdgeCandidateSet, GroupSet, VertexClassification

UNIT_KINDS = ("singleton", "group", "edge")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreEntry:
    unit: int
    kind: str
    score: float
    members: tuple[int, ...]


@dataclass
class PruneScores:
    level: str
    entries: list[ScoreEntry] = field(default_factory=list)

    def ordered(self) -> list[ScoreEntry]:
        return sorted(self.entries, key=lambda e: (e.score, e.unit))


@dataclass
class PrunePlan:
    level: str
    ratio: float
    threshold: float
    units_to_prune: list[int] = field(default_factory=list)
    safety_overrides: list[tuple[int, str]] = field(default_factory=list)
    # coarse vertex id -> output channels removed (vertex/channel level)
    channels: dict[int, list[int]] = field(default_factory=dict)
    scores: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "ratio": self.ratio,
            "threshold": self.threshold if math.isfinite(self.threshold) else None,
            "units_to_prune": list(self.units_to_prune),
            "safety_overrides": [{"unit": u, "reason": r} for u, r in self.safety_overrides],
            "channels": {str(k): v for k, v in sorted(self.channels.items())},
            "scores": self.scores,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PrunePlan":
        t = d["threshold"]
        return cls(
            level=d["level"],
            ratio=d["ratio"],
            threshold=-math.inf if t is None else float(t),
            units_to_prune=list(d["units_to_prune"]),
            safety_overrides=[(o["unit"], o["reason"]) for o in d["safety_overrides"]],
            channels={int(k): list(v) for k, v in d["channels"].items()},
            scores=list(d.get("scores", [])),
        )


# ---------------------------------------------------------------- scoring


def compute_scores(
    w: WeightStore,
    groups: GroupSet | None = None,
    cands: EdgeCandidateSet | None = None,
    level: str = "vertex",
    g: Graph | None = None,
) -> PruneScores:
    """|γ| for singletons, ‖γ‖₂/√n for groups, |γ_e| for edges.

    ``w`` is the coarse store; for edge level ``g`` is the graph carrying the
    EdgeScale vertices.
    """
    out = PruneScores(level)
    if level in ("channel", "vertex"):
        if groups is None:
            raise PlanError(f"{level}-level scoring needs a GroupSet")
        for s in groups.singletons:
            v, c = groups.provenance[s]
            out.entries.append(ScoreEntry(s, "singleton", float(abs(w[v]["gamma"][c])), (s,)))
        for gr in groups.groups:
            vals = np.array([w[v]["gamma"][c] for v, c in (groups.provenance[m] for m in gr.members)], dtype=np.float64)
            score = float(np.linalg.norm(vals) / math.sqrt(len(vals)))
            out.entries.append(ScoreEntry(gr.id, "group", score, tuple(gr.members)))
    elif level == "edge":
        if cands is None or g is None:
            raise PlanError("edge-level scoring needs candidates and the edge-scaled graph")
        from .regularize import edge_scale_vertices

        es = edge_scale_vertices(g)
        for eid in cands.candidates:
            if eid not in es:
                raise PlanError(f"candidate edge {eid} has no EdgeScale vertex")
            vid = es[eid]
            out.entries.append(ScoreEntry(eid, "edge", float(abs(w[vid]["scale"][0])), (vid,)))
    else:
        raise PlanError(f"unknown level {level!r}")
    for e in out.entries:
        if not math.isfinite(e.score):
            raise PlanError(f"non-finite score for unit {e.unit}")
    return out


# ---------------------------------------------------------------- threshold


def _layer_width(v: Vertex) -> int:
    a = v.attrs
    if v.kind == "ConvLayer":
        return a["out_channels"]
    return a["channels"]


def select_threshold(
    scores: PruneScores,
    ratio: float,
    g: Graph,
    classification: VertexClassification | None = None,
    groups: GroupSet | None = None,
    cands: EdgeCandidateSet | None = None,
) -> PrunePlan:
    """Lowest-scored units up to ``ratio`` of the channels (edges at edge level).

    Units are visited in ascending (score, id) order and added while the pruned
    channel count is below round(ratio * total).  A unit is skipped, with the
    reason recorded, when pruning it would empty a layer, disconnect Input from
    Output or need a selection layer.
    """
    if not 0.0 <= ratio <= 1.0:
        raise PlanError("ratio must lie in [0, 1]")
    if g.granularity != COARSE:
        raise GranularityError("plans are made against the coarse graph")
    plan = PrunePlan(scores.level, ratio, -math.inf)
    ordered = scores.ordered()
    if classification is not None:
        bad = [e.unit for e in ordered if set(e.members) & classification.articulation]
        if bad:
            raise PlanError(f"articulation vertices scored in units {bad}")
    plan.scores = [{"unit": e.unit, "kind": e.kind, "score": e.score, "members": list(e.members)} for e in ordered]
    weight = {e.unit: (1 if e.kind == "edge" else len(e.members)) for e in ordered}
    target = round(ratio * sum(weight.values()))
    pruned = 0
    chosen: list[ScoreEntry] = []
    if scores.level == "edge":
        check = _EdgeSafety(g, cands)
    else:
        if groups is None:
            raise PlanError("vertex/channel plans need the GroupSet for removal footprints")
        check = _ChannelSafety(g, groups)
    for e in ordered:
        if pruned >= target:
            break
        reason = check.try_add(e)
        if reason:
            plan.safety_overrides.append((e.unit, reason))
            continue
        chosen.append(e)
        pruned += weight[e.unit]
    plan.units_to_prune = sorted(e.unit for e in chosen)
    if chosen:
        plan.threshold = max(e.score for e in chosen)
    if scores.level != "edge":
        plan.channels = {v: sorted(cs) for v, cs in sorted(check.removed.items())}
    return plan


class _ChannelSafety:
    def __init__(self, g: Graph, groups: GroupSet):
        self.g = g
        self.groups = groups
        self.removed: dict[int, set[int]] = defaultdict(set)

    def try_add(self, e: ScoreEntry) -> str | None:
        fp = self.groups.footprints.get(e.unit)
        if fp is None or e.unit in self.groups.pinned:
            return "requires selection layer: " + self.groups.pinned.get(e.unit, "no removal footprint")
        extra: dict[int, set[int]] = defaultdict(set)
        for v, c in fp:
            extra[v].add(c)
        for v, cs in extra.items():
            if len(self.removed[v] | cs) >= _layer_width(self.g.vertex(v)):
                return f"layer {v} would lose all channels"
        for v, cs in extra.items():
            self.removed[v] |= cs
        return None


class _EdgeSafety:
    def __init__(self, g: Graph, cands: EdgeCandidateSet | None):
        if cands is None:
            raise PlanError("edge plans need the candidate set")
        self.g = g
        self.cut: set[int] = set()

    def try_add(self, e: ScoreEntry) -> str | None:
        if not _feeds_linear(self.g, self.g.edge(e.unit).dst):
            return "requires selection layer: path reaches a non-linear consumer"
        trial = self.cut | {e.unit}
        if not _edges_removable(self.g, trial):
            return "removal would leave a concat or the output without input"
        self.cut = trial
        return None


def _feeds_linear(g: Graph, vid: int) -> bool:
    """True when every consumer of ``vid`` is a non-grouped conv or an FC,
    possibly behind Concat/GlobalPool/EdgeScale."""
    for c in g.children(vid):
        v = g.vertex(c)
        if v.kind in CONV_KINDS and v.attrs.get("groups", 1) == 1 or v.kind == "FC":
            continue
        if v.kind in ("Concat", "GlobalPool", "EdgeScale") and _feeds_linear(g, c):
            continue
        return False
    return True


def _live_after_cut(g: Graph, cut: set[int]) -> tuple[set[int], set[int]]:
    """(vertices reaching Output, vertices reachable from Input) without ``cut``."""
    fwd: dict[int, list[int]] = {v.id: [] for v in g.vertices}
    bwd: dict[int, list[int]] = {v.id: [] for v in g.vertices}
    for e in g.edges:
        if e.id in cut:
            continue
        fwd[e.src].append(e.dst)
        bwd[e.dst].append(e.src)
    return reachable(bwd, g.output_id), reachable(fwd, g.input_id)


def _edges_removable(g: Graph, cut: set[int]) -> bool:
    to_out, from_in = _live_after_cut(g, cut)
    return g.input_id in to_out and to_out <= from_in


# ---------------------------------------------------------------- vertex surgery


def _in_offsets(g: Graph, vid: int, width: dict[int, int]) -> list[tuple[Edge, int]]:
    out, off = [], 0
    for e in g.in_edges(vid):
        out.append((e, off))
        off += width[e.src]
    return out


def _shrink(
    g: Graph, w: WeightStore, planned_by_vertex: dict[int, list[int]], cut: set[int], live: set[int]
) -> tuple[list[Vertex], WeightStore]:
    """Channel removal pass shared by both surgeries.

    ``planned_by_vertex`` lists output channels deleted at their producers;
    every edge in ``cut`` drops its whole slot range at the destination.
    Deletions travel through Concat/GlobalPool/EdgeScale and end at the input
    slices of conv/FC layers.
    """
    width = {v: s[0] for v, s in infer_shapes(g).items()}
    drop: dict[int, list[int]] = {}
    vertices: list[Vertex] = []
    nw: WeightStore = {}
    for vid in g.topo_order():
        if vid not in live:
            continue
        v = g.vertex(vid)
        a = dict(v.attrs)
        planned = sorted(planned_by_vertex.get(vid, []))
        incoming = []
        for e, off in _in_offsets(g, vid, width):
            if e.id in cut:
                incoming.extend(range(off, off + width[e.src]))
            else:
                incoming.extend(off + c for c in drop.get(e.src, []))
        incoming.sort()
        p = {k: t.copy() for k, t in w.get(vid, {}).items()}
        if v.kind == "ConvLayer":
            if a.get("groups", 1) > 1 and (incoming or planned):
                raise PlanError(f"plan touches grouped convolution {vid}")
            p["kernel"] = np.delete(np.delete(p["kernel"], planned, axis=0), incoming, axis=1)
            if "bias" in p:
                p["bias"] = np.delete(p["bias"], planned)
            a["in_channels"] -= len(incoming)
            a["out_channels"] -= len(planned)
            out = planned
        elif v.kind == "BNLayer":
            if incoming != planned:
                raise PlanError(f"BN {vid} removal {planned} does not match its producer {incoming}")
            for k in ("gamma", "beta", "mean", "var"):
                p[k] = np.delete(p[k], planned)
            a["channels"] -= len(planned)
            out = planned
        elif v.kind == "AddLayer":
            per_op = [sorted(drop.get(e.src, [])) for e in g.in_edges(vid)]
            if any(x != planned for x in per_op) or any(e.id in cut for e in g.in_edges(vid)):
                raise PlanError(f"add {vid} operands would be misaligned")
            a["channels"] -= len(planned)
            out = planned
        elif v.kind == "FC":
            p["weight"] = np.delete(p["weight"], incoming, axis=1)
            a["in_features"] -= len(incoming)
            out = []
        elif v.kind in ("Concat", "GlobalPool", "EdgeScale"):
            if planned:
                raise PlanError(f"plan removes channels of {v.kind} {vid}")
            out = incoming
        elif v.kind == "Input":
            out = []
        elif incoming or planned:
            raise PlanError(f"cannot remove channels through {v.kind} {vid}")
        else:
            out = []
        if out and len(out) >= width[vid]:
            raise PlanError(f"vertex {vid} would lose all channels")
        drop[vid] = out
        vertices.append(Vertex(vid, v.kind, a))
        if p:
            nw[vid] = p
    order = {v.id: i for i, v in enumerate(g.vertices)}
    vertices.sort(key=lambda v: order[v.id])
    return vertices, nw


def prune_vertices(
    g: Graph,
    w: WeightStore,
    plan: PrunePlan,
    classification: VertexClassification | None = None,
    provenance: dict | None = None,
) -> tuple[Graph, WeightStore]:
    """Deletes the planned channels from every layer that produces or consumes them."""
    if g.granularity != COARSE:
        raise GranularityError("surgery runs on the coarse graph")
    if plan.level not in ("channel", "vertex"):
        raise PlanError("prune_vertices needs a channel- or vertex-level plan")
    if not any(plan.channels.values()):
        return g.copy(), copy_weights(w)
    for v in plan.channels:
        if not g.has_vertex(v):
            raise PlanError(f"plan removes channels of unknown vertex {v}")
    vertices, nw = _shrink(g, w, plan.channels, set(), {v.id for v in g.vertices})
    ng = Graph(vertices, list(g.edges), g.granularity, g.input_shape, dict(g.metadata))
    require_valid(ng, nw)
    return ng, nw


def masked_weights(w: WeightStore, plan: PrunePlan, edge_scales: dict[int, int] | None = None) -> WeightStore:
    """The original store with γ=β=0 on planned channels (γ_e=0 on planned edges)."""
    m = copy_weights(w)
    if plan.level == "edge":
        for eid in plan.units_to_prune:
            m[edge_scales[eid]]["scale"][:] = 0
        return m
    for vid, cs in plan.channels.items():
        if "gamma" in m.get(vid, {}):
            m[vid]["gamma"][cs] = 0
            m[vid]["beta"][cs] = 0
    return m


# ---------------------------------------------------------------- edge surgery


def prune_edges(g: Graph, w: WeightStore, plan: PrunePlan, cands: EdgeCandidateSet) -> tuple[Graph, WeightStore]:
    """Removes planned paths, bypasses single-input concats and folds surviving
    edge scales into the linear layers that consume them."""
    if plan.level != "edge":
        raise PlanError("prune_edges needs an edge-level plan")
    edge_ids = {e.id for e in g.edges}
    cut = set(plan.units_to_prune)
    stray = (cut - edge_ids) | (cut - set(cands.candidates))
    if stray:
        raise PlanError(f"plan edges are not candidates of this graph: {sorted(stray)}")
    if not _edges_removable(g, cut):
        raise PlanError("plan would disconnect the graph")
    if not cut:
        g, w = g.copy(), copy_weights(w)
        return fold_edge_scales(g, w)
    live, _ = _live_after_cut(g, cut)
    vertices, nw = _shrink(g, w, {}, cut, live)
    edges = [e for e in g.edges if e.id not in cut and e.src in live and e.dst in live]
    # dense slots again
    by_dst: dict[int, list[Edge]] = defaultdict(list)
    for e in edges:
        by_dst[e.dst].append(e)
    fixed: list[Edge] = []
    for dst, es in by_dst.items():
        for slot, e in enumerate(sorted(es, key=lambda e: e.dst_slot)):
            fixed.append(Edge(e.id, e.src, e.dst, slot))
    fixed.sort(key=lambda e: e.id)
    ng = Graph(vertices, fixed, g.granularity, g.input_shape, dict(g.metadata))
    ng = _bypass_single_concats(ng)
    ng, nw = fold_edge_scales(ng, nw)
    require_valid(ng, nw)
    return ng, nw


def _bypass_single_concats(g: Graph) -> Graph:
    single = [v.id for v in g.of_kind("Concat") if len(g.in_edges(v.id)) == 1]
    if not single:
        return g
    edges = list(g.edges)
    for cid in single:
        (src_edge,) = [e for e in edges if e.dst == cid]
        outs = [e for e in edges if e.src == cid]
        edges = [e for e in edges if e.dst != cid and e.src != cid]
        # the incoming edge id disappears; consumers keep their edge ids
        edges += [Edge(e.id, src_edge.src, e.dst, e.dst_slot) for e in outs]
    edges.sort(key=lambda e: e.id)
    vertices = [v for v in g.vertices if v.id not in single]
    return Graph(vertices, edges, g.granularity, g.input_shape, dict(g.metadata))


def _linear_consumers(g: Graph, vid: int, lo: int, hi: int, width: dict[int, int]):
    """(vertex, input-channel range) pairs of conv/FC layers reading channels
    [lo, hi) of ``vid`` through Concat/GlobalPool, or None if some consumer is
    not linear in its input."""
    out = []
    for e in g.out_edges(vid):
        c = g.vertex(e.dst)
        off = sum(width[x.src] for x in g.in_edges(e.dst) if x.dst_slot < e.dst_slot)
        if c.kind in CONV_KINDS or c.kind == "FC":
            out.append((c.id, off + lo, off + hi))
        elif c.kind in ("Concat", "GlobalPool"):
            sub = _linear_consumers(g, c.id, off + lo, off + hi, width)
            if sub is None:
                return None
            out += sub
        else:
            return None
    return out


def fold_edge_scales(g: Graph, w: WeightStore) -> tuple[Graph, WeightStore]:
    """Multiplies each EdgeScale into the input slices of the conv/FC layers it
    feeds (exact for any sign).  Scales feeding anything else stay explicit."""
    for es in sorted(g.of_kind("EdgeScale"), key=lambda v: v.id):
        width = {v: s[0] for v, s in infer_shapes(g).items()}
        c = width[es.id]
        cons = _linear_consumers(g, es.id, 0, c, width)
        if cons is None:
            continue
        s = float(w[es.id]["scale"][0])
        w = dict(w)
        for vid, lo, hi in cons:
            p = {k: t.copy() for k, t in w[vid].items()}
            if g.vertex(vid).kind == "FC":
                p["weight"][:, lo:hi] *= s
            else:
                _scale_conv_inputs(g.vertex(vid), p["kernel"], lo, hi, s)
            w[vid] = p
        (src,) = g.in_edges(es.id)
        outs = g.out_edges(es.id)
        edges = [e for e in g.edges if e.src != es.id and e.dst != es.id]
        edges += [Edge(e.id, src.src, e.dst, e.dst_slot) for e in outs]
        edges.sort(key=lambda e: e.id)
        vertices = [v for v in g.vertices if v.id != es.id]
        g = Graph(vertices, edges, g.granularity, g.input_shape, dict(g.metadata))
        del w[es.id]
    return g, w


def _scale_conv_inputs(v: Vertex, kernel: np.ndarray, lo: int, hi: int, s: float) -> None:
    groups = v.attrs.get("groups", 1)
    per_in = v.attrs["in_channels"] // groups
    per_out = kernel.shape[0] // groups
    for ch in range(lo, hi):
        gi, local = divmod(ch, per_in)
        kernel[gi * per_out : (gi + 1) * per_out, local] *= s


def prune(
    g: Graph,
    w: WeightStore,
    plan: PrunePlan,
    cands: EdgeCandidateSet | None = None,
) -> tuple[Graph, WeightStore]:
    if plan.level == "edge":
        return prune_edges(g, w, plan, cands)
    return prune_vertices(g, w, plan)


def check_invariants(g: Graph, w: WeightStore, before: Graph) -> None:
    require_valid(g, w)
    if len(g.vertices) > len(before.vertices):
        raise PlanError("surgery inserted vertices")
    kinds = {v.kind for v in g.vertices} - {v.kind for v in before.vertices}
    if kinds:
        raise PlanError(f"surgery introduced vertex kinds {sorted(kinds)}")
