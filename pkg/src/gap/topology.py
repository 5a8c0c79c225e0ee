"""Graph-theoretic analysis used to decide what may be pruned.

Articulation points and bridges are computed with a single lowlink DFS over
the underlying undirected multigraph.  For graphs where every vertex lies on
an Input→Output path this coincides with "removal breaks all Input→Output
paths", which is the criterion that matters for information flow.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .ir import FINE, COARSE, Graph, GranularityError, provenance, reachable

# Vertices whose output is a single channel; sharing one of them as a parent
# means sharing a feature map.
SINGLE_CHANNEL = {"ConvFilter", "BNChannel", "AddChannel"}


class IntegrityError(Exception):
    pass


class NotRemovable(Exception):
    """A unit cannot be removed without inserting a selection vertex."""


def _lowlink(g: Graph) -> tuple[set[int], set[int]]:
    adj: dict[int, list[tuple[int, int]]] = {v.id: [] for v in g.vertices}
    for e in sorted(g.edges, key=lambda e: e.id):
        adj[e.src].append((e.dst, e.id))
        adj[e.dst].append((e.src, e.id))
    disc: dict[int, int] = {}
    low: dict[int, int] = {}
    cut_vertices: set[int] = set()
    bridges: set[int] = set()
    clock = 0
    roots = [g.input_id] + sorted(adj)
    for root in roots:
        if root in disc:
            continue
        disc[root] = low[root] = clock
        clock += 1
        root_children = 0
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            u, parent_edge, it = stack[-1]
            descended = False
            for x, eid in it:
                if eid == parent_edge:
                    continue
                if x not in disc:
                    disc[x] = low[x] = clock
                    clock += 1
                    stack.append((x, eid, iter(adj[x])))
                    descended = True
                    break
                low[u] = min(low[u], disc[x])
            if descended:
                continue
            stack.pop()
            if not stack:
                continue
            p = stack[-1][0]
            low[p] = min(low[p], low[u])
            if low[u] > disc[p]:
                bridges.add(parent_edge)
            if p == root:
                root_children += 1
            elif low[u] >= disc[p]:
                cut_vertices.add(p)
        if root_children > 1:
            cut_vertices.add(root)
    return cut_vertices, bridges


def find_articulation_points(g: Graph) -> set[int]:
    """Interior vertices whose removal breaks Input→Output connectivity."""
    cut, _ = _lowlink(g)
    terminals = {v.id for v in g.of_kind("Input", "Output")}
    return cut - terminals


def find_bridges(g: Graph) -> set[int]:
    """Edge ids whose removal breaks Input→Output connectivity."""
    return _lowlink(g)[1]


# ---------------------------------------------------------------- classification


@dataclass(frozen=True)
class VertexClassification:
    articulation: frozenset[int]
    one_one: frozenset[int]
    one_n: frozenset[int]
    n_one: frozenset[int]

    def summary(self) -> dict[str, int]:
        return {
            "articulation": len(self.articulation),
            "one_one": len(self.one_one),
            "one_n": len(self.one_n),
            "n_one": len(self.n_one),
        }


def _require_fine(g: Graph) -> None:
    if g.granularity != FINE:
        raise GranularityError("BN-vertex classification needs a fine graph")


def _channel_parent(g: Graph, v: int) -> int | None:
    ps = g.parents(v)
    if len(ps) == 1 and g.vertex(ps[0]).kind in SINGLE_CHANNEL:
        return ps[0]
    return None


def _merge_children(g: Graph, v: int) -> list[int]:
    # Only element-wise merges couple channels; Concat (and convolution/FC
    # consumers, which take channels as independent input slices) do not.
    return sorted({c for c in g.children(v) if g.vertex(c).kind == "AddChannel"})


def classify_bn_vertices(g: Graph) -> VertexClassification:
    _require_fine(g)
    bn = sorted(v.id for v in g.of_kind("BNChannel"))
    aps = find_articulation_points(g)
    articulation = {v for v in bn if v in aps}
    rest = [v for v in bn if v not in articulation]
    by_parent: dict[int, list[int]] = {}
    by_child: dict[int, list[int]] = {}
    for v in rest:
        p = _channel_parent(g, v)
        if p is not None:
            by_parent.setdefault(p, []).append(v)
        for c in _merge_children(g, v):
            by_child.setdefault(c, []).append(v)
    one_n = {v for vs in by_parent.values() if len(vs) > 1 for v in vs}
    n_one = {v for vs in by_child.values() if len(vs) > 1 for v in vs}
    one_n -= n_one
    one_one = set(rest) - one_n - n_one
    return VertexClassification(frozenset(articulation), frozenset(one_one), frozenset(one_n), frozenset(n_one))


# ---------------------------------------------------------------- groups


@dataclass(frozen=True)
class Group:
    id: int
    members: tuple[int, ...]
    anchor: int


@dataclass
class GroupSet:
    """Sparsity units over fine BN vertices.

    ``footprints`` maps each unit id (group anchor or singleton BN id) to the
    coarse (vertex id, channel) pairs its removal deletes.  ``pinned`` holds BN
    vertices that are neither regularized nor prunable, with the reason.
    """

    groups: list[Group] = field(default_factory=list)
    singletons: list[int] = field(default_factory=list)
    pinned: dict[int, str] = field(default_factory=dict)
    provenance: dict[int, tuple[int, int]] = field(default_factory=dict)
    footprints: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    level: str = "vertex"

    def units(self) -> list[tuple[int, str, tuple[int, ...]]]:
        out = [(s, "singleton", (s,)) for s in self.singletons]
        out += [(gr.id, "group", gr.members) for gr in self.groups]
        return sorted(out)

    def member_set(self) -> set[int]:
        return set(self.singletons) | {m for gr in self.groups for m in gr.members}

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "groups": [{"id": gr.id, "anchor": gr.anchor, "members": list(gr.members)} for gr in self.groups],
            "singletons": list(self.singletons),
            "pinned": {str(k): r for k, r in sorted(self.pinned.items())},
            "provenance": {str(k): list(v) for k, v in sorted(self.provenance.items())},
            "footprints": {str(k): [list(p) for p in fp] for k, fp in sorted(self.footprints.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroupSet":
        return cls(
            groups=[Group(x["id"], tuple(x["members"]), x["anchor"]) for x in d["groups"]],
            singletons=list(d["singletons"]),
            pinned={int(k): r for k, r in d["pinned"].items()},
            provenance={int(k): tuple(v) for k, v in d["provenance"].items()},
            footprints={int(k): tuple(tuple(p) for p in fp) for k, fp in d["footprints"].items()},
            level=d.get("level", "vertex"),
        )


def removal_footprint(g: Graph, members: set[int] | tuple[int, ...]) -> tuple[tuple[int, int], ...]:
    """Coarse channels deleted when the BN vertices ``members`` are pruned.

    Raises ``NotRemovable`` when deleting them would require a selection
    vertex: the producing filter has other consumers, an Add operand lies
    outside the unit, or a zeroed channel reaches a non-linear consumer.
    """
    members = set(members)
    prov = provenance(g)
    removed = set(members)
    checked: set[int] = set()

    def droppable(c: int) -> None:
        if c in checked:
            return
        checked.add(c)
        v = g.vertex(c)
        if v.kind == "ConvFilter":
            if v.attrs.get("groups", 1) > 1:
                raise NotRemovable(f"consumer {c} is a grouped convolution")
        elif v.kind == "FC":
            pass
        elif v.kind in ("Concat", "GlobalPool", "EdgeScale"):
            for x in g.children(c):
                droppable(x)
        else:
            raise NotRemovable(f"zeroed channel reaches {v.kind} {c}")

    for m in sorted(members):
        if g.vertex(m).kind != "BNChannel":
            raise IntegrityError(f"unit member {m} is not a BNChannel")
        ps = g.parents(m)
        p = ps[0]
        pv = g.vertex(p)
        if pv.kind != "ConvFilter":
            raise NotRemovable(f"producer of {m} is {pv.kind} {p}, not a filter")
        if pv.attrs.get("groups", 1) > 1:
            raise NotRemovable(f"producer {p} is a grouped convolution")
        others = [c for c in g.children(p) if c not in members]
        if others:
            raise NotRemovable(f"filter {p} also feeds {others[0]}")
        removed.add(p)
    adds = set()
    for m in sorted(members):
        for c in g.children(m):
            if g.vertex(c).kind == "AddChannel":
                adds.add(c)
            else:
                droppable(c)
    for a in sorted(adds):
        outside = [op for op in g.parents(a) if op not in members]
        if outside:
            raise NotRemovable(f"add {a} has operand {outside[0]} outside the unit")
        removed.add(a)
        for c in g.children(a):
            droppable(c)
    fp = sorted(prov[x] for x in removed if prov.get(x, (None, -1))[1] >= 0)
    return tuple(tuple(p) for p in fp)


def build_groups(g: Graph, c: VertexClassification) -> GroupSet:
    _require_fine(g)
    bn = {v.id for v in g.of_kind("BNChannel")}
    parts = [c.articulation, c.one_one, c.one_n, c.n_one]
    if set().union(*parts) != bn or sum(len(p) for p in parts) != len(bn):
        raise IntegrityError("classification does not partition the BN vertices")
    prov = provenance(g)
    gs = GroupSet(provenance={v: prov[v] for v in sorted(bn)})

    by_parent: dict[int, list[int]] = {}
    for v in sorted(c.one_n):
        p = _channel_parent(g, v)
        if p is None:
            raise IntegrityError(f"1-to-n vertex {v} has no shared parent")
        by_parent.setdefault(p, []).append(v)
    candidates = [Group(p, tuple(vs), p) for p, vs in sorted(by_parent.items())]

    # n-to-1: union of BN vertices linked through shared Add children
    parent_of = {v: v for v in c.n_one}

    def find(x: int) -> int:
        while parent_of[x] != x:
            parent_of[x] = parent_of[parent_of[x]]
            x = parent_of[x]
        return x

    anchor_of: dict[int, int] = {}
    for v in sorted(c.n_one):
        for ch in _merge_children(g, v):
            ops = [o for o in g.parents(ch) if o in parent_of]
            for o in ops[1:]:
                ra, rb = find(ops[0]), find(o)
                if ra != rb:
                    parent_of[max(ra, rb)] = min(ra, rb)
    for v in sorted(c.n_one):
        r = find(v)
        shared = [ch for ch in _merge_children(g, v) if sum(o in parent_of for o in g.parents(ch)) > 1]
        if shared:
            anchor_of[r] = min(anchor_of.get(r, shared[0]), shared[0])
    comps: dict[int, list[int]] = {}
    for v in sorted(c.n_one):
        comps.setdefault(find(v), []).append(v)
    candidates += [Group(anchor_of[r], tuple(vs), anchor_of[r]) for r, vs in comps.items()]
    candidates.sort(key=lambda gr: gr.id)

    for gr in candidates:
        try:
            gs.footprints[gr.id] = removal_footprint(g, gr.members)
            gs.groups.append(gr)
        except NotRemovable as exc:
            for m in gr.members:
                gs.pinned[m] = str(exc)
    for v in sorted(c.one_one):
        try:
            gs.footprints[v] = removal_footprint(g, (v,))
            gs.singletons.append(v)
        except NotRemovable as exc:
            gs.pinned[v] = str(exc)
    for v in sorted(c.articulation):
        gs.pinned[v] = "articulation point"
    if gs.member_set() & c.articulation:
        raise IntegrityError("articulation vertex placed in a sparsity unit")
    return gs


def channel_units(g: Graph) -> GroupSet:
    """Channel-level units: every BN channel on its own, ignoring topology.

    Channels whose lone removal would need a selection vertex get no footprint;
    the pruner keeps them and records why.
    """
    _require_fine(g)
    prov = provenance(g)
    bn = sorted(v.id for v in g.of_kind("BNChannel"))
    gs = GroupSet(provenance={v: prov[v] for v in bn}, level="channel")
    for v in bn:
        gs.singletons.append(v)
        try:
            gs.footprints[v] = removal_footprint(g, (v,))
        except NotRemovable as exc:
            gs.pinned[v] = str(exc)
    return gs


# ---------------------------------------------------------------- edge candidates


@dataclass
class EdgeCandidateSet:
    candidates: list[int] = field(default_factory=list)
    path_map: dict[int, list[int]] = field(default_factory=dict)
    concat_of: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "candidates": list(self.candidates),
            "path_map": {str(k): v for k, v in sorted(self.path_map.items())},
            "concat_of": {str(k): v for k, v in sorted(self.concat_of.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "EdgeCandidateSet":
        return cls(
            list(d["candidates"]),
            {int(k): list(v) for k, v in d["path_map"].items()},
            {int(k): v for k, v in d.get("concat_of", {}).items()},
        )


def disabled_path(g: Graph, eid: int) -> list[int]:
    """Vertices that lose every route to Output once edge ``eid`` is removed."""
    bwd: dict[int, list[int]] = {v.id: [] for v in g.vertices}
    for e in g.edges:
        if e.id != eid:
            bwd[e.dst].append(e.src)
    live = reachable(bwd, g.output_id)
    order = g.topo_order()
    return [v for v in order if v not in live]


def select_edge_candidates(g: Graph) -> EdgeCandidateSet:
    if g.granularity != COARSE:
        raise GranularityError("edge candidates are selected on coarse graphs")
    bridges = find_bridges(g)
    out = EdgeCandidateSet()
    for cv in sorted(g.of_kind("Concat"), key=lambda v: v.id):
        for e in g.in_edges(cv.id):
            if e.id in bridges:
                continue
            out.candidates.append(e.id)
            out.path_map[e.id] = disabled_path(g, e.id)
            out.concat_of[e.id] = cv.id
    # Paths may overlap (dense reuse): a path's tail can feed another
    # candidate's concat.  Surgery recomputes liveness, so overlap is harmless.
    return out


# ---------------------------------------------------------------- summary


def analyze(g: Graph, w=None) -> dict:
    """Summary used by ``gap analyze``: set sizes, group histogram, candidates."""
    from .ir import expand_fine

    coarse = g
    fine, _ = expand_fine(g, None) if g.granularity == COARSE else (g, None)
    cls = classify_bn_vertices(fine)
    gs = build_groups(fine, cls)
    cands = select_edge_candidates(coarse) if coarse.granularity == COARSE else EdgeCandidateSet()
    sizes = Counter(len(gr.members) for gr in gs.groups)
    return {
        "vertices": {"coarse": len(coarse.vertices), "fine": len(fine.vertices)},
        "articulation_points": len(find_articulation_points(fine)),
        "bridges": len(find_bridges(fine)),
        "classification": cls.summary(),
        "groups": {"count": len(gs.groups), "size_histogram": {str(k): v for k, v in sorted(sizes.items())}},
        "singletons": len(gs.singletons),
        "pinned": len(gs.pinned),
        "edge_candidates": len(cands.candidates),
    }


def dumps(obj: dict) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)
