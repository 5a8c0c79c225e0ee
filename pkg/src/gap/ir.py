"""Computational-graph IR: vertices, edges, weights, validation, on-disk format.

A graph is a DAG with exactly one ``Input`` and one ``Output`` vertex.  Coarse
graphs hold whole layers (``ConvLayer``, ``BNLayer``, ``AddLayer``); fine graphs
hold one vertex per filter/channel (``ConvFilter``, ``BNChannel``,
``AddChannel``).  ``Concat``, ``GlobalPool``, ``FC``, ``EdgeScale``, ``Input``
and ``Output`` stay single vertices at both granularities.

Every vertex consumes the channel-wise concatenation of its in-edges in slot
order, except the per-channel element-wise vertices (``AddLayer``,
``AddChannel``, ``BNChannel``) which take operands.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = "1"

COARSE = "coarse"
FINE = "fine"

KINDS = (
    "Input",
    "ConvLayer",
    "ConvFilter",
    "BNLayer",
    "BNChannel",
    "Activation",
    "AddLayer",
    "AddChannel",
    "Concat",
    "FC",
    "GlobalPool",
    "EdgeScale",
    "Output",
)
COARSE_ONLY = {"ConvLayer", "BNLayer", "AddLayer", "Activation"}
FINE_ONLY = {"ConvFilter", "BNChannel", "AddChannel"}
CONV_KINDS = {"ConvLayer", "ConvFilter"}
BN_KINDS = {"BNLayer", "BNChannel"}
ADD_KINDS = {"AddLayer", "AddChannel"}

DEFAULT_EPS = 1e-5


class GraphError(Exception):
    """Base class for IR errors."""


class GraphFormatError(GraphError):
    """Malformed manifest or blob."""


class ShapeMismatchError(GraphFormatError):
    """Declared tensor region does not fit the weights blob."""


class FormatVersionError(GraphFormatError):
    pass


class GraphValidationError(GraphError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        lines = "; ".join(f"[{r}] {i}: {m}" for r, i, m in report.violations[:5])
        super().__init__(f"graph failed validation ({len(report.violations)} violations): {lines}")


class GranularityError(GraphError):
    pass


@dataclass
class Vertex:
    id: int
    kind: str
    attrs: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Edge:
    id: int
    src: int
    dst: int
    dst_slot: int


# vertex id -> tensor name -> float32 array
WeightStore = dict[int, dict[str, np.ndarray]]


@dataclass
class Graph:
    vertices: list[Vertex]
    edges: list[Edge]
    granularity: str = COARSE
    input_shape: tuple[int, int, int] = (3, 32, 32)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._index()

    def _index(self) -> None:
        self._vmap = {v.id: v for v in self.vertices}
        self._in: dict[int, list[Edge]] = {v.id: [] for v in self.vertices}
        self._out: dict[int, list[Edge]] = {v.id: [] for v in self.vertices}
        for e in self.edges:
            if e.dst in self._in:
                self._in[e.dst].append(e)
            if e.src in self._out:
                self._out[e.src].append(e)
        for lst in self._in.values():
            lst.sort(key=lambda e: (e.dst_slot, e.id))
        for lst in self._out.values():
            lst.sort(key=lambda e: e.id)

    def vertex(self, vid: int) -> Vertex:
        return self._vmap[vid]

    def has_vertex(self, vid: int) -> bool:
        return vid in self._vmap

    def in_edges(self, vid: int) -> list[Edge]:
        return self._in[vid]

    def out_edges(self, vid: int) -> list[Edge]:
        return self._out[vid]

    def parents(self, vid: int) -> list[int]:
        return [e.src for e in self._in[vid]]

    def children(self, vid: int) -> list[int]:
        return [e.dst for e in self._out[vid]]

    def edge(self, eid: int) -> Edge:
        for e in self.edges:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def of_kind(self, *kinds: str) -> list[Vertex]:
        return [v for v in self.vertices if v.kind in kinds]

    @property
    def input_id(self) -> int:
        return self.of_kind("Input")[0].id

    @property
    def output_id(self) -> int:
        return self.of_kind("Output")[0].id

    def next_vertex_id(self) -> int:
        return max((v.id for v in self.vertices), default=-1) + 1

    def next_edge_id(self) -> int:
        return max((e.id for e in self.edges), default=-1) + 1

    def topo_order(self) -> list[int]:
        """Kahn's algorithm; ties resolved by ascending id.  Raises on cycles."""
        import heapq

        indeg = {v.id: 0 for v in self.vertices}
        for e in self.edges:
            if e.dst in indeg and e.src in indeg:
                indeg[e.dst] += 1
        heap = [vid for vid, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            vid = heapq.heappop(heap)
            order.append(vid)
            for e in self._out[vid]:
                if e.dst not in indeg:
                    continue
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    heapq.heappush(heap, e.dst)
        if len(order) != len(self.vertices):
            raise GraphError("graph contains a cycle")
        return order

    def copy(self) -> "Graph":
        return Graph(
            vertices=[Vertex(v.id, v.kind, copy.deepcopy(v.attrs)) for v in self.vertices],
            edges=list(self.edges),
            granularity=self.granularity,
            input_shape=self.input_shape,
            metadata=dict(self.metadata),
        )

    def structurally_equal(self, other: "Graph") -> bool:
        def key(g: Graph):
            return (
                g.granularity,
                tuple(g.input_shape),
                sorted((v.id, v.kind, json.dumps(v.attrs, sort_keys=True)) for v in g.vertices),
                sorted((e.id, e.src, e.dst, e.dst_slot) for e in g.edges),
                sorted(g.metadata.items()),
            )

        return key(self) == key(other)


def copy_weights(w: WeightStore) -> WeightStore:
    return {vid: {k: np.array(t, dtype=np.float32, copy=True) for k, t in d.items()} for vid, d in w.items()}


def weights_equal(a: WeightStore, b: WeightStore) -> bool:
    if set(a) != set(b):
        return False
    for vid in a:
        if set(a[vid]) != set(b[vid]):
            return False
        for k in a[vid]:
            x, y = a[vid][k], b[vid][k]
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
    return True


# ---------------------------------------------------------------- shapes


def conv_out_hw(h: int, w: int, kernel, stride: int, padding: int) -> tuple[int, int]:
    kh, kw = kernel
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def pool_out_hw(h: int, w: int, pool: dict | None) -> tuple[int, int]:
    if not pool:
        return h, w
    k, s, p = pool["kernel"], pool.get("stride", pool["kernel"]), pool.get("padding", 0)
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _input_shapes(g: Graph, vid: int, shapes: dict[int, tuple]) -> list[tuple]:
    return [shapes[e.src] for e in g.in_edges(vid)]


def _concat_shape(parts: list[tuple], where: str) -> tuple:
    if not parts:
        raise GraphError(f"{where}: no inputs")
    if any(len(p) != len(parts[0]) for p in parts):
        raise GraphError(f"{where}: inputs of mixed rank")
    if len(parts[0]) == 3:
        hw = parts[0][1:]
        if any(p[1:] != hw for p in parts):
            raise GraphError(f"{where}: spatial size mismatch {parts}")
        return (sum(p[0] for p in parts),) + tuple(hw)
    return (sum(p[0] for p in parts),)


def vertex_output_shape(g: Graph, v: Vertex, ins: list[tuple]) -> tuple:
    """Infers one vertex's output shape from its input shapes (raises GraphError)."""
    a = v.attrs
    k = v.kind
    if k == "Input":
        if ins:
            raise GraphError("Input vertex has incoming edges")
        return tuple(g.input_shape)
    if k in ("AddLayer", "AddChannel", "BNChannel"):
        if k == "AddChannel" or k == "BNChannel":
            srcs = a.get("src_channels", [0] * len(ins))
            if len(srcs) != len(ins):
                raise GraphError("src_channels length differs from operand count")
            ops = []
            for s, c in zip(ins, srcs):
                if len(s) != 3 or not 0 <= c < s[0]:
                    raise GraphError(f"operand channel {c} out of range for shape {s}")
                ops.append((1,) + tuple(s[1:]))
        else:
            ops = list(ins)
        if k == "BNChannel":
            if len(ops) != 1:
                raise GraphError("BNChannel needs exactly one input")
            h, w = pool_out_hw(ops[0][1], ops[0][2], a.get("pool"))
            return (1, h, w)
        if len(ops) < 2:
            raise GraphError("Add needs at least 2 operands")
        if any(o != ops[0] for o in ops):
            raise GraphError("Add operand shape mismatch: " + ", ".join(str(o) for o in ops))
        if k == "AddLayer" and ops[0][0] != a.get("channels", ops[0][0]):
            raise GraphError("AddLayer channels attr disagrees with operands")
        return ops[0]
    x = _concat_shape(ins, f"{k} {v.id}") if k != "Output" or ins else None
    if k in CONV_KINDS:
        if len(x) != 3:
            raise GraphError("convolution input must be C×H×W")
        if x[0] != a["in_channels"]:
            raise GraphError(f"conv expects {a['in_channels']} input channels, got {x[0]}")
        groups = a.get("groups", 1)
        if a["in_channels"] % groups:
            raise GraphError("in_channels not divisible by groups")
        if k == "ConvLayer" and a["out_channels"] % groups:
            raise GraphError("out_channels not divisible by groups")
        h, w = conv_out_hw(x[1], x[2], a["kernel"], a.get("stride", 1), a.get("padding", 0))
        if h <= 0 or w <= 0:
            raise GraphError("convolution output is empty")
        h, w = pool_out_hw(h, w, a.get("pool"))
        return (a["out_channels"] if k == "ConvLayer" else 1, h, w)
    if k == "BNLayer":
        if len(x) != 3 or x[0] != a["channels"]:
            raise GraphError(f"BNLayer expects {a['channels']} channels, got {x}")
        h, w = pool_out_hw(x[1], x[2], a.get("pool"))
        return (x[0], h, w)
    if k in ("Concat",):
        if len(ins) < 2:
            raise GraphError("Concat needs at least 2 inputs")
        return x
    if k == "GlobalPool":
        if len(x) != 3:
            raise GraphError("GlobalPool input must be C×H×W")
        return (x[0],)
    if k == "FC":
        if len(x) != 1 or x[0] != a["in_features"]:
            raise GraphError(f"FC expects ({a['in_features']},), got {x}")
        return (a["out_features"],)
    if k == "EdgeScale":
        if g.granularity == COARSE and len(ins) != 1:
            raise GraphError("EdgeScale needs exactly one input")
        return x
    if k == "Activation":
        return x
    if k == "Output":
        if len(ins) != 1 or len(ins[0]) != 1:
            raise GraphError("Output takes one vector of logits")
        return ins[0]
    raise GraphError(f"unknown vertex kind {k!r}")


def infer_shapes(g: Graph) -> dict[int, tuple]:
    shapes: dict[int, tuple] = {}
    for vid in g.topo_order():
        v = g.vertex(vid)
        shapes[vid] = vertex_output_shape(g, v, _input_shapes(g, vid, shapes))
    return shapes


def expected_tensors(v: Vertex) -> dict[str, tuple]:
    a = v.attrs
    if v.kind in CONV_KINDS:
        out = a["out_channels"] if v.kind == "ConvLayer" else 1
        kh, kw = a["kernel"]
        t = {"kernel": (out, a["in_channels"] // a.get("groups", 1), kh, kw)}
        if a.get("bias", False):
            t["bias"] = (out,)
        return t
    if v.kind in BN_KINDS:
        c = a["channels"] if v.kind == "BNLayer" else 1
        return {"gamma": (c,), "beta": (c,), "mean": (c,), "var": (c,)}
    if v.kind == "FC":
        return {"weight": (a["out_features"], a["in_features"]), "bias": (a["out_features"],)}
    if v.kind == "EdgeScale":
        return {"scale": (1,)}
    return {}


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    violations: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule: str, ident: int, message: str) -> None:
        self.violations.append((rule, ident, message))


def reachable(adj: dict[int, list[int]], start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for x in adj.get(u, ()):
            if x not in seen:
                seen.add(x)
                stack.append(x)
    return seen


def validate_graph(g: Graph, w: WeightStore | None = None) -> ValidationReport:
    """Checks structural, shape and weight invariants.  Never raises."""
    rep = ValidationReport()
    try:
        _validate(g, w, rep)
    except Exception as exc:  # totality: anything unexpected is a violation
        rep.add("internal", -1, f"{type(exc).__name__}: {exc}")
    return rep


def _validate(g: Graph, w: WeightStore | None, rep: ValidationReport) -> None:
    if g.granularity not in (COARSE, FINE):
        rep.add("granularity", -1, f"unknown granularity {g.granularity!r}")
    if len(g.input_shape) != 3 or any(d <= 0 for d in g.input_shape):
        rep.add("input_shape", -1, f"bad input shape {g.input_shape}")
    ids = [v.id for v in g.vertices]
    if len(set(ids)) != len(ids):
        rep.add("vertex.id", -1, "duplicate vertex ids")
    if any(not isinstance(i, int) or i < 0 for i in ids):
        rep.add("vertex.id", -1, "vertex ids must be non-negative integers")
    eids = [e.id for e in g.edges]
    if len(set(eids)) != len(eids):
        rep.add("edge.id", -1, "duplicate edge ids")
    vids = set(ids)
    for v in g.vertices:
        if v.kind not in KINDS:
            rep.add("vertex.kind", v.id, f"unknown kind {v.kind!r}")
        elif g.granularity == FINE and v.kind in COARSE_ONLY:
            rep.add("vertex.kind", v.id, f"{v.kind} not allowed in a fine graph")
        elif g.granularity == COARSE and v.kind in FINE_ONLY:
            rep.add("vertex.kind", v.id, f"{v.kind} not allowed in a coarse graph")
    triples = set()
    for e in g.edges:
        if e.src not in vids or e.dst not in vids:
            rep.add("edge.endpoint", e.id, "edge references unknown vertex")
        if (e.src, e.dst, e.dst_slot) in triples:
            rep.add("edge.unique", e.id, "duplicate (src, dst, slot)")
        triples.add((e.src, e.dst, e.dst_slot))
    for v in g.vertices:
        slots = sorted(e.dst_slot for e in g.in_edges(v.id))
        if slots != list(range(len(slots))):
            rep.add("edge.slot", v.id, f"input slots not dense: {slots}")
    n_in = len(g.of_kind("Input"))
    n_out = len(g.of_kind("Output"))
    if n_in != 1 or n_out != 1:
        rep.add("io.count", -1, f"need exactly one Input and one Output, got {n_in}/{n_out}")
    if not rep.ok:
        return
    try:
        g.topo_order()
    except GraphError:
        rep.add("dag", -1, "graph contains a cycle")
        return
    fwd = {v.id: g.children(v.id) for v in g.vertices}
    bwd = {v.id: g.parents(v.id) for v in g.vertices}
    live = reachable(fwd, g.input_id) & reachable(bwd, g.output_id)
    for v in g.vertices:
        if v.id not in live:
            rep.add("io.path", v.id, "vertex not on Input→Output path")
    for v in g.vertices:
        n = len(g.in_edges(v.id))
        if v.kind == "Concat" and n < 2:
            rep.add("concat.arity", v.id, "Concat needs at least 2 incoming slots")
        if v.kind in ADD_KINDS and n < 2:
            rep.add("add.arity", v.id, "Add needs at least 2 operands")
        if v.kind == "EdgeScale":
            outs = g.out_edges(v.id)
            bad_in = n != 1 if g.granularity == COARSE else n < 1
            if bad_in or len(outs) != 1 or g.vertex(outs[0].dst).kind != "Concat":
                rep.add("edgescale.edge", v.id, "EdgeScale must sit on a single edge into a Concat")
        if v.kind == "ConvFilter" and v.attrs.get("out_channels", 1) != 1:
            rep.add("fine.width", v.id, "ConvFilter must produce exactly one channel")
        if v.kind in BN_KINDS and v.attrs.get("eps", DEFAULT_EPS) <= 0:
            rep.add("bn.eps", v.id, "BN epsilon must be positive")
    shapes: dict[int, tuple] = {}
    for vid in g.topo_order():
        v = g.vertex(vid)
        ins = [shapes.get(e.src) for e in g.in_edges(vid)]
        if any(s is None for s in ins):
            continue
        try:
            shapes[vid] = vertex_output_shape(g, v, ins)
        except (GraphError, KeyError, TypeError, ValueError, IndexError) as exc:
            msg = str(exc)
            rule = "add.shape" if "Add operand shape mismatch" in msg else "shape"
            rep.add(rule, vid, msg if rule == "add.shape" else f"shape inference failed: {msg}")
    if w is not None:
        _validate_weights(g, w, rep)


def _validate_weights(g: Graph, w: WeightStore, rep: ValidationReport) -> None:
    for v in g.vertices:
        try:
            exp = expected_tensors(v)
        except (KeyError, TypeError, ValueError) as exc:
            rep.add("weights.attrs", v.id, f"cannot derive tensor shapes: {exc}")
            continue
        have = w.get(v.id, {})
        if exp and v.id not in w:
            rep.add("weights.missing", v.id, f"no weights for {v.kind}")
            continue
        for name, shape in exp.items():
            if name not in have:
                rep.add("weights.missing", v.id, f"missing tensor {name!r}")
            elif tuple(have[name].shape) != shape:
                rep.add("weights.shape", v.id, f"{name} has shape {tuple(have[name].shape)}, expected {shape}")
            elif not np.all(np.isfinite(have[name])):
                rep.add("weights.finite", v.id, f"{name} has non-finite values")
        for name in have:
            if name not in exp:
                rep.add("weights.orphan", v.id, f"unexpected tensor {name!r}")
        if v.kind in BN_KINDS and "var" in have and np.any(have["var"] <= 0):
            rep.add("weights.var", v.id, "running variance must be strictly positive")
    for vid in w:
        if not g.has_vertex(vid):
            rep.add("weights.orphan", vid, "weights for unknown vertex")


def require_valid(g: Graph, w: WeightStore | None = None) -> None:
    rep = validate_graph(g, w)
    if not rep.ok:
        raise GraphValidationError(rep)


# ---------------------------------------------------------------- file format


def blob_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".bin")


def save_graph(g: Graph, w: WeightStore, path: str | Path) -> None:
    """Writes ``path`` (JSON manifest) and ``<stem>.bin`` (little-endian f32)."""
    require_valid(g, w)
    path = Path(path)
    tensors = []
    chunks = []
    offset = 0
    for vid in sorted(w):
        for name in sorted(w[vid]):
            arr = np.ascontiguousarray(w[vid][name], dtype="<f4")
            tensors.append(
                {
                    "vertex_id": vid,
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "f32",
                    "offset": offset,
                    "length": int(arr.size),
                }
            )
            chunks.append(arr.tobytes())
            offset += arr.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "granularity": g.granularity,
        "input_shape": list(g.input_shape),
        "vertices": [{"id": v.id, "kind": v.kind, "attrs": v.attrs} for v in sorted(g.vertices, key=lambda v: v.id)],
        "edges": [
            {"id": e.id, "src": e.src, "dst": e.dst, "dst_slot": e.dst_slot}
            for e in sorted(g.edges, key=lambda e: e.id)
        ],
        "tensors": tensors,
        "metadata": dict(sorted(g.metadata.items())),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    blob_path(path).write_bytes(b"".join(chunks))


def _as_int(x: Any, what: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise GraphFormatError(f"{what} must be an integer, got {x!r}")
    return x


def graph_from_manifest(m: Any) -> Graph:
    if not isinstance(m, dict):
        raise GraphFormatError("manifest must be a JSON object")
    if m.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported format_version {m.get('format_version')!r}")
    try:
        vertices = []
        for rec in m["vertices"]:
            attrs = rec.get("attrs", {})
            if not isinstance(attrs, dict) or not isinstance(rec["kind"], str):
                raise GraphFormatError("bad vertex record")
            vertices.append(Vertex(_as_int(rec["id"], "vertex id"), rec["kind"], attrs))
        edges = [
            Edge(
                _as_int(r["id"], "edge id"),
                _as_int(r["src"], "edge src"),
                _as_int(r["dst"], "edge dst"),
                _as_int(r["dst_slot"], "edge slot"),
            )
            for r in m["edges"]
        ]
        shape = m["input_shape"]
        if not isinstance(shape, list) or len(shape) != 3:
            raise GraphFormatError("input_shape must be [C, H, W]")
        meta = m.get("metadata", {})
        if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
            raise GraphFormatError("metadata must map strings to strings")
        return Graph(
            vertices=vertices,
            edges=edges,
            granularity=str(m["granularity"]),
            input_shape=tuple(_as_int(d, "input_shape") for d in shape),
            metadata=dict(meta),
        )
    except GraphFormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise GraphFormatError(f"malformed manifest: {type(exc).__name__}: {exc}") from exc


def parse_manifest(text: str | bytes, blob: bytes) -> tuple[Graph, WeightStore]:
    try:
        m = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise GraphFormatError(f"manifest is not valid JSON: {exc}") from exc
    g = graph_from_manifest(m)
    if len(blob) % 4:
        raise ShapeMismatchError(f"weights blob length {len(blob)} is not a multiple of 4")
    data = np.frombuffer(blob, dtype="<f4")
    w: WeightStore = {}
    tensors = m.get("tensors", [])
    if not isinstance(tensors, list):
        raise GraphFormatError("tensors must be a list")
    for t in tensors:
        try:
            vid = _as_int(t["vertex_id"], "vertex_id")
            name = t["name"]
            shape = [_as_int(d, "tensor dim") for d in t["shape"]]
            off = _as_int(t["offset"], "offset")
            length = _as_int(t["length"], "length")
            dtype = t.get("dtype")
        except (KeyError, TypeError) as exc:
            raise GraphFormatError(f"malformed tensor record: {exc}") from exc
        if dtype != "f32" or not isinstance(name, str):
            raise GraphFormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if any(d < 0 for d in shape) or off < 0 or length < 0:
            raise GraphFormatError(f"tensor {name!r}: negative shape/offset/length")
        if int(np.prod(shape)) != length:
            raise ShapeMismatchError(f"tensor {vid}/{name}: shape {shape} does not hold {length} values")
        if off + length > data.size:
            raise ShapeMismatchError(
                f"tensor {vid}/{name}: region [{off}, {off + length}) exceeds blob of {data.size} floats"
            )
        w.setdefault(vid, {})[name] = data[off : off + length].reshape(shape).astype(np.float32)
    return g, w


def load_graph(path: str | Path) -> tuple[Graph, WeightStore]:
    path = Path(path)
    try:
        text = path.read_bytes()
        blob = blob_path(path).read_bytes() if blob_path(path).exists() else b""
    except OSError as exc:
        raise GraphFormatError(f"cannot read {path}: {exc}") from exc
    g, w = parse_manifest(text, blob)
    require_valid(g, w)
    return g, w


# ---------------------------------------------------------------- fine expansion


def provenance(g: Graph) -> dict[int, tuple[int, int]]:
    """Fine vertex id -> (coarse vertex id, channel index or -1)."""
    raw = json.loads(g.metadata.get("provenance", "{}"))
    return {int(k): (v[0], v[1]) for k, v in raw.items()}


def expand_fine(g: Graph, w: WeightStore | None) -> tuple[Graph, WeightStore]:
    """Splits conv/BN/add layers into one vertex per filter/channel.

    With ``w=None`` only the topology is expanded (the returned store is empty).
    The fine graph has one edge per (filter, input channel) pair, so it is
    meant for CIFAR-scale networks.
    """
    if g.granularity != COARSE:
        raise GranularityError("expand_fine needs a coarse graph")
    require_valid(g, w)
    vertices: list[Vertex] = []
    edges: list[Edge] = []
    fw: WeightStore = {}
    prov: dict[int, tuple[int, int]] = {}
    # coarse id -> list of (fine vertex id, width) covering its output channels
    chans: dict[int, list[tuple[int, int]]] = {}
    shapes = infer_shapes(g)
    next_id = 0

    def new_vertex(kind: str, attrs: dict, coarse: int, ch: int) -> int:
        nonlocal next_id
        vid = next_id
        next_id += 1
        vertices.append(Vertex(vid, kind, attrs))
        prov[vid] = (coarse, ch)
        return vid

    def connect(src: int, dst: int, slot: int) -> None:
        edges.append(Edge(len(edges), src, dst, slot))

    def flat_inputs(vid: int) -> list[tuple[int, int]]:
        out = []
        for e in g.in_edges(vid):
            out.extend(chans[e.src])
        return out

    def channel_source(producers: list[tuple[int, int]], c: int) -> tuple[int, int]:
        """Fine vertex and channel offset carrying input channel ``c``."""
        for fid, width in producers:
            if c < width:
                return fid, c
            c -= width
        raise GraphError("channel index out of range")

    for cid in g.topo_order():
        v = g.vertex(cid)
        a = v.attrs
        if v.kind in ("Input", "Concat", "GlobalPool", "FC", "EdgeScale", "Output"):
            fid = new_vertex(v.kind, copy.deepcopy(a), cid, -1)
            for slot, (src, _) in enumerate(flat_inputs(cid)):
                connect(src, fid, slot)
            if w is not None and cid in w:
                fw[fid] = {k: t.copy() for k, t in w[cid].items()}
            width = shapes[cid][0]
            chans[cid] = [(fid, width)]
        elif v.kind == "ConvLayer":
            ins = flat_inputs(cid)
            per_group = a["out_channels"] // a.get("groups", 1)
            row = []
            for c in range(a["out_channels"]):
                attrs = {k: copy.deepcopy(x) for k, x in a.items() if k != "out_channels"}
                attrs["group_index"] = c // per_group
                fid = new_vertex("ConvFilter", attrs, cid, c)
                for slot, (src, _) in enumerate(ins):
                    connect(src, fid, slot)
                if w is not None:
                    fw[fid] = {k: t[c : c + 1].copy() for k, t in w[cid].items()}
                row.append((fid, 1))
            chans[cid] = row
        elif v.kind == "BNLayer":
            ins = flat_inputs(cid)
            row = []
            for c in range(a["channels"]):
                src, off = channel_source(ins, c)
                attrs = {k: copy.deepcopy(x) for k, x in a.items() if k != "channels"}
                attrs["src_channels"] = [off]
                fid = new_vertex("BNChannel", attrs, cid, c)
                connect(src, fid, 0)
                if w is not None:
                    fw[fid] = {k: t[c : c + 1].copy() for k, t in w[cid].items()}
                row.append((fid, 1))
            chans[cid] = row
        elif v.kind == "AddLayer":
            operands = [chans[e.src] for e in g.in_edges(cid)]
            row = []
            for c in range(a["channels"]):
                srcs = [channel_source(op, c) for op in operands]
                attrs = {k: copy.deepcopy(x) for k, x in a.items() if k != "channels"}
                attrs["src_channels"] = [off for _, off in srcs]
                fid = new_vertex("AddChannel", attrs, cid, c)
                for slot, (src, _) in enumerate(srcs):
                    connect(src, fid, slot)
                row.append((fid, 1))
            chans[cid] = row
        else:
            raise GraphError(f"unsupported vertex kind for expansion: {v.kind}")

    meta = dict(g.metadata)
    meta["provenance"] = json.dumps({str(k): list(v) for k, v in sorted(prov.items())}, separators=(",", ":"))
    fine = Graph(vertices, edges, FINE, g.input_shape, meta)
    return fine, fw


# ---------------------------------------------------------------- building


class GraphBuilder:
    """Incremental construction of coarse graphs."""

    def __init__(self, input_shape: tuple[int, int, int]):
        self.input_shape = tuple(input_shape)
        self.vertices: list[Vertex] = []
        self.edges: list[Edge] = []
        self.weights: WeightStore = {}
        self.input = self.add("Input", [])

    def add(self, kind: str, inputs: list[int], weights: dict[str, np.ndarray] | None = None, **attrs) -> int:
        vid = len(self.vertices)
        self.vertices.append(Vertex(vid, kind, attrs))
        for slot, src in enumerate(inputs):
            self.edges.append(Edge(len(self.edges), src, vid, slot))
        if weights:
            self.weights[vid] = {k: np.asarray(t, dtype=np.float32) for k, t in weights.items()}
        return vid

    def build(self, metadata: dict[str, str] | None = None) -> tuple[Graph, WeightStore]:
        g = Graph(list(self.vertices), list(self.edges), COARSE, self.input_shape, dict(metadata or {}))
        require_valid(g, self.weights)
        return g, self.weights
