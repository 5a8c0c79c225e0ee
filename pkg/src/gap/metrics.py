"""Parameter and FLOPs accounting, compression reports and latency measurement."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .engine import forward, to_torch
from .ir import BN_KINDS, CONV_KINDS, Graph, WeightStore, conv_out_hw, infer_shapes

COUNTED = {"kernel", "bias", "gamma", "beta", "weight", "scale"}


@dataclass(frozen=True)
class FlopsConvention:
    """``mac_factor`` 1 counts a multiply-accumulate as one operation, 2 as two."""

    mac_factor: int = 1
    include_bn: bool = False
    include_fc: bool = True

    def __post_init__(self):
        if self.mac_factor not in (1, 2):
            raise ValueError("mac_factor must be 1 or 2")


def count_params(g: Graph, w: WeightStore) -> int:
    """Trainable parameters: kernels, FC weights/biases, BN gamma/beta, edge scales."""
    total = 0
    for v in g.vertices:
        for name, t in w.get(v.id, {}).items():
            if name in COUNTED:
                total += int(np.prod(t.shape))
    return total


def layer_params(g: Graph, w: WeightStore) -> dict[int, int]:
    return {
        v.id: sum(int(np.prod(t.shape)) for n, t in w.get(v.id, {}).items() if n in COUNTED)
        for v in g.vertices
        if w.get(v.id)
    }


def vertex_flops(g: Graph, shapes: dict[int, tuple], vid: int, conv: FlopsConvention) -> int:
    v = g.vertex(vid)
    a = v.attrs
    if v.kind in CONV_KINDS:
        ins = [shapes[e.src] for e in g.in_edges(vid)]
        h, w_ = ins[0][1], ins[0][2]
        oh, ow = conv_out_hw(h, w_, a["kernel"], a.get("stride", 1), a.get("padding", 0))
        cout = a["out_channels"] if v.kind == "ConvLayer" else 1
        kh, kw = a["kernel"]
        return conv.mac_factor * kh * kw * (a["in_channels"] // a.get("groups", 1)) * cout * oh * ow
    if v.kind == "FC" and conv.include_fc:
        return conv.mac_factor * a["in_features"] * a["out_features"]
    if v.kind in BN_KINDS and conv.include_bn:
        src = shapes[g.in_edges(vid)[0].src]
        c = a["channels"] if v.kind == "BNLayer" else 1
        return conv.mac_factor * c * src[1] * src[2]
    return 0


def count_flops(g: Graph, input_shape=None, conv: FlopsConvention | None = None) -> int:
    conv = conv or FlopsConvention()
    if input_shape is not None and tuple(input_shape) != tuple(g.input_shape):
        g = Graph(g.vertices, g.edges, g.granularity, tuple(input_shape), g.metadata)
    shapes = infer_shapes(g)
    return sum(vertex_flops(g, shapes, v.id, conv) for v in g.vertices)


def layer_flops(g: Graph, conv: FlopsConvention | None = None) -> dict[int, int]:
    conv = conv or FlopsConvention()
    shapes = infer_shapes(g)
    return {v.id: f for v in g.vertices if (f := vertex_flops(g, shapes, v.id, conv))}


# ---------------------------------------------------------------- latency


@dataclass
class LatencyResult:
    median_ms: float
    iqr_ms: float
    reps: int
    warmup: int
    batch_size: int
    threads: int
    practical_sr: float | None = None
    baseline_median_ms: float | None = None


def _time_forward(g: Graph, w: WeightStore, batch_size: int, warmup: int, reps: int, seed: int = 0) -> list[float]:
    tw = to_torch(w)
    x = torch.from_numpy(np.random.default_rng(seed).standard_normal((batch_size,) + tuple(g.input_shape)).astype(np.float32))
    times = []
    with torch.no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            forward(g, tw, x, "eval")
            dt = (time.perf_counter() - t0) * 1000.0
            if i >= warmup:
                times.append(dt)
    return times


def measure_latency(
    g: Graph,
    w: WeightStore,
    batch_size: int = 32,
    warmup_reps: int = 5,
    timed_reps: int = 30,
    baseline: tuple[Graph, WeightStore] | None = None,
) -> LatencyResult:
    """Median eval-mode forward time.  With ``baseline``, both graphs are timed
    in interleaved rounds and practical SR = median(baseline) / median(subject)."""
    if warmup_reps < 0 or timed_reps <= 0 or batch_size <= 0:
        raise ValueError("repetition counts and batch size must be positive")
    if baseline is None:
        times = _time_forward(g, w, batch_size, warmup_reps, timed_reps)
        base = None
    else:
        times, base = [], []
        _time_forward(g, w, batch_size, warmup_reps, 1)
        _time_forward(*baseline, batch_size, warmup_reps, 1)
        rounds = 5
        per = max(1, timed_reps // rounds)
        for _ in range(rounds):
            base += _time_forward(*baseline, batch_size, 1, per)
            times += _time_forward(g, w, batch_size, 1, per)
    q = np.percentile(times, [25, 75])
    res = LatencyResult(
        median_ms=float(statistics.median(times)),
        iqr_ms=float(q[1] - q[0]),
        reps=len(times),
        warmup=warmup_reps,
        batch_size=batch_size,
        threads=torch.get_num_threads(),
    )
    if base:
        res.baseline_median_ms = float(statistics.median(base))
        res.practical_sr = res.baseline_median_ms / res.median_ms
    return res


# ---------------------------------------------------------------- reports


@dataclass
class CompressionReport:
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    model_cr: float
    theoretical_sr: float
    convention: dict
    practical_sr: float | None = None
    per_layer: list[dict] = field(default_factory=list)
    remaining_edges: list[dict] = field(default_factory=list)
    latency: dict | None = None
    config: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def table(self, name: str = "model") -> str:
        """Plain-text row set with the columns of the published pruning tables."""
        cols = ["", "Model Size (M)", "Model CR", "FLOPs", "Theoretical SR", "Practical SR"]
        base = [f"{name} baseline", f"{self.params_before / 1e6:.4f}", "-", _fmt_flops(self.flops_before), "-", "-"]
        pr = "-" if self.practical_sr is None else f"{self.practical_sr:.2f}"
        after = [
            f"{name} pruned",
            f"{self.params_after / 1e6:.4f}",
            f"{self.model_cr:.2f}",
            _fmt_flops(self.flops_after),
            f"{self.theoretical_sr:.2f}",
            pr,
        ]
        rows = [cols, base, after]
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        lines = [" | ".join(c.ljust(wd) for c, wd in zip(r, widths)) for r in rows]
        lines.insert(1, "-+-".join("-" * wd for wd in widths))
        out = "\n".join(lines) + "\n"
        out += f"(FLOPs convention: mac_factor={self.convention['mac_factor']}, include_bn={self.convention['include_bn']})\n"
        if self.remaining_edges:
            out += "\nremaining paths per multi-path stage:\n"
            for r in self.remaining_edges:
                bar = "#" * r["remaining"] + "." * (r["original"] - r["remaining"])
                out += f"  concat {r['concat']:>5}: {r['remaining']:>3}/{r['original']:<3} {bar}\n"
        return out


def _fmt_flops(f: int) -> str:
    if f >= 1e9:
        return f"{f / 1e9:.2f}G"
    if f >= 1e6:
        return f"{f / 1e6:.1f}M"
    return f"{f / 1e3:.1f}K"


def remaining_paths(before: Graph, after: Graph) -> list[dict]:
    """Per-Concat path counts before and after edge pruning.

    Concats are matched by vertex id; a Concat bypassed because a single path
    survived counts as 1 remaining.
    """
    out = []
    for v in sorted(before.of_kind("Concat"), key=lambda v: v.id):
        orig = len(before.in_edges(v.id))
        if after.has_vertex(v.id) and after.vertex(v.id).kind == "Concat":
            rem = len(after.in_edges(v.id))
        else:
            rem = 1
        out.append({"concat": v.id, "original": orig, "remaining": rem})
    return out


def compression_report(
    before: tuple[Graph, WeightStore],
    after: tuple[Graph, WeightStore],
    conv: FlopsConvention | None = None,
    edge_level: bool = False,
) -> CompressionReport:
    conv = conv or FlopsConvention()
    gb, wb = before
    ga, wa = after
    pb, pa = count_params(gb, wb), count_params(ga, wa)
    fb, fa = count_flops(gb, None, conv), count_flops(ga, None, conv)
    lpb, lpa = layer_params(gb, wb), layer_params(ga, wa)
    lfb, lfa = layer_flops(gb, conv), layer_flops(ga, conv)
    per_layer = []
    for v in sorted(gb.vertices, key=lambda v: v.id):
        if v.id not in lpb and v.id not in lfb:
            continue
        alive = ga.has_vertex(v.id)
        per_layer.append(
            {
                "vertex": v.id,
                "kind": v.kind,
                "params_before": lpb.get(v.id, 0),
                "params_after": lpa.get(v.id, 0) if alive else 0,
                "flops_before": lfb.get(v.id, 0),
                "flops_after": lfa.get(v.id, 0) if alive else 0,
            }
        )
    return CompressionReport(
        params_before=pb,
        params_after=pa,
        flops_before=fb,
        flops_after=fa,
        model_cr=pb / pa if pa else float("inf"),
        theoretical_sr=fb / fa if fa else float("inf"),
        convention=asdict(conv),
        per_layer=per_layer,
        remaining_edges=remaining_paths(gb, ga) if edge_level else [],
    )
