"""Pipeline stages shared by the CLI subcommands and the end-to-end runner."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import torch

from . import data as gdata
from . import topology as topo
from .distill import KDConfig, finetune
from .engine import evaluate
from .ir import Graph, WeightStore, expand_fine, load_graph, save_graph
from .metrics import FlopsConvention, compression_report, measure_latency
from .pruner import PrunePlan, compute_scores, prune_edges, prune_vertices, select_threshold
from .regularize import SparsityConfig, TrainConfig, attach_edge_scales, edge_scale_vertices, train_plain, train_sparse
from .zoo import build as build_arch

log = logging.getLogger("gap")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def configure_logging() -> None:
    level = os.environ.get("GAP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def set_threads(n: int) -> None:
    if n < 1:
        raise ConfigError("threads must be >= 1")
    torch.set_num_threads(n)


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class EventLog:
    """JSON-lines events with a monotonically increasing step counter."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.step = 0
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def emit(self, stage: str, event: str, **fields_) -> None:
        rec = {"step": self.step, "stage": stage, "event": event, **fields_}
        self.step += 1
        log.info("%s %s %s", stage, event, {k: v for k, v in fields_.items() if not isinstance(v, list)})
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- stages


def stage_build(arch: str, seed: int, out: str | Path, events: EventLog | None = None) -> tuple[Graph, WeightStore]:
    g, w = build_arch(arch, seed)
    save_graph(g, w, out)
    if events:
        events.emit("build", "done", arch=arch, vertices=len(g.vertices), path=str(out))
    return g, w


def stage_analyze(g: Graph, events: EventLog | None = None) -> dict:
    summary = topo.analyze(g)
    if events:
        events.emit("analyze", "done", **summary)
    return summary


def fine_structures(g: Graph, level: str):
    """(classification, GroupSet) of the coarse graph ``g`` for a channel/vertex level."""
    fine, _ = expand_fine(g, None)
    cls = topo.classify_bn_vertices(fine)
    gs = topo.build_groups(fine, cls) if level == "vertex" else topo.channel_units(fine)
    return cls, gs


def candidates_of(g: Graph) -> topo.EdgeCandidateSet:
    """Candidate set addressed by the EdgeScale vertices already in ``g``."""
    es = edge_scale_vertices(g)
    return topo.EdgeCandidateSet(
        candidates=sorted(es), concat_of={eid: g.edge(eid).dst for eid in sorted(es)}
    )


def _epoch_events(events: EventLog | None, stage: str):
    if events is None:
        return None
    return lambda epoch, rec: events.emit(stage, "epoch", **rec)


def stage_pretrain(g, w, ds, epochs: int, batch_size: int, seed: int, events=None):
    tc = TrainConfig(epochs, batch_size, 0.01, "step")
    return train_plain(g, w, ds, tc, seed, epoch_hook=_epoch_events(events, "pretrain"))


def stage_sparse(g, w, ds, cfg: SparsityConfig, seed: int, events=None) -> tuple[Graph, WeightStore, list[dict]]:
    """Returns the training graph (with edge scales at edge level), weights and log."""
    hook = _epoch_events(events, "train")
    if cfg.level == "edge":
        cands = topo.select_edge_candidates(g)
        g, delta = attach_edge_scales(g, cands)
        w = {**w, **delta}
        cands = candidates_of(g)
        w, tlog = train_sparse(g, w, ds, cfg, seed, cands=cands, epoch_hook=hook)
    else:
        _, gs = fine_structures(g, cfg.level)
        w, tlog = train_sparse(g, w, ds, cfg, seed, groups=gs, epoch_hook=hook)
    return g, w, tlog


def stage_prune(g, w, level: str, ratio: float, events=None) -> tuple[Graph, WeightStore, PrunePlan]:
    if level == "edge":
        cands = candidates_of(g)
        scores = compute_scores(w, None, cands, "edge", g)
        plan = select_threshold(scores, ratio, g, None, None, cands)
        ng, nw = prune_edges(g, w, plan, cands)
    else:
        cls, gs = fine_structures(g, level)
        scores = compute_scores(w, gs, None, level)
        plan = select_threshold(scores, ratio, g, cls, gs)
        ng, nw = prune_vertices(g, w, plan, cls)
    if events:
        events.emit(
            "prune",
            "done",
            level=level,
            ratio=ratio,
            pruned_units=len(plan.units_to_prune),
            overrides=len(plan.safety_overrides),
            threshold=plan.threshold if plan.units_to_prune else None,
        )
    return ng, nw, plan


def stage_finetune(g, w, g_teacher, w_teacher, ds, cfg: KDConfig, use_kd: bool, seed: int, events=None):
    return finetune(g, w, g_teacher, w_teacher, ds, cfg, use_kd, seed, epoch_hook=_epoch_events(events, "finetune"))


def stage_report(before, after, mac_factor: int, edge_level: bool, config: dict | None = None):
    rep = compression_report(before, after, FlopsConvention(mac_factor=mac_factor), edge_level=edge_level)
    rep.config = config
    return rep


def stage_latency(before, after, batch_size: int = 32, reps: int = 30) -> dict:
    res = measure_latency(*after, batch_size=batch_size, warmup_reps=5, timed_reps=reps, baseline=before)
    return asdict(res)


# ---------------------------------------------------------------- end to end


@dataclass
class PipelineConfig:
    out_dir: str = "gap_run"
    arch: str = "toy"
    graph: str | None = None
    data: str = "synthetic"
    level: str = "vertex"
    pretrain_epochs: int = 20
    pretrain_batch_size: int = 64
    sparsity: dict = field(default_factory=dict)
    ratio: float = 0.5
    kd: dict = field(default_factory=dict)
    use_kd: bool = True
    seed: int = 0
    mac_factor: int = 1
    threads: int = 1
    latency: bool = False
    latency_batch: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def sparsity_config(self) -> SparsityConfig:
        try:
            return SparsityConfig(level=self.level, **self.sparsity)
        except TypeError as exc:
            raise ConfigError(f"bad sparsity section: {exc}") from exc

    def kd_config(self) -> KDConfig:
        try:
            return KDConfig(**self.kd)
        except TypeError as exc:
            raise ConfigError(f"bad kd section: {exc}") from exc

    def validate(self) -> None:
        if self.level not in ("channel", "vertex", "edge"):
            raise ConfigError(f"level must be channel, vertex or edge, not {self.level!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("ratio must lie in [0, 1]")
        if self.mac_factor not in (1, 2):
            raise ConfigError("mac_factor must be 1 or 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.data.startswith("synthetic") and not Path(self.data).exists():
            raise ConfigError(f"dataset path does not exist: {self.data}")
        if self.graph is not None and not Path(self.graph).exists():
            raise ConfigError(f"graph path does not exist: {self.graph}")
        try:
            self.sparsity_config()
            self.kd_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> dict:
        return asdict(self)


ARTIFACTS = {
    "base": "00_base.json",
    "pretrained": "01_pretrained.json",
    "sparse": "02_sparse.json",
    "plan": "03_plan.json",
    "pruned": "04_pruned.json",
    "finetuned": "05_finetuned.json",
    "report": "report.json",
    "table": "report.txt",
    "latency": "latency.json",
    "latency_table": "report_latency.txt",
    "events": "events.jsonl",
    "config": "config.json",
}


def run_pipeline(cfg: PipelineConfig) -> dict[str, Path]:
    """Build/load, pretrain, sparse retrain, prune, finetune and report.

    Every stage leaves its artifact in ``cfg.out_dir``; a failing stage raises
    ``StageError`` naming it, keeping whatever was written before.
    """
    cfg.validate()
    set_threads(cfg.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in ARTIFACTS.items()}
    write_json(paths["config"], cfg.to_json())
    events = EventLog(paths["events"])
    events.emit("pipeline", "start", config=cfg.to_json())

    def run(stage, fn, *a, **k):
        try:
            return fn(*a, **k)
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            events.emit(stage, "failed", error=str(exc))
            raise StageError(stage, exc) from exc

    ds = run("data", gdata.load_any, cfg.data)
    if cfg.graph:
        g, w = run("build", load_graph, cfg.graph)
        save_graph(g, w, paths["base"])
    else:
        g, w = run("build", stage_build, cfg.arch, cfg.seed, paths["base"], events)
    run("analyze", stage_analyze, g, events)
    if cfg.pretrain_epochs > 0:
        w, _ = run("pretrain", stage_pretrain, g, w, ds, cfg.pretrain_epochs, cfg.pretrain_batch_size, cfg.seed, events)
    save_graph(g, w, paths["pretrained"])
    g0, w0 = g, w
    gs, ws, _ = run("train", stage_sparse, g, w, ds, cfg.sparsity_config(), cfg.seed, events)
    save_graph(gs, ws, paths["sparse"])
    gp, wp, plan = run("prune", stage_prune, gs, ws, cfg.level, cfg.ratio, events)
    write_json(paths["plan"], plan.to_json())
    save_graph(gp, wp, paths["pruned"])
    wf, _ = run("finetune", stage_finetune, gp, wp, g0, w0, ds, cfg.kd_config(), cfg.use_kd, cfg.seed, events)
    save_graph(gp, wf, paths["finetuned"])
    rep = run("report", stage_report, (g0, w0), (gp, wf), cfg.mac_factor, cfg.level == "edge", cfg.to_json())
    rep_json = rep.to_json()
    rep_json["accuracy"] = {
        "pretrained": evaluate(g0, w0, ds.x_test, ds.y_test)["accuracy"],
        "sparse": evaluate(gs, ws, ds.x_test, ds.y_test)["accuracy"],
        "pruned": evaluate(gp, wp, ds.x_test, ds.y_test)["accuracy"],
        "finetuned": evaluate(gp, wf, ds.x_test, ds.y_test)["accuracy"],
    }
    write_json(paths["report"], rep_json)
    paths["table"].write_text(rep.table(cfg.arch))
    events.emit("report", "done", path=str(paths["report"]))
    if cfg.latency:
        lat = run("latency", stage_latency, (g0, w0), (gp, wf), cfg.latency_batch)
        write_json(paths["latency"], lat)
        rep.practical_sr = lat["practical_sr"]
        paths["latency_table"].write_text(rep.table(cfg.arch))
    events.emit("pipeline", "done", accuracy=rep_json["accuracy"], model_cr=rep.model_cr, theoretical_sr=rep.theoretical_sr)
    return paths
