"""Command-line entry point: ``gap <subcommand>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as gdata
from .distill import KDConfig
from .ir import GraphError, load_graph, save_graph
from .pipeline import (
    ConfigError,
    EventLog,
    PipelineConfig,
    StageError,
    configure_logging,
    run_pipeline,
    set_threads,
    stage_analyze,
    stage_build,
    stage_finetune,
    stage_latency,
    stage_prune,
    stage_report,
    stage_sparse,
    stage_pretrain,
    write_json,
)
from .regularize import SparsityConfig
from .zoo import PRESETS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _merge(cfg: dict, args: argparse.Namespace, keys: list[str]) -> dict:
    """Command-line flags override config keys."""
    out = dict(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--log", help="JSON-lines event log path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gap", description="Topology-adaptive pruning of CNN computational graphs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a zoo architecture and save it")
    _common(p)
    p.add_argument("--arch", choices=sorted(PRESETS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="articulation points, classification, groups, edge candidates")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")

    p = sub.add_parser("train", help="plain or sparsity-regularized training")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", choices=["plain", "channel", "vertex", "edge"])
    p.add_argument("--lambda-s", dest="lambda_s", type=float)
    p.add_argument("--lambda-gs", dest="lambda_gs", type=float)
    p.add_argument("--lambda-es", dest="lambda_es", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-scales", dest="decay_scales", action="store_true", default=None,
                   help="apply weight decay to BN gamma and edge scales too")
    p.add_argument("--data", help="'synthetic[:seed]', a CIFAR-10 binary directory or an exported dataset")

    p = sub.add_parser("prune", help="global-threshold pruning with graph surgery")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan", help="where to write the prune plan")
    p.add_argument("--level", choices=["channel", "vertex", "edge"])
    p.add_argument("--ratio", type=float)

    p = sub.add_parser("finetune", help="finetune a pruned graph, optionally with self-taught KD")
    _common(p)
    p.add_argument("--teacher")
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kd", dest="use_kd", action="store_true", default=None)
    p.add_argument("--no-kd", dest="use_kd", action="store_false")
    p.add_argument("--temperature", type=float)
    p.add_argument("--soft-weight", dest="soft_weight", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--decay-scales", dest="decay_scales", action="store_true", default=None)
    p.add_argument("--data")

    p = sub.add_parser("report", help="parameters, FLOPs, CR and SR before/after pruning")
    _common(p)
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--mac-factor", dest="mac_factor", type=int, choices=[1, 2])
    p.add_argument("--edge-level", dest="edge_level", action="store_true")
    p.add_argument("--latency", action="store_true")
    p.add_argument("--batch", type=int)
    p.add_argument("--out", help="JSON report path (the text table goes to stdout)")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--arch", choices=sorted(PRESETS))
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--level", choices=["channel", "vertex", "edge"])
    p.add_argument("--ratio", type=float)
    p.add_argument("--mac-factor", dest="mac_factor", type=int, choices=[1, 2])
    p.add_argument("--kd", dest="use_kd", action="store_true", default=None)
    p.add_argument("--no-kd", dest="use_kd", action="store_false")
    p.add_argument("--latency", action="store_true", default=None)
    return ap


def _setup(args) -> dict:
    cfg = _read_config(args.config)
    cfg = _merge(cfg, args, ["seed", "threads"])
    set_threads(int(cfg.get("threads", 1)))
    return cfg


def cmd_build(args) -> int:
    cfg = _merge(_setup(args), args, ["arch"])
    g, _ = stage_build(cfg.get("arch", "toy"), int(cfg.get("seed", 0)), args.out, EventLog(args.log))
    print(f"wrote {args.out} ({len(g.vertices)} vertices)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    _setup(args)
    g, _ = load_graph(args.inp)
    summary = stage_analyze(g, EventLog(args.log))
    text = json.dumps(summary, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _merge(_setup(args), args, ["level", "lambda_s", "lambda_gs", "lambda_es", "epochs", "batch_size", "lr", "decay_scales", "data"])
    g, w = load_graph(args.inp)
    ds = gdata.load_any(cfg.get("data", "synthetic"))
    seed = int(cfg.get("seed", 0))
    level = cfg.get("level", "vertex")
    events = EventLog(args.log)
    if level == "plain":
        w, tlog = stage_pretrain(g, w, ds, int(cfg.get("epochs", 20)), int(cfg.get("batch_size", 64)), seed, events)
    else:
        keys = ["lambda_s", "lambda_gs", "lambda_es", "epochs", "batch_size", "lr", "schedule", "decay_scales"]
        sc = SparsityConfig(level=level, **{k: cfg[k] for k in keys if k in cfg})
        g, w, tlog = stage_sparse(g, w, ds, sc, seed, events)
    save_graph(g, w, args.out)
    last = tlog[-1] if tlog else {}
    print(f"wrote {args.out}; final test accuracy {last.get('test_accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _merge(_setup(args), args, ["level", "ratio"])
    g, w = load_graph(args.inp)
    level = cfg.get("level")
    if level is None:
        level = "edge" if g.of_kind("EdgeScale") else "vertex"
    ng, nw, plan = stage_prune(g, w, level, float(cfg.get("ratio", 0.5)), EventLog(args.log))
    save_graph(ng, nw, args.out)
    if args.plan:
        write_json(args.plan, plan.to_json())
    print(f"pruned {len(plan.units_to_prune)} units ({len(plan.safety_overrides)} kept by safety rules); wrote {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _merge(_setup(args), args, ["use_kd", "temperature", "soft_weight", "epochs", "batch_size", "decay_scales", "data"])
    use_kd = cfg.get("use_kd", True)
    if use_kd and not args.teacher:
        raise ConfigError("--teacher is required with --kd")
    gs, ws = load_graph(args.student)
    gt, wt = load_graph(args.teacher) if args.teacher else (None, None)
    keys = ["temperature", "soft_weight", "epochs", "batch_size", "lr", "schedule", "decay_scales"]
    kd = KDConfig(**{k: cfg[k] for k in keys if k in cfg})
    ds = gdata.load_any(cfg.get("data", "synthetic"))
    wf, tlog = stage_finetune(gs, ws, gt, wt, ds, kd, use_kd, int(cfg.get("seed", 0)), EventLog(args.log))
    save_graph(gs, wf, args.out)
    last = tlog[-1] if tlog else {}
    print(f"wrote {args.out}; final test accuracy {last.get('test_accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _merge(_setup(args), args, ["mac_factor", "batch"])
    before, after = load_graph(args.before), load_graph(args.after)
    rep = stage_report(before, after, int(cfg.get("mac_factor", 1)), args.edge_level, cfg)
    out = rep.to_json()
    if args.latency:
        lat = stage_latency(before, after, int(cfg.get("batch", 32)))
        rep.practical_sr = lat["practical_sr"]
        out["practical_sr"] = lat["practical_sr"]
        out["latency"] = lat
    if args.out:
        write_json(args.out, out)
    print(rep.table(Path(args.before).stem), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _read_config(args.config)
    cfg = _merge(cfg, args, ["seed", "threads", "out_dir", "arch", "graph", "data", "level", "ratio", "mac_factor", "use_kd", "latency"])
    pc = PipelineConfig.from_dict(cfg)
    paths = run_pipeline(pc)
    table = paths["latency_table"] if pc.latency else paths["table"]
    print(Path(table).read_text(), end="")
    print(f"artifacts in {pc.out_dir}")
    return EXIT_OK


COMMANDS = {
    "build": cmd_build,
    "analyze": cmd_analyze,
    "train": cmd_train,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"gap {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"gap {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (GraphError, ValueError, OSError) as exc:
        print(f"gap {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
