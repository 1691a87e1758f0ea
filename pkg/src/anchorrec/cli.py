"""``anchorrec`` command line: train, evaluate, analyze, synth, sweep.

Exit codes: 0 ok, 1 config, 2 data, 3 checkpoint, 4 usage.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path

import tomli_w

from .config import RunConfig, apply_overrides, from_dict, load_config, parse_value
from .eval import export_embeddings, full_rank, neighbor_report, snapshot_overlap
from .ingest import ConfigError, DataError, write_synthetic
from .model import snapshot
from .train import CheckpointError, load_checkpoint, prepare_data, run_seeds, save_checkpoint

log = logging.getLogger("anchorrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_USAGE = 0, 1, 2, 3, 4
ANALYSES = ("overlap", "neighbors", "export")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def metric_table(metrics: dict[str, float]) -> dict[str, dict[str, float]]:
    """``{"recall@20": x}`` -> ``{"recall": {"20": x}}``."""
    out: dict[str, dict[str, float]] = {}
    for key, val in metrics.items():
        name, _, n = key.partition("@")
        out.setdefault(name, {})[n] = val
    return out


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output.dir) / cfg.short_hash()


def _dataset_name(cfg: RunConfig) -> str:
    if cfg.data.source == "synthetic":
        return f"synthetic(seed={cfg.data.synth_seed})"
    return Path(cfg.data.interactions).stem


# ---------------------------------------------------------------- train

def train_run(cfg: RunConfig, out: Path) -> dict:
    data = prepare_data(cfg)
    runs, summary = run_seeds(cfg, data)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.toml", cfg.dumps())
    per_seed = []
    for r in runs:
        row = {"seed": r.seed}
        if r.error:
            row["error"] = r.error
        else:
            sdir = out / f"seed{r.seed}"
            sdir.mkdir(exist_ok=True)
            save_checkpoint(r.fit.best, sdir / "checkpoint.ancr")
            _write(sdir / "train_log.jsonl", "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in r.fit.log))
            row.update(best_epoch=r.fit.best_epoch, stopped_epoch=r.fit.stopped_epoch,
                       val=metric_table(r.val), test=metric_table(r.test))
        per_seed.append(row)
    report = {
        "dataset": _dataset_name(cfg),
        "data": data.meta,
        "config_hash": cfg.hash(),
        "seeds": [r.seed for r in runs],
        "per_seed": per_seed,
        "val": summary["val"],
        "test": summary["test"],
        "failures": sum(1 for r in runs if r.error),
    }
    _write(out / "metrics.json", _dump(report))
    return report


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = run_dir(cfg)
    report = train_run(cfg, out)
    print(_dump({"out": str(out), "test": report["test"], "val": report["val"]}), end="")
    return EXIT_DATA if report["failures"] == len(report["seeds"]) else EXIT_OK


# ---------------------------------------------------------------- evaluate / analyze

def _restore(args):
    cfg = load_config(args.config, args.set)
    ck = load_checkpoint(args.checkpoint)
    if ck.config_hash != cfg.hash():
        log.warning("config hash mismatch: checkpoint %s, config %s", ck.config_hash[:12], cfg.short_hash())
    data = prepare_data(cfg)
    state = ck.restore(data.ctx, cfg)
    return cfg, ck, data, state


def cmd_evaluate(args) -> int:
    cfg, ck, data, state = _restore(args)
    try:
        cutoffs = [int(c) for c in args.cutoffs.split(",")] if args.cutoffs else cfg.eval.cutoffs
    except ValueError as exc:
        raise UsageError(f"bad --cutoffs {args.cutoffs!r}") from exc
    res = full_rank(snapshot(state, data.ctx), data.split, cutoffs, which=args.split)
    report = {
        "dataset": _dataset_name(cfg),
        "config_hash": cfg.hash(),
        "checkpoint_config_hash": ck.config_hash,
        "seed": ck.seed,
        "epoch": ck.epoch,
        "split": args.split,
        "cutoffs": sorted(set(cutoffs)),
        "users_evaluated": int(len(res.users)),
        "users_skipped": res.skipped,
        "metrics": metric_table(res.metrics),
    }
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}.json")
    _write(out, _dump(report))
    print(_dump(report), end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    wanted = [a.strip() for a in args.analyses.split(",") if a.strip()]
    unknown = [a for a in wanted if a not in ANALYSES]
    if unknown or not wanted:
        raise UsageError(f"unknown analysis {unknown or wanted}; choose from {', '.join(ANALYSES)}")
    cfg, ck, data, state = _restore(args)
    snap = snapshot(state, data.ctx)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "analysis"
    written = []
    if "overlap" in wanted:
        ov = snapshot_overlap(snap, args.K or cfg.eval.overlap_k)
        written.append(_write(out / "overlap.json", ov.to_json(config_hash=cfg.hash())))
        written.append(_write(out / "overlap.csv", ov.to_csv()))
    if "neighbors" in wanted:
        if args.target is None:
            raise UsageError("--target is required for the neighbors analysis")
        k = args.k or cfg.eval.neighbor_k
        try:
            records = neighbor_report(snap, args.target, k)
        except IndexError as exc:
            raise UsageError(str(exc)) from exc
        body = {"config_hash": cfg.hash(), "target": args.target, "k": k,
                "two_hop_definition": "number of users who interacted with both items (train split)",
                "neighbors": records}
        written.append(_write(out / f"neighbors_{args.target}.json", _dump(body)))
    if "export" in wanted:
        spaces = args.spaces.split(",") if args.spaces else [
            s for s in snap.space_names() if not s.startswith("raw-")]
        try:
            written += export_embeddings(snap, spaces, out / "embeddings")
        except KeyError as exc:
            raise UsageError(str(exc)) from exc
    print(_dump({"written": [str(p) for p in written]}), end="")
    return EXIT_OK


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = cfg.synth
    spec.validate()
    seed = cfg.data.synth_seed if args.seed is None else args.seed
    out = Path(args.out)
    paths = write_synthetic(spec, seed, out)
    dataset_cfg = {
        "data": {"source": "files", "interactions": paths["interactions"].name,
                 "features": {m: paths[m].name for m in ("mm", "t", "v")}},
        "synth": cfg.to_dict()["synth"],
    }
    _write(out / "dataset.toml", tomli_w.dumps(dataset_cfg))
    print(_dump({"out": str(out), "seed": seed, "files": sorted(p.name for p in paths.values())}), end="")
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def parse_grid(items) -> dict[str, list]:
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} is not key=v1,v2,...")
        key, values = item.split("=", 1)
        grid[key.strip()] = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
        if not grid[key.strip()]:
            raise UsageError(f"grid entry {item!r} has no values")
    if not grid:
        raise UsageError("sweep needs at least one --grid entry")
    return grid


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set)
    grid = parse_grid(args.grid)
    keys = list(grid)
    out = run_dir(base) / "sweep"
    rows = []
    select = base.eval.select_metric
    for k, values in enumerate(itertools.product(*(grid[key] for key in keys))):
        cell = dict(zip(keys, values))
        row = {"cell": k, **{key: cell[key] for key in keys}}
        try:
            raw = apply_overrides(base.to_dict(), [f"{key}={json.dumps(v)}" for key, v in cell.items()])
            cfg = from_dict(raw)
            report = train_run(cfg, out / f"cell{k}")
            row["config_hash"] = cfg.hash()
            for name, stats in report["val"].items():
                row[f"val_{name}"] = stats["mean"]
                row[f"val_{name}_std"] = stats["std"]
        except (ConfigError, DataError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    scored = [r for r in rows if f"val_{select}" in r]
    best = max(scored, key=lambda r: r[f"val_{select}"])["cell"] if scored else None
    for r in rows:
        r["best"] = r["cell"] == best
    _write(out / "sweep.json", _dump({"grid": grid, "select_metric": select, "best_cell": best, "cells": rows}))
    fields = sorted({f for r in rows for f in r}, key=lambda f: (f not in ["cell", *keys, "best"], f))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(out / "sweep.csv", buf.getvalue())
    print(_dump({"out": str(out), "best_cell": best, "cells": len(rows)}), end="")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anchorrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("-c", "--config", required=config_required, help="TOML run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("train", help="ingest, fit every seed, write checkpoints and metrics")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="full-ranking metrics for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cutoffs", help="comma-separated N values, e.g. 10,20,50")
    sp.add_argument("--split", choices=("val", "test"), default="test")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="overlap matrix, neighbour report, embedding export")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--analyses", required=True, help=f"comma-separated subset of {','.join(ANALYSES)}")
    sp.add_argument("--target", type=int)
    sp.add_argument("--k", type=int, help="neighbours per target")
    sp.add_argument("--K", type=int, help="overlap neighbourhood size")
    sp.add_argument("--spaces", help="comma-separated spaces to export")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("synth", help="write a planted-structure synthetic dataset")
    common(sp, config_required=False)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("sweep", help="grid of full fits, validation metrics per cell")
    common(sp)
    sp.add_argument("--grid", action="append", metavar="SECTION.KEY=V1,V2,...")
    sp.set_defaults(func=cmd_sweep)
    return p


def _fail(code: int, exc: Exception) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required: train, evaluate, analyze, synth, sweep")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, exc)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, exc)


if __name__ == "__main__":
    sys.exit(main())
