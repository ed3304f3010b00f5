"""Command-line entry point: ``activeloop {gen,run,select,eval,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import filelock
import numpy as np

from . import acquisition, formats
from .alloop import run_experiment, split_by_sequence
from .config import ConfigError, ExperimentConfig, from_dict, load_config, schema_defaults
from .evaluation import evaluate
from .formats import DataError
from .report import make_report
from .surrogate import ModelState

EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("activeloop")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        if cfg.scene is not None:
            cfg.scene = replace(cfg.scene, seed=args.seed)
    if getattr(args, "strategy", None):
        bad = [s for s in args.strategy if s not in acquisition.STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategy {bad[0]!r}; expected one of "
                              f"{', '.join(acquisition.STRATEGIES)}")
        cfg.strategies = list(args.strategy)
    return cfg


def cmd_gen(args) -> int:
    cfg = _config(args)
    if cfg.scene is None:
        raise ConfigError("gen needs a 'dataset: synthetic:' section")
    out = Path(args.out or cfg.output)
    frames = cfg.load_frames()
    try:
        formats.write_dataset(frames, out, cfg.scene.to_dict(), cfg.scene.class_names, args.payload)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}", out) from exc
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory: {exc}", out) from exc
    lock = filelock.FileLock(str(out / ".activeloop.lock"))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout as exc:
        raise DataError("run directory is locked by another process", out) from exc
    try:
        (out / "config.json").write_text(json.dumps(_echo(cfg), indent=2, sort_keys=True) + "\n")
        curves = run_experiment(cfg, out, resume=args.resume, max_rounds=args.max_rounds)
    finally:
        lock.release()
    for strategy, rows in curves.items():
        last = rows[-1]
        print(f"{strategy}: {len(rows)} rounds, final labeled={last.labeled_count} mAP={last.mAP:.4f}")
    return 0


def _echo(cfg: ExperimentConfig) -> dict:
    return {
        "scene": cfg.scene.to_dict() if cfg.scene else None,
        "dataset_path": cfg.dataset_path,
        "strategies": cfg.strategies,
        "schedule": asdict(cfg.schedule),
        "train": asdict(cfg.train),
        "match": asdict(cfg.match),
        "acquisition": cfg.acquisition,
        "split": list(cfg.split),
        "seed": cfg.seed,
        "strategy_seeds": cfg.strategy_seeds,
    }


def cmd_select(args) -> int:
    cfg = load_config(args.config) if args.config else from_dict({"dataset": {"records": args.records}})
    records = formats.read_records(args.records)
    labeled_ids = set()
    if args.labeled:
        labeled_ids = {m["frame_id"] for m in formats.read_manifest(args.labeled)}
        unknown = labeled_ids - {r.frame_id for r in records}
        if unknown:
            log.warning("%d labeled ids have no record", len(unknown))
    pool = [r for r in records if r.frame_id not in labeled_ids]
    labeled = [r for r in records if r.frame_id in labeled_ids]
    if not pool:
        raise DataError("no unlabeled records to select from", args.records)
    num_classes = acquisition._infer_num_classes(records) if any(r.detections for r in records) else 1
    hist = np.zeros(num_classes)
    for r in labeled:
        hist += acquisition.predicted_histogram(r.detections, num_classes)
    options = cfg.acquisition_options()
    try:
        result = acquisition.select(
            args.strategy, pool, args.budget, seed=args.seed if args.seed is not None else cfg.seed,
            labeled_embeddings=[r.frame_embedding for r in labeled], labeled_hist=hist,
            round_index=args.round, options=options)
    except ValueError as exc:
        raise DataError(str(exc), args.records) from exc
    out = Path(args.out)
    formats.write_manifest(out, formats.manifest_rows(result))
    print(f"selected {len(result.selected)} of {len(pool)} frames -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    doc = formats.load_checkpoint(args.checkpoint)
    model = ModelState.from_dict(doc["model"])
    frames = cfg.load_frames()
    _train, _val, test = split_by_sequence(frames, cfg.seed, cfg.split)
    report = evaluate(model, test, cfg.match)
    payload = {"mAP": report.mAP, "ap": report.ap, "tp": report.tp, "fp": report.fp,
               "fn": report.fn, "num_gt": report.num_gt}
    text = json.dumps(payload, indent=2, allow_nan=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_report(args) -> int:
    if not args.metrics and not args.reference:
        raise ConfigError("report needs at least one metrics CSV or a reference CSV")
    table = make_report(args.metrics, args.out, args.reference)
    for w in table.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(table.to_markdown(), end="")
    return 0


def _defaults_epilog() -> str:
    d = schema_defaults()
    lines = ["config defaults (schema version 1):"]

    def walk(prefix, obj):
        for k, v in obj.items():
            if isinstance(v, dict) and v:
                walk(f"{prefix}{k}.", v)
            else:
                lines.append(f"  {prefix}{k} = {json.dumps(v)}")

    walk("", d)
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activeloop",
        description="Active learning for 3D object detection on synthetic or ingested data.",
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset directory")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset directory (default: config 'output')")
    p.add_argument("--payload", choices=["jsonl", "binary"], default="jsonl")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run the active-learning loop for each strategy")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", action="append", help="override strategies (repeatable)")
    p.add_argument("--out", help="run directory (default: config 'output')")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpointed round")
    p.add_argument("--max-rounds", type=int, default=None,
                   help="stop each strategy after this many rounds in this invocation")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("select", help="select frames from an inference-record JSONL file")
    p.add_argument("--records", required=True)
    p.add_argument("--strategy", required=True, choices=acquisition.STRATEGIES)
    p.add_argument("--budget", required=True, type=int)
    p.add_argument("--labeled", help="manifest CSV of already-labeled frame ids")
    p.add_argument("--config", help="YAML config for acquisition options")
    p.add_argument("--seed", type=int)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest CSV to write")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the dataset's test split")
    p.add_argument("--config", help="YAML experiment config (dataset + evaluation)")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare learning curves, write table + SVG")
    p.add_argument("metrics", nargs="*", help="metrics CSVs from 'run'")
    p.add_argument("--reference", help="CSV of published numbers (series,round,percent,mAP)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
