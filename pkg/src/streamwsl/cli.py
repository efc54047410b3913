"""Command-line entry point: ``streamwsl {generate,sweep,shift,eval,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import yaml

from .detector import load_model, save_model
from .errors import ConfigError
from .experiments import (
    ExperimentConfig,
    aggregate,
    any_aborted,
    apply_overrides,
    emit_plots_data,
    read_rows,
    run_budget_sweep,
    run_shift_study,
    write_aggregate,
)
from .frames import read_frames, write_frames
from .harness import generate_world
from .pipeline import LabeledSet, evaluate, supervised_phase

log = logging.getLogger("streamwsl")


def _load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = yaml.safe_load(fh) or {}
    overrides = list(args.set or [])
    overrides.append(f"seed={args.seed}")
    overrides.append(f"out_dir={args.out}")
    if getattr(args, "trials", None) is not None:
        overrides.append(f"n_trials={args.trials}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    wcfg = replace(cfg.world, seed=args.seed)
    world = generate_world(wcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".jsonl.gz" if args.gzip else ".jsonl"
    meta = {"world": wcfg.to_dict()}
    C = wcfg.num_classes
    write_frames(out / f"source{ext}", world.source.frames, C, "source", True, meta)
    write_frames(out / f"stream{ext}", world.target_frames, C, "target_stream", False, meta)
    write_frames(out / f"stream_answers{ext}", world.target_frames, C, "target_stream_answers", True, meta)
    write_frames(out / f"test{ext}", world.target_test.frames, C, "target_test", True, meta)
    with open(out / "world.yaml", "w") as fh:
        yaml.safe_dump(json.loads(json.dumps(wcfg.to_dict())), fh, sort_keys=False)
    if args.seed_model:
        model = supervised_phase(world.source, C, cfg.train)
        save_model(model, out / "seed_model.json")
    log.info("wrote world to %s", out)
    return 0


def _finish(results, rows, out: Path) -> int:
    emit_plots_data([r for r in results], out / "plots")
    for r in sorted(results, key=lambda r: (r.study, r.policy, r.budget)):
        print(f"{r.study:8s} {r.policy:16s} k={r.budget:<4d} mAP {r.table_cell}")
    if any_aborted(rows):
        log.error("at least one cell aborted; see the trials CSV")
        return 1
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    results, rows = run_budget_sweep(cfg, args.out)
    return _finish(results, rows, Path(args.out))


def cmd_shift(args) -> int:
    cfg = _load_config(args)
    results, rows = run_shift_study(cfg, args.out)
    return _finish(results, rows, Path(args.out))


def cmd_eval(args) -> int:
    model = load_model(args.model)
    _, frames = read_frames(args.data)
    if not any(f.hidden_gt for f in frames):
        raise ConfigError(f"{args.data} carries no ground truth to evaluate against")
    result = evaluate(model, LabeledSet.from_frames(frames))
    payload = {"mean_ap": result.mean_ap, "per_class": {str(c): ap for c, ap in sorted(result.per_class.items())}}
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.trials:
        rows.extend(read_rows(path))
    if not rows:
        raise ConfigError("no trial rows found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = aggregate(rows)
    write_aggregate(out / "summary.csv", results)
    for p in emit_plots_data(results, out):
        print(p)
    return 1 if any_aborted(rows) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamwsl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_args(p, trials=True):
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, required=True, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. world.run_length=10 (repeatable)")
        if trials:
            p.add_argument("--trials", type=int)
            p.add_argument("--workers", type=int)

    p = sub.add_parser("generate", help="write a synthetic world to JSON Lines files")
    experiment_args(p, trials=False)
    p.add_argument("--gzip", action="store_true")
    p.add_argument("--seed-model", action="store_true", help="also train and save the seed model")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep", help="AL budget sweep")
    experiment_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("shift", help="SSL shift study")
    experiment_args(p)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("eval", help="evaluate a saved model on a labeled dataset file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the result JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="recompute aggregates and plot data from trial CSVs")
    p.add_argument("trials", nargs="+", help="*_trials.csv files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
