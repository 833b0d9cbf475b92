"""Command-line entry point: ``shrinkpipe <command> [options]``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .adapters import write_metrics_csv, train_task_adapter
from .checkpoint import CheckpointError, load_checkpoint, load_config
from .compression import CompressionReport, StageRecord, build_report
from .distillation import NumericalError
from .model import ConfigError
from .pipeline import (ABLATIONS, PRESETS, PipelineConfig, adapter_hyperparams, count_params_report,
                       load_preset, load_task, prepare_data, run_ablation, run_pipeline,
                       stage_accuracy, stage_plan)
from .tokenizer import CorpusError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
THREADS_ENV = "SHRINKPIPE_THREADS"

STAGE_COMMANDS = {
    "teacher": "teacher-finetune",
    "distill": "layer-KD",
    "prune": "ffn-prune",
    "truncate": "hidden-reduce",
    "trim-vocab": "vocab-trim",
}

log = logging.getLogger("shrinkpipe")


def _config(args) -> PipelineConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ConfigError("give either --config or --preset, not both")
    if getattr(args, "config", None):
        cfg = PipelineConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = load_preset(args.preset)
    else:
        raise ConfigError("a --config or --preset is required")
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    return Path(args.out)


def cmd_stage(args) -> int:
    cfg = _config(args)
    report = run_pipeline(cfg, _out(args), only=STAGE_COMMANDS[args.command])
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        print(count_params_report(cfg).to_table(), end="")
        return EXIT_OK
    report = run_pipeline(cfg, _out(args), resume_from=args.stage)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    result = run_ablation(args.name, cfg, _out(args))
    print(result.to_csv(), end="")
    if result.note:
        print(result.note)
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.checkpoint:
        config = load_config(args.checkpoint)
        report = build_report([StageRecord("checkpoint", config, label=str(args.checkpoint))])
    else:
        report = count_params_report(_config(args))
    print(report.to_csv() if args.csv else report.to_table(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    path = _out(args) / "reports" / "compression.json"
    try:
        stages = [StageRecord.from_dict(d) for d in json.loads(path.read_text())]
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid JSON ({exc})") from exc
    report = CompressionReport(stages)
    print(report.to_csv() if args.csv else report.to_table(), end="")
    return EXIT_OK


def _load_for_eval(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    cfg = _config(args)
    model, tok = load_checkpoint(args.checkpoint)
    if tok is None:
        raise CheckpointError(f"{args.checkpoint}: checkpoint has no tokenizer")
    return cfg, model, tok


def cmd_eval(args) -> int:
    cfg, model, tok = _load_for_eval(args)
    data = prepare_data(cfg, tok)
    acc = stage_accuracy(model, data.validation, stage_plan({}, cfg.seed))
    print(json.dumps({"checkpoint": str(args.checkpoint), "val_masked_acc": acc}, sort_keys=True))
    return EXIT_OK


def cmd_adapter(args) -> int:
    cfg, model, tok = _load_for_eval(args)
    needs_corpus = "train" not in cfg.tasks.get(args.task, {})
    data = prepare_data(cfg, tok) if needs_corpus else None
    task = load_task(cfg, args.task, tok, data)
    if task is None:
        raise ConfigError(f"config has no {args.task!r} task")
    spec = cfg.tasks[args.task]
    r = args.r if args.r is not None else int(spec.get("r", 16))
    seeds = args.seeds or [cfg.seed]
    rows = []
    for seed in seeds:
        result = train_task_adapter(model, task, r, adapter_hyperparams(args.task, spec, seed))
        rows.append({"task": args.task, "r": r, "seed": seed,
                     "adapter_params": result.adapter.num_params(),
                     **{k: result.metrics[k] for k in ("dev", "test", "best_epoch")}})
    if len(rows) > 1:
        rows.append({**rows[0], "seed": "mean",
                     **{k: float(np.mean([row[k] for row in rows])) for k in ("dev", "test", "best_epoch")}})
    out = _out(args) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / f"adapter_{args.task}_r{r}.csv")
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shrinkpipe",
                                     description="Compress a transformer encoder stage by stage.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="pipeline config (JSON)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="built-in config")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")

    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run only the {stage} stage on existing checkpoints")
        common(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("pipeline", help="run all configured stages")
    common(p)
    p.add_argument("--stage", help="resume from this stage, reusing earlier checkpoints")
    p.add_argument("--dry-run", action="store_true", help="print planned stages and param counts only")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", help="run one ablation")
    p.add_argument("name", choices=ABLATIONS)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count-params", help="param counts from metadata only")
    common(p, out=False)
    p.add_argument("--checkpoint", type=Path, help="count a saved checkpoint instead")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("report", help="print the compression report of a finished run")
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="validation masked accuracy of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapter", help="train a task adapter on a frozen checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--task", choices=["classification", "tagging"], default="classification")
    p.add_argument("--r", type=int, help="adapter reduction factor")
    p.add_argument("--seeds", type=int, nargs="+", help="train once per seed and add a mean row")
    p.set_defaults(func=cmd_adapter)
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NumericalError as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except CorpusError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (CheckpointError, OSError) as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except ValueError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    print(f"shrinkpipe: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
