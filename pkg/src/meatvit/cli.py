"""
Command-line interface.

Exit codes::

    0  success
    2  configuration or file-format error (also: output exists without --force)
    3  training diverged (non-finite loss); partial results are kept
    4  incomplete run: a required artifact (checkpoint, mask file, metrics) is missing

Run layout produced by ``run-plan`` (and by ``train-base`` / ``train-task``)::

    <out>/config.yaml
    <out>/metrics.csv, <out>/summary.txt
    <out>/seed_<s>/model.meatvit
    <out>/seed_<s>/masks/task_<id>.meatmsk

Set ``MEAT_LOG`` to ``error``, ``info`` or ``debug`` to control log output.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import tempfile
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import maskviz
from .config import load_plan
from .continual import (
    METHODS,
    ExperimentPlan,
    _atomic_write,
    accuracy_from_logits,
    init_model,
    predict_logits,
    prepare_data,
    run_experiment,
    train_base,
    train_task,
)
from .errors import ConfigError, DivergenceError, FormatError, UnknownTaskError
from .meat import TaskMaskSet, load_masks, overhead_report, serialize_masks
from .vit import load_model, save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_INCOMPLETE = 4

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("meatvit")


class OutputExists(Exception):
    pass


class Incomplete(Exception):
    def __init__(self, missing: Sequence[str]):
        super().__init__("incomplete run; missing: " + ", ".join(missing))
        self.missing = list(missing)


# ---------------------------------------------------------------- paths


def seed_dir(run_dir: str, seed: int) -> str:
    return os.path.join(run_dir, f"seed_{seed}")


def model_path(run_dir: str, seed: int) -> str:
    return os.path.join(seed_dir(run_dir, seed), "model.meatvit")


def mask_path(run_dir: str, seed: int, task_id: int) -> str:
    return os.path.join(seed_dir(run_dir, seed), "masks", f"task_{task_id}.meatmsk")


def _stage(out: str, force: bool) -> str:
    if os.path.exists(out) and not force:
        raise OutputExists(f"output directory {out} exists; pass --force to replace it")
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    return tempfile.mkdtemp(prefix=f".{os.path.basename(os.path.abspath(out))}.", dir=parent)


def _publish(tmp: str, out: str) -> None:
    """Move a finished staging directory into place, replacing ``out`` if present."""
    old = None
    if os.path.exists(out):
        old = tempfile.mkdtemp(prefix=".old.", dir=os.path.dirname(os.path.abspath(out)))
        os.rmdir(old)
        os.rename(out, old)
    os.rename(tmp, out)
    if old is not None:
        shutil.rmtree(old)


def _copy_config(config: str, dest_dir: str) -> None:
    with open(config, "rb") as fh:
        _atomic_write(os.path.join(dest_dir, "config.yaml"), fh.read())


def _seeds(plan: ExperimentPlan, seed: Optional[int]) -> List[int]:
    return [seed] if seed is not None else list(plan.seeds)


def _load_store(run_dir: str, seed: int, plan: ExperimentPlan) -> Dict[int, TaskMaskSet]:
    store = {}
    for t in plan.tasks:
        path = mask_path(run_dir, seed, t.task_id)
        if os.path.exists(path):
            store[t.task_id] = load_masks(path, plan.model)
    return store


# ---------------------------------------------------------------- commands


def cmd_train_base(args) -> int:
    plan = load_plan(args.config)
    tmp = _stage(args.out, args.force)
    try:
        _copy_config(args.config, tmp)
        data = prepare_data(plan)
        for seed in _seeds(plan, args.seed):
            model = init_model(plan, seed)
            checksum, _ = train_base(model, plan.base, data[0][0], seed, plan.optimizer)
            acc = accuracy_from_logits(predict_logits(model, 0, {}, data[0][1]), data[0][1].labels)
            os.makedirs(os.path.join(seed_dir(tmp, seed), "masks"))
            save_model(model, model_path(tmp, seed))
            print(f"seed {seed} base_accuracy {acc:.4f} checksum {checksum}")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _publish(tmp, args.out)
    return EXIT_OK


def cmd_train_task(args) -> int:
    plan = load_plan(args.config)
    spec = plan.task(args.task)
    if spec.task_id == 0:
        raise ConfigError("task 0 is the base task; use train-base", key="--task")
    data = prepare_data(plan)
    for seed in _seeds(plan, args.seed):
        ckpt = model_path(args.out, seed)
        target = mask_path(args.out, seed, spec.task_id)
        if not os.path.exists(ckpt):
            raise Incomplete([ckpt])
        if os.path.exists(target) and not args.force:
            raise OutputExists(f"{target} exists; pass --force to replace it")
        model = load_model(ckpt)
        mask_set, _ = train_task(model, spec, data[spec.task_id][0], plan.meat, seed, plan.optimizer)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        _atomic_write(target, serialize_masks(mask_set))
        acc = accuracy_from_logits(
            predict_logits(model, spec.task_id, {spec.task_id: mask_set}, data[spec.task_id][1]),
            data[spec.task_id][1].labels)
        print(f"seed {seed} task {spec.task_id} accuracy {acc:.4f} masks {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    plan = load_plan(args.config)
    task_ids = [args.task] if args.task is not None else [0] + [t.task_id for t in plan.tasks]
    for t in task_ids:
        plan.task(t)
    data = prepare_data(plan)
    missing = []
    for seed in _seeds(plan, args.seed):
        ckpt = model_path(args.out, seed)
        if not os.path.exists(ckpt):
            missing.append(ckpt)
            continue
        model = load_model(ckpt)
        store = _load_store(args.out, seed, plan)
        for t in task_ids:
            if t != 0 and t not in store:
                missing.append(mask_path(args.out, seed, t))
                continue
            test = data[t][1]
            acc = accuracy_from_logits(predict_logits(model, t, store, test), test.labels)
            print(f"seed {seed} task {t} accuracy {acc:.4f}")
    if missing:
        raise Incomplete(missing)
    return EXIT_OK


def cmd_run_plan(args) -> int:
    plan = load_plan(args.config)
    if args.seed is not None:
        plan.seeds = [args.seed]
    tmp = _stage(args.out, args.force)
    try:
        _copy_config(args.config, tmp)
        metrics = run_experiment(plan, tmp)
    except DivergenceError:
        _publish(tmp, args.out)   # keep what was flushed before the abort
        raise
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _publish(tmp, args.out)
    sys.stdout.write(metrics.to_text())
    return EXIT_OK


def cmd_inspect_masks(args) -> int:
    plan = load_plan(args.config)
    mask_set = load_masks(args.mask_file, plan.model)
    grid = maskviz.token_grid(mask_set, args.layer)
    table = maskviz.activation_table(mask_set)
    if args.format == "text":
        sys.stdout.write(f"task {mask_set.task_id} layer {args.layer} token mask\n")
        sys.stdout.write(maskviz.grid_to_text(grid))
        sys.stdout.write(table)
        return EXIT_OK
    image = maskviz.grid_to_pgm(grid)
    if args.out:
        _atomic_write(args.out, image)
        sys.stdout.write(table)
    else:
        sys.stdout.buffer.write(image)
        sys.stdout.flush()
        sys.stderr.write(table)
    return EXIT_OK


def _read_metrics(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def expected_artifacts(plan: ExperimentPlan, run_dir: str) -> List[str]:
    paths = [os.path.join(run_dir, "metrics.csv"), os.path.join(run_dir, "summary.txt")]
    for seed in plan.seeds:
        paths.append(model_path(run_dir, seed))
        if "meat" in plan.methods:
            paths += [mask_path(run_dir, seed, t) for t in plan.orders[0]]
    return paths


def check_run(run_dir: str):
    """Load a run's plan and metrics rows, raising :class:`Incomplete` if anything is missing."""
    cfg = os.path.join(run_dir, "config.yaml")
    if not os.path.isdir(run_dir) or not os.path.exists(cfg):
        raise Incomplete([cfg])
    plan = load_plan(cfg)
    missing = [p for p in expected_artifacts(plan, run_dir) if not os.path.exists(p)]
    if missing:
        raise Incomplete(missing)
    rows = _read_metrics(os.path.join(run_dir, "metrics.csv"))
    n_tasks = len(plan.tasks)
    for method in plan.methods:
        per_seed = n_tasks * (len(plan.orders) if method == "meat" else 1)
        for seed in plan.seeds:
            got = sum(1 for r in rows if r["method"] == method and int(r["seed"]) == seed)
            if got < per_seed:
                missing.append(f"metrics.csv rows for method {method} seed {seed} ({got}/{per_seed})")
    if missing:
        raise Incomplete(missing)
    return plan, rows


def format_report(plan: ExperimentPlan, rows: List[dict], run_dir: str) -> str:
    order = plan.orders[0]
    classes = [plan.task(t).num_classes for t in order]
    report = overhead_report(plan.model, len(order), classes)
    size = {"individual": report.individual_multiplier, "classifier": 1.0,
            "meat": report.meat_multiplier}
    names = {"individual": "Individual", "classifier": "Classifier", "meat": "MEAT"}
    head = f"{'method':<11}" + "".join(f"{'task ' + str(t):>14}" for t in order)
    head += f"{'mean':>9}{'forgetting':>12}{'model size':>12}"
    lines = [head, "-" * len(head)]
    for method in ("individual", "classifier", "meat"):
        sel = [r for r in rows if r["method"] == method]
        if not sel:
            continue
        cells = []
        for t in order:
            accs = [100 * float(r["accuracy"]) for r in sel if int(r["task_id"]) == t]
            cells.append(f"{np.mean(accs):6.2f}±{np.std(accs):5.2f}")
        mean = 100 * np.mean([float(r["accuracy"]) for r in sel])
        forget = max(abs(100 * float(r["forgetting"])) for r in sel)
        line = f"{names[method]:<11}" + "".join(f"{c:>14}" for c in cells)
        line += f"{mean:9.2f}{'(' + format(forget, '.2f') + ')':>12}{format(size[method], '.2f') + 'x':>12}"
        lines.append(line)
    base = [float(r["base_accuracy"]) for r in rows if r["method"] == "meat"]
    lines.append("")
    lines.append("accuracy in %, mean±std over seeds and orders; forgetting = max |base-task "
                 "accuracy change| in points; model size relative to backbone + heads")
    if base:
        lines.append(f"base task accuracy after new tasks: {100 * np.mean(base):.2f}")
    lines.append(f"mask payload bytes per task: {report.mask_payload_bytes_per_task}")
    if "meat" in plan.methods:
        measured = [os.path.getsize(mask_path(run_dir, plan.seeds[0], t)) for t in order]
        ok = measured == report.mask_file_bytes
        lines.append(f"mask file bytes measured {measured} predicted {report.mask_file_bytes} "
                     f"{'match' if ok else 'MISMATCH'}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    plan, rows = check_run(args.run_dir)
    sys.stdout.write(format_report(plan, rows, args.run_dir))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meatvit", description=__doc__.split("\n\n")[0].strip(),
                                     epilog="exit codes: 0 ok, 2 config/format, 3 divergence, "
                                            "4 incomplete run")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="run directory"):
        p.add_argument("--config", required=True, help="experiment plan (YAML)")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, default=None, help="override the plan's run seeds")

    p = sub.add_parser("train-base", help="train and freeze the backbone on task 0")
    common(p)
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-task", help="learn masks and a head for one new task")
    common(p)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--force", action="store_true", help="replace an existing mask file")
    p.set_defaults(func=cmd_train_task)

    p = sub.add_parser("eval", help="test accuracy of stored tasks")
    common(p)
    p.add_argument("--task", type=int, default=None, help="default: every task in the plan")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-plan", help="run the full protocol of a plan")
    common(p)
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_run_plan)

    p = sub.add_parser("inspect-masks", help="render a layer's token mask and activation ratios")
    p.add_argument("mask_file")
    p.add_argument("--config", required=True, help="plan whose model config must match the file")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--format", choices=("text", "pgm"), default="text")
    p.add_argument("--out", default=None, help="PGM output file (default: stdout)")
    p.set_defaults(func=cmd_inspect_masks)

    p = sub.add_parser("report", help="accuracy, forgetting and model-size table of a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging() -> None:
    name = os.environ.get("MEAT_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"MEAT_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}", key="MEAT_LOG")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def _config_message(exc: ConfigError) -> str:
    where = []
    if exc.key:
        where.append(f"key {exc.key}")
    if exc.line:
        where.append(f"line {exc.line}")
    return f"config error: {exc}" + (f" [{', '.join(where)}]" if where else "")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        return args.func(args)
    except ConfigError as exc:
        print(_config_message(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OutputExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Incomplete as exc:
        print("incomplete run; missing artifacts:", file=sys.stderr)
        for m in exc.missing:
            print(f"  {m}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except UnknownTaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE


if __name__ == "__main__":
    sys.exit(main())
