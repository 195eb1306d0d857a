"""Command-line entry point: gen-data, train, eval, report, ablate.

Exit codes: 0 success, 2 usage error, 3 data/config mismatch, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import os
import shutil
import sys
import warnings
from pathlib import Path

from . import checkpoint
from .autodiff import NumericalError
from .competition import ContestLedger
from .config import RL_METHODS, STRATEGIES, ConfigError, TrainConfig, load_config
from .evaluation import (
    DomainLeakageError,
    EvaluationError,
    LongTailSpec,
    evaluate,
    expert_policy,
    model_policy,
    longtail_from_dump,
    write_report,
)
from .model import CoIRLModel, ModelConfig
from .trainer import TrainingError, train
from .world.dataset import DatasetError, build_dataset, load_dataset, manifest_path_for, parse_domain_mix

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERICAL = 0, 2, 3, 4
ENV_OUT_ROOT = "COIRL_OUT_ROOT"
ENV_JOBS = "COIRL_JOBS"


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _out_path(p):
    p = Path(p)
    root = os.environ.get(ENV_OUT_ROOT)
    return Path(root) / p if root and not p.is_absolute() else p


def _claim(path, force, is_dir=False):
    """Refuse to overwrite an existing output unless ``force`` is set."""
    path = Path(path)
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists (use --force to overwrite)")
        if is_dir:
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- gen-data ---------------------------------------------------------------------------

def cmd_gen_data(args):
    try:
        mix = parse_domain_mix(args.domain_mix)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    out = _out_path(args.out)
    if manifest_path_for(out).exists() and not args.force:
        raise UsageError(f"{manifest_path_for(out)} already exists (use --force to overwrite)")
    _claim(out, args.force)
    manifest = build_dataset(args.scenes, args.seed, mix, out)
    print(f"wrote {manifest['records']} records from {manifest['num_scenes']} scenes to {out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------------

def _train_config(args):
    base = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.strategy:
        if args.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {args.strategy!r}; valid: {', '.join(STRATEGIES)}")
        overrides["strategy"] = args.strategy
    if args.rl_method:
        if args.rl_method not in RL_METHODS:
            raise UsageError(f"unknown rl-method {args.rl_method!r}; valid: {', '.join(RL_METHODS)}")
        overrides["rl_method"] = args.rl_method
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iters is not None:
        overrides["total_iters"] = args.iters
    return base.with_overrides(**overrides)


def cmd_train(args):
    cfg = _train_config(args)
    data_path = Path(args.data)
    if not data_path.exists():
        raise UsageError(f"dataset {data_path} does not exist")
    dataset = load_dataset(data_path)
    out = _out_path(args.out)
    if args.resume:
        if not (out / "checkpoint.json").exists():
            raise UsageError(f"nothing to resume in {out}")
    else:
        _claim(out, args.force, is_dir=True)
    result = train(cfg, dataset, out, resume=args.resume, stop_at=args.stop_at)
    msg = f"trained {cfg.strategy}/{cfg.rl_method} seed {cfg.seed} to iteration {result['iterations']}"
    if result["finished"]:
        msg += f"; inference actor {result['inference_actor']}"
    print(msg)
    return EXIT_OK


# -- eval -------------------------------------------------------------------------------

def load_model(path):
    """Rebuild the model stored in a training checkpoint; returns (model, meta)."""
    arrays, doc = checkpoint.load(path)
    meta = doc["meta"]
    if "model_config" not in meta:
        raise MismatchError(f"{path} is not a training checkpoint")
    model = CoIRLModel(ModelConfig(**meta["model_config"]))
    try:
        model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    except ValueError as exc:
        raise MismatchError(f"{path}: {exc}") from None
    return model, meta


def _check_compatible(meta, dataset):
    if meta.get("world_hash") != dataset.manifest.get("world_hash"):
        raise MismatchError(
            f"checkpoint world config {meta.get('world_hash')} differs from dataset world config "
            f"{dataset.manifest.get('world_hash')}; observations and actions would not line up")
    width = len(dataset.records[0].obs) if dataset.records else None
    if width is not None and width != meta["model_config"]["obs_dim"]:
        raise MismatchError(f"dataset observation width {width} != model input {meta['model_config']['obs_dim']}")


def cmd_eval(args):
    dataset = load_dataset(args.set)
    if args.actor == "expert":
        policy = expert_policy
        label = "expert"
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --actor expert")
        model, meta = load_model(args.checkpoint)
        _check_compatible(meta, dataset)
        key = args.actor if args.actor in ("il", "rl") else (meta.get("inference_actor") or "il")
        policy = model_policy(model, key)
        label = f"actor_{key}"
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = dataset.records
    name = args.name
    if args.longtail:
        if not args.baseline:
            raise UsageError("--longtail needs --baseline (a per-record dump from a baseline eval)")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            subset = longtail_from_dump(Path(args.baseline).read_text(encoding="utf-8"), LongTailSpec(args.longtail))
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        (out / f"longtail_{args.longtail}.txt").write_text("".join(k + "\n" for k in subset), encoding="utf-8")
        keep = set(subset)
        records = [r for r in records if r.key in keep]
        name = f"{name}_longtail_{args.longtail}"
        if not records:
            print(f"long-tail subset is empty; nothing to evaluate ({label})")
            return EXIT_OK
    result = evaluate(policy, dataset, records)
    write_report(result, out, name)
    s = result.summary()
    print(f"{label}: n={s['count']} L2 {s['l2_1s']:.3f}/{s['l2_2s']:.3f}/{s['l2_3s']:.3f} avg {s['l2_avg']:.3f} m; "
          f"collision {s['col_1s']:.2f}/{s['col_2s']:.2f}/{s['col_3s']:.2f} avg {s['col_avg']:.2f} %")
    return EXIT_OK


# -- report -----------------------------------------------------------------------------

TABLE_COLUMNS = ["l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg"]


def fig4_series(ledger):
    """(iteration, cumulative IL wins, cumulative RL wins, IL - RL score) per contest."""
    return [(r.iteration, w_il, w_rl, r.score_il - r.score_rl)
            for r, (w_il, w_rl) in zip(ledger.results, ledger.cumulative)]


def cmd_report(args):
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in args.runs:
        run = Path(run)
        run_doc = run / "run.json"
        summary = run / f"{args.eval_name}_summary.json"
        if not run_doc.exists() or not (run / "metrics.csv").exists():
            print(f"warning: skipping {run}: missing run.json or metrics.csv", file=sys.stderr)
            continue
        info = json.loads(run_doc.read_text(encoding="utf-8"))
        row = {"run": run.name, "strategy": info["strategy"], "rl_method": info["rl_method"], "seed": info["seed"]}
        if summary.exists():
            row.update({k: json.loads(summary.read_text(encoding="utf-8"))[k] for k in TABLE_COLUMNS})
        else:
            print(f"warning: {run} has no {summary.name}; metrics columns left empty", file=sys.stderr)
        rows.append(row)
        contests = run / "contests.csv"
        if contests.exists():
            ledger = ContestLedger.from_csv(contests.read_text(encoding="utf-8"))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["iteration", "wins_il", "wins_rl", "score_diff"])
            w.writerows([i, a, b, repr(float(d))] for i, a, b, d in fig4_series(ledger))
            (out / f"fig4_{run.name}.csv").write_text(buf.getvalue(), encoding="utf-8")
    if not rows:
        raise UsageError("no completed runs found")
    header = ["run", "strategy", "rl_method", "seed"] + TABLE_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(r[c])) if c in TABLE_COLUMNS and c in r else r.get(c, "") for c in header])
    (out / "strategies.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "strategies.md").write_text(_markdown_table(rows), encoding="utf-8")
    print(_markdown_table(rows), end="")
    return EXIT_OK


def _markdown_table(rows):
    header = ["strategy", "rl_method", "seed", "L2 1s", "L2 2s", "L2 3s", "L2 avg",
              "Col 1s", "Col 2s", "Col 3s", "Col avg"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        cells = [r["strategy"], r["rl_method"], str(r["seed"])]
        cells += [f"{r[c]:.3f}" if c in r else "" for c in TABLE_COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- ablate -----------------------------------------------------------------------------

def _ablate_one(job):
    cfg_text, data, eval_set, out, force = job
    from .config import parse_config
    cfg = parse_config(cfg_text)
    out = Path(out)
    _claim(out, force, is_dir=True)
    result = train(cfg, load_dataset(data), out)
    model = result["trainer"].state.model
    ds = load_dataset(eval_set)
    res = evaluate(model_policy(model, result["inference_actor"]), ds)
    write_report(res, out, "eval")
    return str(out)


def cmd_ablate(args):
    from .config import format_config
    base = load_config(args.config) if args.config else TrainConfig()
    strategies = args.strategies.split(",")
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; valid: {', '.join(STRATEGIES)}")
    seeds = [int(x) for x in args.seeds.split(",")]
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for s in strategies:
        for seed in seeds:
            cfg = base.with_overrides(strategy=s, seed=seed, **({"rl_method": args.rl_method} if args.rl_method else {}))
            jobs.append((format_config(cfg), args.data, args.eval_set, str(out / f"{s}_seed{seed}"), args.force))
    workers = args.jobs or int(os.environ.get(ENV_JOBS, "1"))
    if workers <= 1:
        done = [_ablate_one(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_ablate_one, jobs))
    report_args = argparse.Namespace(runs=done, out=str(out / "report"), eval_name="eval")
    return cmd_report(report_args)


# -- entry point ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="coirl", description="Dual IL/RL planner training on a synthetic driving world")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic expert dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domain-mix", default="1:0", help="relative weights of domains A and B, e.g. 1:0")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one strategy")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--strategy")
    t.add_argument("--rl-method")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-at", type=int, help="stop early at this iteration, leaving a resumable checkpoint")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or the expert replay) on a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--set", required=True)
    e.add_argument("--actor", choices=("auto", "il", "rl", "expert"), default="auto")
    e.add_argument("--longtail", choices=("l2", "collision"))
    e.add_argument("--baseline", help="per-record dump CSV of the baseline run")
    e.add_argument("--out", required=True)
    e.add_argument("--name", default="eval")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="comparison table and contest series over runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--eval-name", default="eval")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="train and evaluate a strategy x seed grid")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-set", required=True)
    a.add_argument("--strategies", default=",".join(STRATEGIES))
    a.add_argument("--rl-method")
    a.add_argument("--seeds", default="0")
    a.add_argument("--jobs", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MismatchError, DatasetError, checkpoint.CheckpointError, TrainingError, DomainLeakageError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
