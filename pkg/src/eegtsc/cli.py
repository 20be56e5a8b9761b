"""Command line: ``eegtsc {generate,train,hpo,eval,report}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
Failures print one ``error code=<n> kind=<kind> reason=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import math
import os
import sys
from functools import partial

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import ConditioningMode, ConfigurationError
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import PRESETS, SCENARIOS, DatasetFormatError, ShapePreset, generate_synthetic, load_dataset, save_splits
from .metrics import RunResult, subject_table
from .training import (GridCell, NumericalError, Trial, enumerate_grid, hpo_grid, split_metrics)

logger = logging.getLogger("eegtsc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(obj):
    """JSON-safe copy: int keys to strings, NaN to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(_clean(obj), f, indent=2, default=_json_default)
        f.write("\n")


def _setup_run_log(out_dir) -> logging.Handler:
    # timestamps go only to this file, never into result JSON
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("eegtsc").addHandler(handler)
    logging.getLogger("eegtsc").setLevel(logging.INFO)
    return handler


def _resolve(args) -> tuple[ExperimentConfig, str]:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["base_seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        cfg = cfg.model_copy(update=updates)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.yaml"), "w") as f:
        f.write(dump_config(cfg))
    return cfg, out


def _run_record(cfg: ExperimentConfig, seed: int, run_index: int, trained: dict, test: dict) -> dict:
    """``trained`` maps a subject (or "all") to (TrainedModel, val_metrics)."""
    if list(trained) == ["all"]:
        tm, val = trained["all"]
        epochs_run, best_epoch, history = tm.epochs_run, tm.best_epoch, tm.history
    else:
        epochs_run = {s: tm.epochs_run for s, (tm, _) in trained.items()}
        best_epoch = {s: tm.best_epoch for s, (tm, _) in trained.items()}
        history = {s: tm.history for s, (tm, _) in trained.items()}
        val = {s: v for s, (_, v) in trained.items()}
    return {
        "label": cfg.label,
        "protocol": cfg.protocol,
        "mode": cfg.mode.kind,
        "metric": cfg.metric,
        "run_index": run_index,
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "history": history,
        "val_metrics": val,
        "test_metrics": test,
    }


def train_once(cfg: ExperimentConfig, splits: dict, cell: GridCell, seed: int, run_index: int, out: str) -> dict:
    """Train one run (all subjects jointly, or one model per subject) and write its artifacts."""
    mode = cfg.conditioning_mode()
    tcfg = cfg.train_config()
    trained = {}
    if cfg.protocol == "joint":
        trial = Trial(splits, cfg.family(), mode, tcfg, cfg.metric)
        tm = trial.run(cell, seed)
        val = split_metrics(tm.model, splits["val"], cfg.metric, tcfg.eval_batch_size)
        test = split_metrics(tm.model, splits["test"], cfg.metric, tcfg.eval_batch_size)
        save_checkpoint(tm.model, os.path.join(out, "checkpoint"), {"label": cfg.label, "cell": cell.to_dict()})
        trained["all"] = (tm, val)
    else:
        test = {"metric": cfg.metric, "per_subject": {}, "per_subject_loss": {}}
        for s in splits["test"].present_subjects():
            sub = {k: v.for_subject(s) for k, v in splits.items()}
            trial = Trial(sub, cfg.family(), ConditioningMode("sa"), tcfg, cfg.metric)
            tm = trial.run(cell, seed)
            val = split_metrics(tm.model, sub["val"], cfg.metric, tcfg.eval_batch_size)
            ts = split_metrics(tm.model, sub["test"], cfg.metric, tcfg.eval_batch_size)
            test["per_subject"][s] = ts["per_subject"][s]
            test["per_subject_loss"][s] = ts["per_subject_loss"][s]
            save_checkpoint(tm.model, os.path.join(out, "checkpoint", f"subject_{s:03d}"),
                            {"label": cfg.label, "subject": s, "cell": cell.to_dict()})
            trained[s] = (tm, val)
        test["pooled"] = float(np.mean(list(test["per_subject"].values())))
    record = _run_record(cfg, seed, run_index, trained, test)
    write_json(os.path.join(out, "run.json"), record)
    logger.info("run %d seed %d: test %s = %.4f", run_index, seed, cfg.metric, test["pooled"])
    return record


def _default_cell(cfg: ExperimentConfig) -> GridCell:
    mode = cfg.conditioning_mode()
    depth = (cfg.model.depth or 3) if cfg.model.family == "inception" else None
    return GridCell(cfg.train.learning_rate, cfg.train.batch_size, cfg.train.weight_decay,
                    mode.alpha if mode.uses_alpha else None, depth)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.shape:
        try:
            S, C, T, Y, a, b, c = (int(v) for v in args.shape.split(","))
            preset = ShapePreset("custom", S, C, T, Y, a, b, c)
        except ValueError as e:
            raise ConfigError(f"--shape expects S,C,T,Y,n_train,n_val,n_test: {e}") from None
    else:
        preset = PRESETS[args.preset]
    splits = generate_synthetic(preset, args.scenario, args.sigma, args.seed)
    save_splits(splits, args.out)
    for name, ds in splits.items():
        print(f"{name}: {len(ds)} records  S={ds.num_subjects} C={ds.num_channels} "
              f"T={ds.num_timesteps} Y={ds.num_classes}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    handler = _setup_run_log(out)
    try:
        splits = cfg.load_splits()
        record = train_once(cfg, splits, _default_cell(cfg), cfg.base_seed, 1, out)
    finally:
        logging.getLogger("eegtsc").removeHandler(handler)
    print(f"{cfg.label}: test {cfg.metric} {record['test_metrics']['pooled']:.4f} "
          f"(epochs {record['epochs_run']}, best {record['best_epoch']})")
    return EXIT_OK


def _grid_for(cfg: ExperimentConfig, splits: dict, jobs: int):
    mode = cfg.conditioning_mode()
    cells = enumerate_grid(cfg.search_space(), mode.uses_alpha, cfg.model.family == "inception")
    tcfg = cfg.train_config()
    if cfg.protocol == "joint":
        trial = Trial(splits, cfg.family(), mode, tcfg, cfg.metric)
        return {"all": hpo_grid(cells, trial.score, cfg.base_seed, cfg.hpo_repeats, jobs)}
    out = {}
    for s in splits["test"].present_subjects():
        sub = {k: v.for_subject(s) for k, v in splits.items()}
        trial = Trial(sub, cfg.family(), ConditioningMode("sa"), tcfg, cfg.metric)
        out[s] = hpo_grid(cells, trial.score, cfg.base_seed, cfg.hpo_repeats, jobs)
    return out


def cmd_hpo(args) -> int:
    cfg, out = _resolve(args)
    handler = _setup_run_log(out)
    try:
        splits = cfg.load_splits()
        results = _grid_for(cfg, splits, args.jobs)
        if list(results) == ["all"]:
            doc = results["all"].to_dict()
        else:
            doc = {"cells": [], "best": {}}
            for s, res in results.items():
                d = res.to_dict()
                doc["cells"] += [dict(c, subject=s) for c in d["cells"]]
                doc["best"][s] = d["best"]
        doc["protocol"] = cfg.protocol
        write_json(os.path.join(out, "hpo.json"), doc)
        print(f"hpo: {len(doc['cells'])} cells scored; best {doc['best']}")
        if args.final:
            for r in range(cfg.eval_repeats):
                seed = cfg.base_seed + r
                run_dir = os.path.join(out, f"run_{r + 1:02d}")
                os.makedirs(run_dir, exist_ok=True)
                if cfg.protocol == "joint":
                    train_once(cfg, splits, results["all"].best, seed, r + 1, run_dir)
                else:
                    _train_subject_cells(cfg, splits, results, seed, r + 1, run_dir)
            _report(out, print_table=True)
    finally:
        logging.getLogger("eegtsc").removeHandler(handler)
    return EXIT_OK


def _train_subject_cells(cfg, splits, results, seed, run_index, run_dir):
    # per-subject best cells: train each subject separately, then merge into one run.json
    merged = None
    for s, res in results.items():
        sub = {k: v.for_subject(s) for k, v in splits.items()}
        sub_dir = os.path.join(run_dir, f"subject_{s:03d}")
        rec = train_once(cfg, sub, res.best, seed, run_index, sub_dir)
        os.replace(os.path.join(sub_dir, "run.json"), os.path.join(sub_dir, "subject_run.json"))
        if merged is None:
            merged = dict(rec, test_metrics={"metric": cfg.metric, "per_subject": {}, "per_subject_loss": {}},
                          epochs_run={}, best_epoch={}, history={}, val_metrics={})
        for key in ("epochs_run", "best_epoch", "history", "val_metrics"):
            merged[key].update(rec[key])
        merged["test_metrics"]["per_subject"].update(rec["test_metrics"]["per_subject"])
        merged["test_metrics"]["per_subject_loss"].update(rec["test_metrics"]["per_subject_loss"])
    merged["test_metrics"]["pooled"] = float(np.mean(list(merged["test_metrics"]["per_subject"].values())))
    write_json(os.path.join(run_dir, "run.json"), merged)


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (CheckpointError, KeyError) as e:
        raise DatasetFormatError(f"cannot load checkpoint: {e}") from None
    ds = load_dataset(args.data)
    if ds.num_channels != model.num_channels or ds.num_subjects != model.num_subjects:
        raise DatasetFormatError(
            f"dataset (S={ds.num_subjects}, C={ds.num_channels}) does not match the checkpoint "
            f"(S={model.num_subjects}, C={model.num_channels})"
        )
    res = split_metrics(model, ds, args.metric)
    line = f"accuracy {res['accuracy']:.6f}"
    if "auc" in res:
        line += f"  auc {res['auc']:.6f}"
    print(line + f"  loss {res['loss']:.6f}")
    if args.json:
        write_json(args.json, res)
    return EXIT_OK


def _load_runs(results_dir):
    paths = sorted(glob.glob(os.path.join(results_dir, "**", "run.json"), recursive=True))
    if not paths:
        raise DatasetFormatError(f"no run.json files under {results_dir}")
    groups: dict[str, list[RunResult]] = {}
    metrics = set()
    for p in paths:
        with open(p) as f:
            rec = json.load(f)
        tm = rec["test_metrics"]
        per_subject = {int(k): (float("nan") if v is None else v) for k, v in tm["per_subject"].items()}
        per_loss = {int(k): v for k, v in tm.get("per_subject_loss", {}).items()}
        run = RunResult(int(rec.get("run_index", 0)), per_subject, tm.get("pooled", float("nan")), per_loss)
        groups.setdefault(rec.get("label", "model"), []).append(run)
        metrics.add(rec.get("metric", "accuracy"))
    return groups, metrics


def _report(results_dir, print_table=True) -> str:
    groups, metrics = _load_runs(results_dir)
    table = subject_table(groups)
    header = f"metric: {', '.join(sorted(metrics))}; mean±std over runs per column\n"
    text = header + table.to_text()
    with open(os.path.join(results_dir, "report.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(results_dir, "report.csv"), "w") as f:
        f.write(table.to_csv())
    if print_table:
        print(text, end="")
    return text


def cmd_report(args) -> int:
    _report(args.results_dir)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegtsc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic train/val/test datasets")
    g.add_argument("--preset", choices=sorted(PRESETS), default="ssvep")
    g.add_argument("--shape", help="custom shape S,C,T,Y,n_train,n_val,n_test (overrides --preset)")
    g.add_argument("--scenario", choices=SCENARIOS, default="shared")
    g.add_argument("--sigma", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    for name, func, help_ in (("train", cmd_train, "one training run with the configured cell"),
                              ("hpo", cmd_hpo, "grid search over the configured space")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", required=True)
        c.add_argument("--out", help="output directory (overrides output_dir)")
        c.add_argument("--seed", type=int, help="base seed (overrides base_seed)")
        c.add_argument("--jobs", type=int, default=1, help="parallel grid cells (hpo only)")
        if name == "hpo":
            c.add_argument("--final", action="store_true",
                           help="after the search, train eval_repeats runs with the best cell and report")
        c.set_defaults(func=func)

    e = sub.add_parser("eval", help="metrics of a checkpoint on one dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="split directory with meta.json and data.bin")
    e.add_argument("--metric", choices=("accuracy", "auc"), default="accuracy",
                   help="metric used for the per-subject values in --json output")
    e.add_argument("--json", help="also write the metrics to this JSON file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="per-subject tables from run.json files")
    r.add_argument("results_dir")
    r.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, reason) -> int:
    reason = str(reason).replace("\n", " ").strip()
    print(f"error code={code} kind={kind} reason={reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        return _fail(EXIT_CONFIG, "config", "--jobs must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, yaml.YAMLError) as e:
        return _fail(EXIT_CONFIG, "config", e)
    except NumericalError as e:
        return _fail(EXIT_NUMERIC, "numerical", e)
    except (DatasetFormatError, FileNotFoundError) as e:
        return _fail(EXIT_DATA, "data", e)


if __name__ == "__main__":
    sys.exit(main())
