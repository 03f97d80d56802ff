"""Command-line entry point: one subcommand per pipeline stage.

Every run resolves its settings as defaults < ``--config`` file < ``--set``
overrides < dedicated flags, writes the result to ``<out>/run_config.json``
and reads nothing else, so ``costal <cmd> --config <out>/run_config.json
--out <other>`` repeats the run exactly.

Seeds: ``gen`` and ``simulate`` use ``--seed`` as the master seed of the
synthetic data (``simulate`` also as the experiment seed); ``train`` derives
the member seeds from it; ``select --policy random`` uses it for the
permutation. The other stages are deterministic.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from .committee import LearnerConfig, load_committee, member_seeds, save_committee, train_committee
from .core_data import (
    ConfigError,
    HeatmapStack,
    StackError,
    load_dataset,
    load_heatmap,
    save_dataset,
    save_heatmap,
)
from .cost_model import CostModelParams, FitError, TimeSample, diagnostics_report, fit, predict_time
from .metrics import RegionMatchConfig, evaluate
from .heatmap_analysis import ThresholdSet, mean_heatmap, stack_features
from .selection import Budget, SelectionItem, select
from .simulation import ExperimentConfig, learning_curves, run_experiment, wild_data_config
from .synthetic import SyntheticConfig, generate_synthetic
from .uncertainty import AggregationConfig, stack_uncertainty_from_heatmaps, uncertainty_map

log = logging.getLogger("costal")

RUN_CONFIG_NAME = "run_config.json"
REQUIRED = "<required>"


class UsageError(Exception):
    """Bad configuration keys or missing inputs; exits with status 2."""


# ---------------------------------------------------------------------------
# settings


def _data_defaults() -> dict:
    d = SyntheticConfig().to_dict()
    d.pop("seed")
    return d


def _experiment_defaults() -> dict:
    d = ExperimentConfig().to_dict()
    d.pop("seed")
    d["data"].pop("seed")
    return d


DEFAULTS: dict[str, dict] = {
    "gen": {"data": _data_defaults()},
    "train": {
        "manifest": REQUIRED,
        "split": "seed_trainval",
        "n_members": 4,
        "bootstrap": False,
        "learner": asdict(LearnerConfig()),
    },
    "predict": {"manifest": REQUIRED, "committee": REQUIRED, "split": "pool", "patch_size": 32, "stride": 16},
    "uncertainty": {"heatmaps": REQUIRED, "top_k": 74, "aggregation_patch": 8},
    "features": {"heatmaps": REQUIRED, "thresholds": [0.3, 0.5, 0.7], "manifest": None},
    "fit-cost": {"samples": REQUIRED, "floor_time": 60.0},
    "select": {
        "items": None,
        "uncertainty": None,
        "features": None,
        "cost_model": None,
        "budget_s": REQUIRED,
        "quantum_s": 1.0,
        "policy": "knapsack",
        "max_cells": 10_000_000,
    },
    "eval": {
        "heatmaps": REQUIRED,
        "manifest": REQUIRED,
        "region_threshold": 0.5,
        "region_iou": 0.5,
        "negative_ratio": None,
    },
    "simulate": {"experiment": _experiment_defaults()},
}

PATH_KEYS = {"manifest", "committee", "heatmaps", "samples", "items", "uncertainty", "features", "cost_model"}


def parse_config_text(text: str) -> dict:
    """JSON object, or flat ``key = value`` lines (``#`` comments).

    Values are read as JSON when possible, else kept as strings. Dotted keys
    address nested settings (``learner.epochs = 3``).
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        return data
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _set_dotted(out, key, _parse_value(value))
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise UsageError(f"config key {key!r} descends into a non-table value")
    d[parts[-1]] = value


def _merge(base: dict, over: dict, where: str = "") -> dict:
    for key, value in over.items():
        name = f"{where}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {name!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{name}.")
        else:
            base[key] = value
    return base


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Fully resolved RunConfig for one invocation."""
    settings = copy.deepcopy(DEFAULTS[command])
    seed = 0
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        loaded = parse_config_text(path.read_text())
        file_cmd = loaded.pop("command", command)
        if file_cmd != command:
            raise UsageError(f"config was written by {file_cmd!r}, not {command!r}")
        seed = int(loaded.pop("seed", seed))
        _merge(settings, loaded)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        over: dict = {}
        _set_dotted(over, key.strip(), _parse_value(value.strip()))
        _merge(settings, over)
    for key, value in _flag_overrides(command, args).items():
        _set_dotted_existing(settings, key, value)
    if args.seed is not None:
        seed = args.seed
    for key in PATH_KEYS & settings.keys():
        if settings[key] not in (None, REQUIRED):
            settings[key] = str(Path(settings[key]).resolve())
    missing = [k for k, v in settings.items() if v == REQUIRED]
    if missing:
        raise UsageError(f"{command}: missing required setting(s) {', '.join(missing)}")
    return {"command": command, "seed": seed, **settings}


def _set_dotted_existing(settings: dict, key: str, value: Any) -> None:
    over: dict = {}
    _set_dotted(over, key, value)
    _merge(settings, over)


def _flag_overrides(command: str, args: argparse.Namespace) -> dict:
    flags = {
        "manifest": "manifest",
        "committee": "committee",
        "heatmaps": "heatmaps",
        "samples": "samples",
        "items": "items",
        "uncertainty": "uncertainty",
        "features": "features",
        "cost_model": "cost_model",
        "split": "split",
        "n_members": "n_members",
        "patch_size": "patch_size",
        "stride": "stride",
        "budget_s": "budget_s",
        "quantum_s": "quantum_s",
        "policy": "policy",
        "floor_time": "floor_time",
    }
    out = {}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if command == "train" and getattr(args, "bootstrap", False):
        out["bootstrap"] = True
    if command == "simulate" and args.mode is not None:
        out["experiment.mode"] = args.mode.replace("-", "_")
    return out


# ---------------------------------------------------------------------------
# output helpers


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def dump_json(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: str, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# heatmap directory layout: <dir>/index.csv plus <dir>/<stack_id>/{member_k,mean}.alst


def _write_heatmaps(out: Path, per_stack: list[tuple[str, list[HeatmapStack]]]) -> None:
    rows = []
    for sid, members in per_stack:
        for k, hm in enumerate(members):
            rel = f"{sid}/member_{k}.alst"
            (out / sid).mkdir(parents=True, exist_ok=True)
            save_heatmap(hm, out / rel)
            rows.append((sid, str(k), rel))
        rel = f"{sid}/mean.alst"
        save_heatmap(mean_heatmap(members), out / rel)
        rows.append((sid, "mean", rel))
    _write_csv(out / "index.csv", ["stack_id", "member", "path"], rows)


def _read_heatmaps(directory: str) -> dict[str, dict[str, HeatmapStack]]:
    root = Path(directory)
    rows = _read_csv(str(root / "index.csv"), ("stack_id", "member", "path"))
    out: dict[str, dict[str, HeatmapStack]] = {}
    for r in rows:
        out.setdefault(r["stack_id"], {})[r["member"]] = load_heatmap(root / r["path"], r["stack_id"])
    return out


def _members(entry: dict[str, HeatmapStack]) -> list[HeatmapStack]:
    keys = sorted((k for k in entry if k != "mean"), key=int)
    return [entry[k] for k in keys]


# ---------------------------------------------------------------------------
# stages


def cmd_gen(cfg: dict, out: Path, jobs: int) -> None:
    data = SyntheticConfig.from_dict({**cfg["data"], "seed": cfg["seed"]})
    stacks, _ = generate_synthetic(data)
    save_dataset(stacks, out)
    log.info("gen: wrote %d stacks to %s", len(stacks), out)


def cmd_train(cfg: dict, out: Path, jobs: int) -> None:
    stacks = load_dataset(cfg["manifest"], [cfg["split"]])
    if not stacks:
        raise ConfigError(f"split {cfg['split']!r} of {cfg['manifest']} is empty")
    learner = LearnerConfig(**cfg["learner"])
    n = int(cfg["n_members"])
    committee = train_committee(stacks, n, member_seeds(cfg["seed"], n), bool(cfg["bootstrap"]), learner)
    save_committee(committee, out / "committee")
    _write(out / "train_summary.json", dump_json({"n_members": n, "n_stacks": len(stacks), "warnings": committee.warnings}))
    log.info("train: %d members on %d stacks", n, len(stacks))


def cmd_predict(cfg: dict, out: Path, jobs: int) -> None:
    committee = load_committee(cfg["committee"])
    stacks = load_dataset(cfg["manifest"], [cfg["split"]])
    per_stack = [(s.id, committee.predict_stack(s, int(cfg["patch_size"]), int(cfg["stride"]))) for s in stacks]
    _write_heatmaps(out / "heatmaps", per_stack)
    log.info("predict: %d stacks x %d members", len(stacks), committee.n_members)


def cmd_uncertainty(cfg: dict, out: Path, jobs: int) -> None:
    agg = AggregationConfig(int(cfg["top_k"]), int(cfg["aggregation_patch"]))
    heatmaps = _read_heatmaps(cfg["heatmaps"])
    rows, index = [], []
    for sid in sorted(heatmaps):
        members = _members(heatmaps[sid])
        umap = uncertainty_map(members)
        rel = f"maps/{sid}.alst"
        (out / "maps").mkdir(parents=True, exist_ok=True)
        # JS values exceed 1 for N > 2, so the range-checked flag stays off
        save_heatmap(HeatmapStack(sid, umap.values.astype(np.float32)), out / rel, probabilities=False)
        index.append((sid, rel, "js_bits"))
        rows.append((sid, _fmt(stack_uncertainty_from_heatmaps(members, agg).value)))
    _write_csv(out / "uncertainty.csv", ["stack_id", "value"], rows)
    _write_csv(out / "maps" / "index.csv", ["stack_id", "path", "kind"], [(s, Path(p).name, k) for s, p, k in index])
    log.info("uncertainty: %d stacks", len(rows))


def cmd_features(cfg: dict, out: Path, jobs: int) -> None:
    ts = ThresholdSet(tuple(float(t) for t in cfg["thresholds"]))
    heatmaps = _read_heatmaps(cfg["heatmaps"])
    times = {}
    if cfg["manifest"]:
        from .core_data import read_manifest

        times = {e.stack_id: e.gt_label_time for e in read_manifest(cfg["manifest"], check_files=False).entries}
    header = ["stack_id", "B", "M"] + [f"{c}@{t:g}" for t in ts for c in ("B", "M")]
    with_time = bool(times)
    if with_time:
        header.append("t_seconds")
    rows = []
    for sid in sorted(heatmaps):
        entry = heatmaps[sid]
        mean = entry.get("mean") or mean_heatmap(_members(entry))
        f = stack_features(mean, ts)
        row = [sid, _fmt(f.boundary_length), _fmt(f.component_count)]
        for t in ts:
            b, m = f.per_threshold[t]
            row += [_fmt(b), str(int(m))]
        if with_time:
            t = times.get(sid)
            row.append("" if t is None else _fmt(t))
        rows.append(row)
    _write_csv(out / "features.csv", header, rows)
    log.info("features: %d stacks", len(rows))


def cmd_fit_cost(cfg: dict, out: Path, jobs: int) -> None:
    rows = _read_csv(cfg["samples"], ("stack_id", "B", "M", "t_seconds"))
    samples, skipped = [], 0
    for r in rows:
        if r["t_seconds"] in ("", None):
            skipped += 1
            continue
        b, m, t = float(r["B"]), float(r["M"]), float(r["t_seconds"])
        if b > 0 and m > 0:
            samples.append(TimeSample(b, m, t, r["stack_id"]))
        else:
            skipped += 1
    if skipped:
        log.info("fit-cost: skipped %d rows with zero features or no time", skipped)
    params = fit(samples, floor_time=float(cfg["floor_time"]))
    _write(out / "cost_model.json", dump_json(params.to_json()))
    report = diagnostics_report(params, samples)
    _write(out / "cost_diagnostics.json", report.to_json() + "\n")
    _write(out / "cost_diagnostics.csv", report.to_csv())
    log.info("fit-cost: alpha=%.4g beta=%.4g gamma=%.4g r2=%.3f n=%d", params.alpha, params.beta, params.gamma, params.r2, params.n)


def _items_from_inputs(cfg: dict, out: Path) -> list[SelectionItem]:
    if cfg["items"]:
        rows = _read_csv(cfg["items"], ("stack_id", "value", "time_s"))
        return [SelectionItem(r["stack_id"], float(r["value"]), float(r["time_s"])) for r in rows]
    need = [k for k in ("uncertainty", "features", "cost_model") if not cfg[k]]
    if need:
        raise UsageError(f"select needs --items, or all of --uncertainty, --features, --cost-model (missing {', '.join(need)})")
    values = {r["stack_id"]: float(r["value"]) for r in _read_csv(cfg["uncertainty"], ("stack_id", "value"))}
    feats = {r["stack_id"]: (float(r["B"]), float(r["M"])) for r in _read_csv(cfg["features"], ("stack_id", "B", "M"))}
    params = CostModelParams.from_json(json.loads(Path(cfg["cost_model"]).read_text()))
    missing = sorted(set(values) ^ set(feats))
    if missing:
        raise ConfigError(f"uncertainty and features cover different stacks, e.g. {missing[0]}")
    items = [SelectionItem(sid, values[sid], predict_time(params, *feats[sid])) for sid in sorted(values)]
    _write_csv(out / "items.csv", ["stack_id", "value", "time_s"], [(i.stack_id, _fmt(i.value), _fmt(i.time)) for i in items])
    return items


def cmd_select(cfg: dict, out: Path, jobs: int) -> None:
    items = _items_from_inputs(cfg, out)
    budget = Budget(float(cfg["budget_s"]), float(cfg["quantum_s"]), int(cfg["max_cells"]))
    result = select(items, budget, cfg["policy"], seed=int(cfg["seed"]))
    _write(out / "selection.json", dump_json(result.to_json()))
    log.info("select: %s chose %d of %d stacks", cfg["policy"], len(result.chosen), len(items))


def cmd_eval(cfg: dict, out: Path, jobs: int) -> None:
    heatmaps = _read_heatmaps(cfg["heatmaps"])
    stacks = {s.id: s for s in load_dataset(cfg["manifest"])}
    ids = sorted(heatmaps)
    unknown = [i for i in ids if i not in stacks or stacks[i].gt_masks is None]
    if unknown:
        raise ConfigError(f"no ground-truth masks for {unknown[0]} in {cfg['manifest']}")
    preds = [heatmaps[i].get("mean") or mean_heatmap(_members(heatmaps[i])) for i in ids]
    gts = [stacks[i].gt_masks for i in ids]
    region = RegionMatchConfig(float(cfg["region_threshold"]), float(cfg["region_iou"]))
    result = evaluate(preds, gts, region)
    if cfg["negative_ratio"] is not None:
        from .metrics import pixel_ap

        result["pixel_ap"] = pixel_ap(preds, gts, float(cfg["negative_ratio"]), seed=int(cfg["seed"]))
    _write(out / "eval.json", dump_json(result))
    log.info("eval: stack_ap=%.4f over %d stacks", result["stack_ap"], len(ids))


def cmd_simulate(cfg: dict, out: Path, jobs: int) -> None:
    e = copy.deepcopy(cfg["experiment"])
    e["seed"] = cfg["seed"]
    e["data"]["seed"] = cfg["seed"]
    exp = ExperimentConfig.from_dict(e)
    results = run_experiment(exp, jobs=jobs)
    lines = "".join(json.dumps(_json_safe(r.to_json()), sort_keys=True) + "\n" for r in results)
    _write(out / "rounds.jsonl", lines)
    curves = learning_curves(results)
    cols = ["policy", "round", "split", "metric", "n", "mean", "std", "mean_labeled", "pool_to_labeled"]
    _write_csv(out / "curves.csv", cols, [[_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols] for r in curves])
    _write_csv(
        out / "timings.csv",
        ["replicate", "policy", "round", "wall_time_s"],
        [(r.replicate, r.policy, r.round, f"{r.wall_time:.3f}") for r in results],
    )
    if exp.mode == "wild":
        _write(out / "wild_data_config.json", dump_json(wild_data_config(exp).to_dict()))
    log.info("simulate: %s, %d round records", exp.mode, len(results))


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "uncertainty": cmd_uncertainty,
    "features": cmd_features,
    "fit-cost": cmd_fit_cost,
    "select": cmd_select,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="key = value or JSON settings file (a saved run_config.json works)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    g.add_argument("--jobs", type=int, default=None, help="worker processes (default: available cores)")
    g.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting; repeatable")

    parser = argparse.ArgumentParser(prog="costal", description="Cost-sensitive active learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    add("gen", "generate a synthetic dataset")
    p = add("train", "train a committee on one split")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--n-members", type=int)
    p.add_argument("--bootstrap", action="store_true")
    p = add("predict", "sliding-window heatmaps of every member")
    p.add_argument("--manifest")
    p.add_argument("--committee")
    p.add_argument("--split")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p = add("uncertainty", "JS maps and stack uncertainty from member heatmaps")
    p.add_argument("--heatmaps")
    p = add("features", "boundary length and component count of mean heatmaps")
    p.add_argument("--heatmaps")
    p.add_argument("--manifest", help="adds a t_seconds column from ground-truth times")
    p = add("fit-cost", "fit the log-linear labeling-time model")
    p.add_argument("--samples")
    p.add_argument("--floor-time", type=float)
    p = add("select", "choose stacks under a time budget")
    p.add_argument("--items")
    p.add_argument("--uncertainty")
    p.add_argument("--features")
    p.add_argument("--cost-model")
    p.add_argument("--budget-s", type=float)
    p.add_argument("--quantum-s", type=float)
    p.add_argument("--policy", choices=("knapsack", "ual", "random", "greedy"))
    p = add("eval", "average precision at pixel, region, frame and stack level")
    p.add_argument("--heatmaps")
    p.add_argument("--manifest")
    p = add("simulate", "run an active-learning experiment")
    p.add_argument("--mode", choices=("core-set", "cost-sensitive", "wild"))
    return parser


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage().replace('"', "'")
        return f'level={record.levelname} logger={record.name} msg="{msg}"'


def _setup_logging(quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.quiet)
    try:
        cfg = resolve_config(args.command, args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"costal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    jobs = args.jobs or os.cpu_count() or 1
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write(out / RUN_CONFIG_NAME, dump_json(cfg))
        COMMANDS[args.command](cfg, out, jobs)
    except UsageError as exc:
        print(f"costal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (StackError, ConfigError, FitError, ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"costal {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
