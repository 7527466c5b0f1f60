"""Command-line entry point: ``filfl {run,filter-bench,submod-check,partition-inspect}``.

Exit status is 0 on success, 2 for configuration errors and 1 for failures
during a run. ``FILFL_LOG_LEVEL`` sets log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .core import RngStream
from .orchestrator import RoundRecord, build_task, run_experiment
from .plots import write_panels

log = logging.getLogger("filfl")

ROUND_COLUMNS = [
    "round", "n_t", "filtered_size", "selected_ids", "train_loss", "public_loss", "test_loss",
    "test_acc", "reward", "delta_gap", "opt_ratio", "oracle_calls", "wall_ms",
]

MIN_SUBMOD_SAMPLES = 50


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def round_row(rec: RoundRecord) -> list[str]:
    return [
        str(rec.round), str(rec.n_t), str(len(rec.filtered)),
        ";".join(str(k) for k in rec.selected),
        _cell(rec.train_loss), _cell(rec.public_loss), _cell(rec.test_loss), _cell(rec.test_acc),
        _cell(rec.reward), _cell(rec.delta_gap), _cell(rec.opt_ratio), str(rec.oracle_calls),
        _cell(rec.wall_ms),
    ]


def write_rounds_csv(path: Path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_COLUMNS)
        for rec in records:
            writer.writerow(round_row(rec))


def write_trace_jsonl(path: Path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            if rec.trace is not None:
                fh.write(rec.trace.to_jsonl(rec.round))


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest(config: ExperimentConfig, started: str, outputs: dict[str, str]) -> dict:
    return {
        "config_hash": config.hash(),
        "seed": config.seed,
        "started": started,
        "finished": _now(),
        "version": __version__,
        "outputs": outputs,
    }


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return statistics.fmean(values) if values else None


def cmd_run(config: ExperimentConfig, out: Path) -> int:
    started = _now()
    records = run_experiment(config)
    paths = {"rounds": out / "rounds.csv", "trace": out / "filter_trace.jsonl", "summary": out / "summary.json"}
    write_rounds_csv(paths["rounds"], records)
    write_trace_jsonl(paths["trace"], records)
    if config.diagnostics.plots:
        paths["plots"] = write_panels(
            out / "curves.svg",
            [r.round for r in records],
            {
                "test accuracy": [r.test_acc for r in records],
                "train loss": [r.train_loss for r in records],
                "test loss": [r.test_loss for r in records],
                "filtered-in clients": [float(len(r.filtered)) for r in records],
            },
        )
    last = records[-1]
    summary = {
        "manifest": manifest(config, started, {k: str(v) for k, v in paths.items()}),
        "config": config.to_dict(),
        "rounds": len(records),
        "final": {
            "train_loss": last.train_loss, "public_loss": last.public_loss,
            "test_loss": last.test_loss, "test_acc": last.test_acc,
        },
        "mean_filtered_size": _mean(len(r.filtered) for r in records),
        "filter_rounds": sum(r.filter_ran for r in records),
        "oracle_calls": sum(r.oracle_calls for r in records),
        "mean_delta_gap": _mean(r.delta_gap for r in records),
        "mean_opt_ratio": _mean(r.opt_ratio for r in records),
    }
    _write_json(paths["summary"], summary)
    print(f"wrote {len(records)} rounds to {paths['rounds']}")
    return 0


def cmd_filter_bench(config: ExperimentConfig, out: Path) -> int:
    if config.federation.available > 20:
        raise ConfigError("federation.available", "filter-bench needs at most 20 available clients")
    started = _now()
    ratios: dict[str, dict[int, float]] = {}
    for mode in ("D", "R"):
        cfg = config.replace(federation={"filter_mode": mode}, diagnostics={"opt_ratio": True})
        ratios[mode] = {r.round: r.opt_ratio for r in run_experiment(cfg) if r.opt_ratio is not None}
    rounds = sorted(set(ratios["D"]) | set(ratios["R"]))
    with open(out / "filter_bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "ratio_D", "ratio_R"])
        for t in rounds:
            writer.writerow([t, _cell(ratios["D"].get(t)), _cell(ratios["R"].get(t))])
    stats = {
        mode: {
            "filter_rounds": len(vals),
            "mean": _mean(vals.values()),
            "min": min(vals.values()) if vals else None,
            "max": max(vals.values()) if vals else None,
        }
        for mode, vals in ratios.items()
    }
    _write_json(out / "filter_bench.json", {
        "manifest": manifest(config, started, {"ratios": str(out / "filter_bench.csv")}),
        "ratios": stats,
    })
    for mode, s in stats.items():
        mean = "n/a" if s["mean"] is None else f"{s['mean']:.4f}"
        print(f"mode {mode}: mean ratio {mean} over {s['filter_rounds']} filtering rounds")
    return 0


def cmd_submod_check(config: ExperimentConfig, out: Path) -> int:
    diag = config.diagnostics
    if diag.submod_samples < MIN_SUBMOD_SAMPLES:
        raise ConfigError("diagnostics.submod_samples", f"must be >= {MIN_SUBMOD_SAMPLES}")
    if config.federation.filter_mode == "off":
        raise ConfigError("federation.filter_mode", "submod-check needs filtering rounds (D or R)")
    started = _now()
    records = run_experiment(config.replace(diagnostics={"submod_check": True}))
    tables = [(r.round, r.submod) for r in records if r.submod is not None]
    if not tables:
        raise RuntimeError("no filtering round ran; increase train.rounds or lower federation.h")
    gammas = list(diag.gammas)
    average = {g: statistics.fmean(tab[g] for _, tab in tables) for g in gammas}
    with open(out / "submod.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row"] + [_cell(g) for g in gammas])
        for t, tab in tables:
            writer.writerow([f"round {t}"] + [_cell(tab[g]) for g in gammas])
        writer.writerow(["average"] + [_cell(average[g]) for g in gammas])
    _write_json(out / "submod.json", {
        "manifest": manifest(config, started, {"table": str(out / "submod.csv")}),
        "rounds": [t for t, _ in tables],
        "average": {str(g): v for g, v in average.items()},
    })
    print("gamma " + " ".join(f"{g:g}" for g in gammas))
    print("avg%  " + " ".join(f"{average[g]:.1f}" for g in gammas))
    return 0


def cmd_partition_inspect(config: ExperimentConfig, out: Path) -> int:
    if config.task.target != "classification":
        raise ConfigError("task.target", "partition-inspect needs a classification task")
    started = _now()
    task = build_task(config, RngStream(config.seed).child("task"))
    C = config.task.classes
    rows, fractions = [], []
    for k in sorted(task.clients):
        ds = task.clients[k]
        if ds.size == 0:
            continue
        hist = np.bincount(ds.y.astype(np.int64), minlength=C)
        frac = float(hist.max() / ds.size)
        fractions.append(frac)
        rows.append([k, ds.size, *hist.tolist(), repr(frac)])
    with open(out / "partition.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client_id", "size"] + [f"class_{c}" for c in range(C)] + ["max_class_fraction"])
        writer.writerows(rows)
    summary = {
        "manifest": manifest(config, started, {"histograms": str(out / "partition.csv")}),
        "clients": task.num_clients,
        "non_empty_clients": len(rows),
        "mean_max_class_fraction": statistics.fmean(fractions),
        "public_size": task.public.size,
    }
    _write_json(out / "partition.json", summary)
    print(f"{len(rows)} non-empty clients, mean max-class fraction {summary['mean_max_class_fraction']:.4f}")
    return 0


COMMANDS: dict[str, Callable[[ExperimentConfig, Path], int]] = {
    "run": cmd_run,
    "filter-bench": cmd_filter_bench,
    "submod-check": cmd_submod_check,
    "partition-inspect": cmd_partition_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filfl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FILFL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
