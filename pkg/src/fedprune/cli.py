"""Command line: ``fedprune run | compare | gen-data``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Sequence

from . import comms
from .config import FEDERATED, METHODS, ExperimentConfig
from .data import gen_synthetic_silos, write_csv
from .errors import ConfigError, FedPruneError
from .federation import ExperimentResult, prepare_silos, run_experiment

log = logging.getLogger("fedprune")

ROUND_COLUMNS = ("round", "mean_rmse", "min_rmse", "max_rmse", "mean_sparsity", "cum_upload_mb", "cum_download_mb")
COMPARE_COLUMNS = ("method", "runs", "rmse", "rmse_std", "sparsity", "comm_mb", "saved_pct", "model_kb",
                   "improvement_pct")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def rounds_csv(result: ExperimentResult) -> str:
    """Per-round curve; traffic columns are cumulative idealized MB per client."""
    n = max(len(result.client_names), 1)
    up = result.ledger.per_round("idealized", "up")
    down = result.ledger.per_round("idealized", "down")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    cum_up = cum_down = 0
    for m in result.rounds:
        cum_up += up.get(m.round, 0)
        cum_down += down.get(m.round, 0)
        w.writerow([m.round, repr(m.mean_rmse), repr(m.min_rmse), repr(m.max_rmse), repr(m.mean_sparsity),
                    repr(comms.to_mb(cum_up / n)), repr(comms.to_mb(cum_down / n))])
    return buf.getvalue()


def _mean_std(values: Sequence[float]) -> dict:
    values = list(values)
    return {"mean": statistics.fmean(values), "std": statistics.stdev(values) if len(values) > 1 else None}


def aggregate(results: Sequence[dict]) -> dict:
    """Mean and sample standard deviation of the headline numbers across seeds."""
    return {
        "method": results[0]["method"],
        "seeds": [r["seed"] for r in results],
        "data_fingerprint": results[0]["data_fingerprint"],
        "rmse": _mean_std([r["mean_rmse"] for r in results]),
        "sparsity": _mean_std([r["mean_sparsity"] for r in results]),
        "comm_mb": _mean_std([r["ledger"]["idealized"]["per_client_mb"] for r in results]),
        "comm_mb_wire": _mean_std([r["ledger"]["wire"]["per_client_mb"] for r in results]),
        "model_kb": _mean_std([r["model_kb"] for r in results]),
    }


def compare_rows(results: Sequence[dict]) -> list[dict]:
    """One row per method, averaged over its seeds, in the order methods are listed in METHODS."""
    fps = {r["data_fingerprint"] for r in results}
    if len(fps) > 1:
        raise ConfigError(f"results come from different data ({', '.join(sorted(fps))})")
    by_method: dict[str, list[dict]] = {}
    for r in results:
        by_method.setdefault(r["method"], []).append(r)
    rows = []
    for method in sorted(by_method, key=lambda m: METHODS.index(m) if m in METHODS else len(METHODS)):
        agg = aggregate(by_method[method])
        rows.append({"method": method, "runs": len(by_method[method]), "rmse": agg["rmse"]["mean"],
                     "rmse_std": agg["rmse"]["std"], "sparsity": agg["sparsity"]["mean"],
                     "comm_mb": agg["comm_mb"]["mean"], "model_kb": agg["model_kb"]["mean"]})
    base = next((r for r in rows if r["method"] == "fedavg"), None)
    for r in rows:
        fed = r["method"] in FEDERATED
        r["saved_pct"] = comms.saved_pct(r["comm_mb"], base["comm_mb"]) if base and fed else None
        r["improvement_pct"] = 100.0 * (1.0 - r["rmse"] / base["rmse"]) if base else None
    return rows


def _fmt(v, spec: str) -> str:
    return "-" if v is None else format(v, spec)


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'method':<15}{'runs':>5}{'RMSE (sparsity)':>20}{'comm MB':>10}{'saved %':>9}{'model KB':>10}{'impr %':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        rmse = f"{r['rmse']:.3f}"
        if r["sparsity"]:
            rmse += f" ({r['sparsity']:.2f})"
        lines.append(f"{r['method']:<15}{r['runs']:>5}{rmse:>20}{_fmt(r['comm_mb'], '.3f'):>10}"
                     f"{_fmt(r['saved_pct'], '.1f'):>9}{_fmt(r['model_kb'], '.2f'):>10}"
                     f"{_fmt(r['improvement_pct'], '.1f'):>8}")
    return "\n".join(lines) + "\n"


def compare_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r[k] is None else r[k] for k in COMPARE_COLUMNS})
    return buf.getvalue()


# -- subcommands -----------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "method", None):
        config = config.replace(method=args.method)
    if getattr(args, "seeds", None):
        config = config.replace(seeds=args.seeds)
    return config


def cmd_run(args) -> int:
    config = _load_config(args)
    out = Path(args.out) if args.out else Path(config.out_dir) / config.method
    silos, y_scale, fp = prepare_silos(config)
    out.mkdir(parents=True, exist_ok=True)
    results, timing = [], {}
    for seed in config.seeds:
        res = run_experiment(config, seed=seed, silos=silos, y_scale=y_scale, data_fingerprint=fp)
        d = res.to_dict()
        (out / f"result_seed{seed}.json").write_text(dump_json(d), encoding="utf-8")
        (out / f"rounds_seed{seed}.csv").write_text(rounds_csv(res), encoding="utf-8")
        timing[str(seed)] = res.wall_clock_s
        results.append(d)
        log.info("%s seed %d: rmse %.3f sparsity %.3f comm %.3f MB/client (%.1f s)", config.method, seed,
                 d["mean_rmse"], d["mean_sparsity"], d["ledger"]["idealized"]["per_client_mb"], res.wall_clock_s)
    (out / "aggregate.json").write_text(dump_json(aggregate(results)), encoding="utf-8")
    (out / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    (out / "timing.json").write_text(dump_json({"wall_clock_s": timing}), encoding="utf-8")
    log.info("wrote %s", out)
    return 0


def _read_result(path: Path) -> dict:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read result {path}: {exc}") from exc
    required = {"method", "seed", "data_fingerprint", "mean_rmse", "mean_sparsity", "ledger", "model_kb"}
    if not isinstance(d, dict) or not required <= set(d):
        raise ConfigError(f"{path} is not a result file")
    return d


def cmd_compare(args) -> int:
    paths: list[Path] = []
    for p in map(Path, args.results):
        paths.extend(sorted(p.rglob("result_seed*.json")) if p.is_dir() else [p])
    if len(paths) < 2:
        raise ConfigError("compare needs at least two result files")
    rows = compare_rows([_read_result(p) for p in paths])
    text = format_table(rows)
    if not args.quiet:
        sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(compare_csv(rows), encoding="utf-8")
    return 0


def cmd_gen_data(args) -> int:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if config.synthetic is None:
        raise ConfigError("gen-data needs a synthetic data source")
    silos = gen_synthetic_silos(config.synthetic)
    files = write_csv(silos, args.out, per_silo=args.per_silo)
    log.info("wrote %d file(s) for %d silos", len(files), len(silos))
    return 0


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedprune", description="Federated pruning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one method for every configured seed")
    run.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    run.add_argument("--out", help="output directory (default: <out_dir>/<method>)")
    run.add_argument("--seeds", type=_seeds, help="comma-separated seeds, overriding the config")
    run.add_argument("--method", choices=METHODS, help="override the config's method")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate result files or directories")
    cmp_.add_argument("results", nargs="+")
    cmp_.add_argument("--out", help="also write the table as CSV")
    cmp_.add_argument("--quiet", action="store_true")
    cmp_.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-data", help="write the synthetic silos as CSV")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True, help="CSV file, or directory with --per-silo")
    gen.add_argument("--per-silo", action="store_true", help="one file per silo")
    gen.add_argument("--quiet", action="store_true")
    gen.set_defaults(func=cmd_gen_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedprune: {exc}", file=sys.stderr)
        return 2
    except (FedPruneError, OSError, ValueError, ArithmeticError) as exc:
        print(f"fedprune: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
