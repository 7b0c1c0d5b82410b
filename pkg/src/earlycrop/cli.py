"""``earlycrop`` command-line entry point.

Subcommands: train, sweep, prunepoint, report, diagnose. Every invocation
writes into a fresh numbered directory under ``--out`` so earlier results
are never overwritten. Exit codes: 0 ok, 2 configuration error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import statistics
import sys
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import diagnostics
from .config import CRITERIA, MODES, ExperimentConfig, dump_kv, load_config
from .data import ConfigError, FormatError, load_checkpoint, model_masks, save_checkpoint, save_mask
from .experiment import build_dataset, setup
from .lifecycle import NumericDivergenceError, run_pipeline
from .records import SCHEMA_VERSION, MetricsRecord, csv_rows, median_record, run_json

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# -- output helpers ------------------------------------------------------------------


def new_run_dir(out: str | Path, prefix: str) -> Path:
    """Create ``out/prefix-NNNN`` with the next unused number."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    taken = [int(p.name.rsplit("-", 1)[1]) for p in root.glob(f"{prefix}-*") if p.name.rsplit("-", 1)[1].isdigit()]
    n = max(taken, default=0) + 1
    while True:
        path = root / f"{prefix}-{n:04d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1


def write_tsv(path: Path, rows: list[tuple]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x\ty\tseries"] + ["\t".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_run(directory: Path, config: ExperimentConfig, record: MetricsRecord) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run.json").write_text(run_json(config.to_dict(), record), encoding="utf-8")
    (directory / "metrics.csv").write_text(csv_rows([record]), encoding="utf-8")
    (directory / "config.txt").write_text(dump_kv(config), encoding="utf-8")
    write_tsv(directory / "plotdata" / "loss.tsv", [(i + 1, v, "loss") for i, v in enumerate(record.loss_series)])
    write_tsv(directory / "plotdata" / "delta.tsv", [(i + 1, v, "delta_score") for i, v in enumerate(record.delta_series)])


# -- single runs -------------------------------------------------------------------


def execute(config: ExperimentConfig) -> tuple[MetricsRecord, object]:
    """Run one pipeline, turning divergence into a record with status 'diverged'."""
    dataset, model = setup(config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            model, record = run_pipeline(model, dataset, config)
        except NumericDivergenceError as err:
            return err.record, None
    return record, model


def _execute_dict(d: dict) -> dict:
    # process-pool entry point; plain dicts cross the process boundary
    config = ExperimentConfig(**{**d, "hidden": tuple(d["hidden"]), "channels": tuple(d["channels"])})
    try:
        record, _ = execute(config)
    except (ConfigError, FormatError, ValueError) as err:
        record = MetricsRecord(config.mode, config.criterion, config.rho, config.seed, status="error", warning=str(err))
    return record.to_json()


def cmd_train(config: ExperimentConfig) -> tuple[int, MetricsRecord, Path]:
    directory = new_run_dir(config.out, "train")
    record, model = execute(config)
    write_run(directory, config, record)
    if model is not None:
        save_checkpoint(model, directory / "model.ckpt")
        save_mask(directory / "mask.bin", model_masks(model))
    return (EXIT_OK if record.status == "ok" else EXIT_NUMERIC), record, directory


# -- sweeps ------------------------------------------------------------------------


def run_many(configs: list[ExperimentConfig], jobs: int) -> list[MetricsRecord]:
    payload = [c.to_dict() for c in configs]
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_dict, payload))
    else:
        results = [_execute_dict(d) for d in payload]
    return [MetricsRecord.from_json(r) for r in results]


def group_medians(records: list[MetricsRecord]) -> list[MetricsRecord]:
    groups: dict[tuple, list[MetricsRecord]] = defaultdict(list)
    for r in records:
        if r.status != "median":
            groups[(r.rho, r.mode, r.criterion)].append(r)
    return [median_record(groups[k]) for k in sorted(groups)]


def sparsity_plot_rows(medians: list[MetricsRecord]) -> list[tuple]:
    return [(m.weight_sparsity, m.test_metric, f"{m.mode}:{m.criterion}") for m in medians]


def cmd_sweep(template: ExperimentConfig, rhos: list[float], seeds: list[int], modes: list[str]) -> tuple[int, Path, list[MetricsRecord]]:
    """Cross product of (rho, mode, seed); one row per run plus one median row per (rho, mode)."""
    if not rhos or not seeds or not modes:
        raise ConfigError("sweep needs at least one rho, one seed and one mode")
    configs = []
    for rho, mode, seed in itertools.product(rhos, modes, seeds):
        configs.append(template.replace(rho=rho, mode=mode, seed=seed).validate())
    jobs = 1 if template.timing else template.jobs  # timing runs are serial
    records = run_many(configs, jobs)
    medians = group_medians(records)
    directory = new_run_dir(template.out, "sweep")
    (directory / "metrics.csv").write_text(csv_rows(records + medians), encoding="utf-8")
    (directory / "config.txt").write_text(dump_kv(template), encoding="utf-8")
    for config, record in zip(configs, records):
        write_run(directory / "runs" / f"{config.mode}_rho{config.rho}_seed{config.seed}", config, record)
    write_tsv(directory / "plotdata" / "sparsity_accuracy.tsv", sparsity_plot_rows(medians))
    return EXIT_OK, directory, records + medians


# -- prune-point study ----------------------------------------------------------------


def cmd_prunepoint(template: ExperimentConfig, epochs: list[int], seeds: list[int]) -> tuple[int, Path, dict]:
    """Forced prune epochs plus one detector-chosen run per seed."""
    for e in epochs:
        if not 0 <= e < template.epochs:
            raise ConfigError(f"prune epoch {e} outside the budget [0, {template.epochs})")
    base = template if template.early else template.replace(mode="earlycrop-s" if template.structured else "earlycrop-u")
    configs, labels = [], []
    for seed in seeds:
        for e in epochs:
            configs.append(base.replace(seed=seed, force_prune_epoch=e).validate())
            labels.append(str(e))
        configs.append(base.replace(seed=seed, force_prune_epoch=None).validate())
        labels.append("detector")
    records = run_many(configs, 1 if template.timing else template.jobs)
    directory = new_run_dir(template.out, "prunepoint")
    (directory / "metrics.csv").write_text(csv_rows(records), encoding="utf-8")
    for config, label, record in zip(configs, labels, records):
        write_run(directory / "runs" / f"prune{label}_seed{config.seed}", config, record)

    by_epoch: dict[int, list[MetricsRecord]] = defaultdict(list)
    detector = []
    for label, record in zip(labels, records):
        (detector if label == "detector" else by_epoch[int(label)]).append(record)
    acc_rows, delta_rows = [], []
    for label, record in zip(labels, records):
        if label != "detector":
            acc_rows.append((int(label), record.test_metric, f"seed{record.seed}"))
            delta_rows.append((int(label), record.delta_at_prune, f"seed{record.seed}"))
    write_tsv(directory / "plotdata" / "prunepoint_accuracy.tsv", acc_rows)
    write_tsv(directory / "plotdata" / "prunepoint_delta.tsv", delta_rows)

    summary = prunepoint_summary(by_epoch, detector)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return EXIT_OK, directory, summary


def prunepoint_summary(by_epoch: dict[int, list[MetricsRecord]], detector: list[MetricsRecord]) -> dict:
    """Per-epoch medians and the rank correlation of -delta_score with accuracy."""
    rows = []
    for e in sorted(by_epoch):
        ok = [r for r in by_epoch[e] if r.status == "ok"]
        deltas = [r.delta_at_prune for r in ok if r.delta_at_prune is not None]
        rows.append(
            {
                "prune_epoch": e,
                "median_accuracy": statistics.median(r.test_metric for r in ok) if ok else None,
                "median_delta_score": statistics.median(deltas) if deltas else None,
            }
        )
    pairs = [(-r["median_delta_score"], r["median_accuracy"]) for r in rows if r["median_delta_score"] is not None and r["median_accuracy"] is not None]
    rho = None
    if len(pairs) >= 3:
        value = spearmanr([p[0] for p in pairs], [p[1] for p in pairs]).statistic
        rho = None if math.isnan(value) else float(value)
    ok_det = [r for r in detector if r.status == "ok"]
    return {
        "epochs": rows,
        "spearman_neg_delta_vs_accuracy": rho,
        "detector_median_accuracy": statistics.median(r.test_metric for r in ok_det) if ok_det else None,
        "detector_prune_epochs": [r.prune_epoch for r in detector],
    }


# -- report ------------------------------------------------------------------------

REPORT_HEADER = (
    "# columns: test metric | weight sparsity | node sparsity | batch time (ms) | params | disk (CSR bytes) | total time (s)\n"
    "# GPU memory is replaced by the parameter count and emissions by total wall time.\n"
)


def collect_runs(results: str | Path) -> list[tuple[dict, MetricsRecord]]:
    files = sorted(Path(results).rglob("run.json"))
    if not files:
        raise ConfigError(f"no run.json files under {results}")
    runs, versions = [], set()
    for f in files:
        blob = json.loads(f.read_text(encoding="utf-8"))
        versions.add(blob.get("schema_version"))
        runs.append((blob["config"], MetricsRecord.from_json(blob["record"])))
    if len(versions) > 1:
        raise FormatError(f"mixed schema versions {sorted(map(str, versions))} under {results}")
    if versions != {SCHEMA_VERSION}:
        raise FormatError(f"unsupported schema version {versions.pop()} (expected {SCHEMA_VERSION})")
    return runs


def _cell(v, spec: str = ".4f") -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "—"
    return format(v, spec) if isinstance(v, float) else str(v)


def report_table(records: list[MetricsRecord]) -> str:
    medians = group_medians(records)
    head = ["method", "criterion", "rho", "n", "test", "weight_sp", "node_sp", "batch_ms", "params", "disk_B", "total_s"]
    counts = defaultdict(int)
    for r in records:
        counts[(r.rho, r.mode, r.criterion)] += 1
    lines = ["\t".join(head)]
    for m in medians:
        node = _cell(m.node_sparsity) if m.mode.endswith("-s") else "—"
        lines.append(
            "\t".join(
                [m.mode, m.criterion, _cell(m.rho, "g"), str(counts[(m.rho, m.mode, m.criterion)]), _cell(m.test_metric), _cell(m.weight_sparsity), node,
                 _cell(m.median_batch_ms, ".3f"), _cell(m.param_count), _cell(m.csr_disk_bytes), _cell(m.total_time_s, ".2f")]
            )
        )
    return REPORT_HEADER + "\n".join(lines) + "\n"


def cmd_report(results: str | Path, out: str | Path | None = None) -> tuple[int, str, Path]:
    runs = collect_runs(results)
    records = [r for _, r in runs]
    text = report_table(records)
    directory = new_run_dir(out or results, "report")
    (directory / "report.tsv").write_text(text, encoding="utf-8")
    (directory / "medians.csv").write_text(csv_rows(group_medians(records)), encoding="utf-8")
    write_tsv(directory / "plotdata" / "sparsity_accuracy.tsv", sparsity_plot_rows(group_medians(records)))
    return EXIT_OK, text, directory


# -- diagnose ------------------------------------------------------------------------


def cmd_diagnose(config: ExperimentConfig, checkpoint: str | Path, probe_size: int) -> tuple[int, dict, Path]:
    model = load_checkpoint(checkpoint)
    dataset = build_dataset(config)
    report = diagnostics.diagnose(model, (dataset.x_train, dataset.y_train), probe_size=probe_size, seed=config.seed)
    blob = report.to_json()
    blob["checkpoint"] = str(checkpoint)
    directory = new_run_dir(config.out, "diagnose")
    (directory / "diagnostics.json").write_text(json.dumps(blob, indent=2, sort_keys=True), encoding="utf-8")
    np.savetxt(directory / "ntk.tsv", report.ntk_matrix, delimiter="\t")
    return EXIT_OK, blob, directory


# -- argument parsing ----------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--rho", type=float, help="target weight ratio (-u) or node ratio (-s)")
    p.add_argument("--it", type=int, help="pruning iterations")
    p.add_argument("--th", type=float, help="detector threshold (default 1 - rho)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--jobs", type=int, help="parallel worker processes for sweeps")
    p.add_argument("--detector-norm", dest="detector_norm", choices=("delta1", "theta0"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlycrop", description="Gradient-flow-preserving pruning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one train/prune/retrain run")
    _common(p)
    p.add_argument("--no-timing", dest="timing", action="store_false", default=None)

    p = sub.add_parser("sweep", help="cross product over rho, mode and seed")
    _common(p)
    p.add_argument("--rhos", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints, required=True)
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m], help="default: --mode")
    p.add_argument("--timing", action="store_true", default=False, help="record wall times (forces serial runs)")

    p = sub.add_parser("prunepoint", help="accuracy as a function of the prune epoch")
    _common(p)
    p.add_argument("--prune-epochs", dest="prune_epochs", type=_ints, required=True)
    p.add_argument("--seeds", type=_ints, default=None)
    p.add_argument("--timing", action="store_true", default=False)

    p = sub.add_parser("report", help="summarize a results directory")
    p.add_argument("results")
    p.add_argument("--out")

    p = sub.add_parser("diagnose", help="GF / NTK / Taylor diagnostics on a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", type=int, default=diagnostics.DEFAULT_PROBE)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v
    for key in ("mode", "criterion", "rho", "it", "th", "epochs", "lr", "optimizer", "seed", "dataset", "out", "jobs", "detector_norm", "timing"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            code, text, directory = cmd_report(args.results, args.out)
            print(text, end="")
            print(f"wrote {directory}", file=sys.stderr)
            return code
        config = config_from_args(args)
        if args.command == "train":
            code, record, directory = cmd_train(config)
            print(csv_rows([record]), end="")
            print(f"wrote {directory}", file=sys.stderr)
            if code == EXIT_NUMERIC:
                print(f"numeric failure: {record.warning}", file=sys.stderr)
            return code
        if args.command == "sweep":
            code, directory, rows = cmd_sweep(config, args.rhos, args.seeds, args.modes or [config.mode])
            print(csv_rows(rows), end="")
            print(f"wrote {directory}", file=sys.stderr)
            return code
        if args.command == "prunepoint":
            code, directory, summary = cmd_prunepoint(config, args.prune_epochs, args.seeds or [config.seed])
            print(json.dumps(summary, indent=2, sort_keys=True))
            print(f"wrote {directory}", file=sys.stderr)
            return code
        if args.command == "diagnose":
            code, blob, directory = cmd_diagnose(config, args.checkpoint, args.probe)
            print(json.dumps(blob, indent=2, sort_keys=True))
            print(f"wrote {directory}", file=sys.stderr)
            return code
    except (ConfigError, FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, NumericDivergenceError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
