"""Per-run metrics record and its CSV/JSON encodings."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import statistics
from dataclasses import dataclass, field, fields
from typing import Any

SCHEMA_VERSION = 1


@dataclass
class MetricsRecord:
    mode: str
    criterion: str
    rho: float
    seed: int | None  # None on aggregate rows
    status: str = "ok"
    metric_name: str = "accuracy"  # accuracy (classification) or rmse (regression)
    test_metric: float = math.nan
    train_loss: float = math.nan
    weight_sparsity: float = 0.0
    node_sparsity: float | None = None  # None for unstructured runs
    param_count: int = 0
    csr_disk_bytes: int = 0
    csr_disk_bytes_32bit_index: int = 0
    dense_disk_bytes: int = 0
    trigger_epoch: int | None = None
    prune_epoch: int | None = None
    delta_at_prune: float | None = None
    epochs_run: int = 0
    warning: str = ""
    # wall-clock fields, None when timing is disabled
    total_time_s: float | None = None
    dense_time_s: float | None = None
    scoring_time_s: float | None = None
    sparse_time_s: float | None = None
    median_batch_ms: float | None = None
    loss_series: list[float] = field(default_factory=list)
    delta_series: list[float] = field(default_factory=list)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_json(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = repr(v)
            elif isinstance(v, list):
                d[k] = [x if math.isfinite(x) else repr(x) for x in v]
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> MetricsRecord:
        def num(x):
            return float(x) if isinstance(x, str) else x

        d = dict(d)
        for k in ("test_metric", "train_loss", "delta_at_prune"):
            if d.get(k) is not None:
                d[k] = num(d[k])
        for k in ("loss_series", "delta_series"):
            d[k] = [num(x) for x in d.get(k, [])]
        return cls(**{k: v for k, v in d.items() if k in cls.field_names()})


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ";".join(_cell(float(x)) for x in value)
    return str(value)


def csv_rows(records: list[MetricsRecord]) -> str:
    """CSV text, one row per record, columns in field order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRecord.field_names())
    for r in records:
        w.writerow([_cell(getattr(r, name)) for name in MetricsRecord.field_names()])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def run_json(config: dict[str, Any], record: MetricsRecord) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "config": config, "record": record.to_json()}, indent=2, sort_keys=True)


_MEDIAN_FIELDS = (
    "test_metric",
    "train_loss",
    "weight_sparsity",
    "node_sparsity",
    "param_count",
    "csr_disk_bytes",
    "csr_disk_bytes_32bit_index",
    "dense_disk_bytes",
    "trigger_epoch",
    "prune_epoch",
    "delta_at_prune",
    "epochs_run",
    "total_time_s",
    "dense_time_s",
    "scoring_time_s",
    "sparse_time_s",
    "median_batch_ms",
)

_INT_FIELDS = {"param_count", "csr_disk_bytes", "csr_disk_bytes_32bit_index", "dense_disk_bytes", "trigger_epoch", "prune_epoch", "epochs_run"}


def median_record(records: list[MetricsRecord]) -> MetricsRecord:
    """Per-field median over successful runs sharing (mode, criterion, rho).

    Fields missing in every run stay None; the seed is None and status "median".
    """
    ok = [r for r in records if r.status == "ok"]
    first = records[0]
    out = MetricsRecord(first.mode, first.criterion, first.rho, None, status="median", metric_name=first.metric_name)
    for name in _MEDIAN_FIELDS:
        values = [getattr(r, name) for r in ok if getattr(r, name) is not None]
        if not values:
            setattr(out, name, None if name not in ("test_metric", "train_loss") else math.nan)
            continue
        med = float(statistics.median(values))
        if name in _INT_FIELDS and med.is_integer():
            med = int(med)
        setattr(out, name, med)
    out.warning = f"{len(ok)}/{len(records)} runs ok"
    return out
