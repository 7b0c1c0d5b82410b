"""Experiment configuration: a flat key=value file plus CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import SYNTHETIC, ConfigError

MODES = ("dense", "crop-u", "crop-s", "cropit-u", "cropit-s", "earlycrop-u", "earlycrop-s")
CRITERIA = ("crop", "grasp", "snip", "magnitude", "random")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "two_moons"
    n_samples: int = 1000
    noise: float = 0.1
    data_path: str = ""
    labels_path: str = ""
    csv_task: str = "classification"
    # model
    model: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, ...] = (6, 16)
    activation: str = "relu"
    # pruning
    mode: str = "crop-u"
    criterion: str = "crop"
    rho: float = 0.0  # weight ratio for -u modes, node ratio for -s modes
    it: int = 0  # 0 -> mode default (3 for cropit, else 1)
    th: float | None = None  # None -> 1 - rho
    detector_norm: str = "delta1"
    max_dense_fraction: float = 0.5
    force_prune_epoch: int | None = None
    steps_between_iterations: int = 0
    include_bias: bool = False
    score_batch: int = 256
    # training
    epochs: int = 50
    lr: float = 2e-3
    optimizer: str = "adam"
    batch_size: int = 64
    seed: int = 0
    # harness
    out: str = "runs"
    jobs: int = 1
    timing: bool = True

    def validate(self) -> ExperimentConfig:
        def bad(msg):
            raise ConfigError(msg)

        if self.dataset not in SYNTHETIC + ("idx", "csv"):
            bad(f"dataset must be one of {SYNTHETIC + ('idx', 'csv')}, got {self.dataset!r}")
        if self.dataset in ("idx", "csv") and not self.data_path:
            bad(f"dataset {self.dataset} needs data_path")
        if self.dataset == "idx" and not self.labels_path:
            bad("dataset idx needs labels_path")
        if self.csv_task not in ("classification", "regression"):
            bad(f"csv_task must be classification or regression, got {self.csv_task!r}")
        if self.n_samples < 10:
            bad(f"n_samples must be >= 10, got {self.n_samples}")
        if self.model not in ("mlp", "cnn"):
            bad(f"model must be mlp or cnn, got {self.model!r}")
        if self.activation not in ("relu", "tanh"):
            bad(f"activation must be relu or tanh, got {self.activation!r}")
        if any(h < 1 for h in self.hidden) or any(c < 1 for c in self.channels):
            bad("layer widths must be positive")
        if self.mode not in MODES:
            bad(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.criterion not in CRITERIA:
            bad(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if not 0.0 <= self.rho < 1.0:
            bad(f"rho must lie in [0, 1), got {self.rho}")
        if self.it < 0:
            bad(f"it must be >= 0, got {self.it}")
        if self.iterations > 1 and self.rho > 0 and self.rho < 0.5:
            bad(f"iterative schedules need rho >= 0.5, got {self.rho}")
        if self.th is not None and self.th <= 0:
            bad(f"th must be positive, got {self.th}")
        if self.detector_norm not in ("delta1", "theta0"):
            bad(f"detector_norm must be delta1 or theta0, got {self.detector_norm!r}")
        if not 0.0 < self.max_dense_fraction <= 1.0:
            bad(f"max_dense_fraction must lie in (0, 1], got {self.max_dense_fraction}")
        if self.force_prune_epoch is not None and not 0 <= self.force_prune_epoch < self.epochs:
            bad(f"force_prune_epoch must lie in [0, epochs), got {self.force_prune_epoch}")
        if self.steps_between_iterations < 0:
            bad("steps_between_iterations must be >= 0")
        if self.steps_between_iterations and self.structured:
            bad("steps_between_iterations is only supported for unstructured modes")
        if self.epochs < 1 or self.batch_size < 1 or self.score_batch < 1:
            bad("epochs, batch_size and score_batch must be positive")
        if self.lr <= 0:
            bad(f"lr must be positive, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            bad(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.jobs < 1:
            bad(f"jobs must be >= 1, got {self.jobs}")
        return self

    @property
    def structured(self) -> bool:
        return self.mode.endswith("-s")

    @property
    def early(self) -> bool:
        return self.mode.startswith("earlycrop")

    @property
    def iterations(self) -> int:
        if self.it:
            return self.it
        return 3 if self.mode.startswith("cropit") else 1

    @property
    def threshold(self) -> float:
        return 1.0 - self.rho if self.th is None else self.th

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k in ("hidden", "channels"):
            d[k] = list(d[k])
        return d


def _coerce(f: dataclasses.Field, raw: str):
    kind = str(f.type)
    raw = raw.strip()
    try:
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "None" in kind and raw.lower() in ("", "none"):
            return None
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind}") from None
    return raw


FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def parse_kv(text: str) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(FIELDS[key], value)
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """File values, then overrides (flags win); validated."""
    values: dict[str, Any] = {}
    if path:
        try:
            values.update(parse_kv(Path(path).read_text(encoding="utf-8")))
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in FIELDS:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(FIELDS[k], v) if isinstance(v, str) else v
    return ExperimentConfig(**values).validate()


def dump_kv(config: ExperimentConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={'' if v is None else v}")
    return "\n".join(lines) + "\n"
