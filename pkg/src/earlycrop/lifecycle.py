"""When to prune, and the train / detect / prune / retrain pipeline.

The detector tracks the squared distance of the parameters from their
initial values, Delta_t = ||theta(t) - theta(0)||^2, and fires once the
epoch-to-epoch change of Delta, relative to Delta_1, drops below a threshold
(by default 1 - rho: sparser targets train densely for longer).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import criteria, structured
from .config import ExperimentConfig
from .data import Dataset, csr_disk_estimate
from .models import Model, enforce_masks, loss_builder, parameter_index_map, predict, weight_sparsity
from .records import MetricsRecord

SCHEDULE_MODES = ("one_shot_before", "one_shot_early", "iterative_before", "iterative_early")


class ScheduleError(ValueError):
    pass


class NumericDivergenceError(RuntimeError):
    """Training produced a non-finite value; ``record`` holds the partial run."""

    def __init__(self, message: str, record: MetricsRecord | None = None):
        super().__init__(message)
        self.record = record


# -- detector ------------------------------------------------------------------


@dataclass
class DetectorState:
    theta0: np.ndarray
    th: float
    normalization: str = "delta1"
    delta_history: list[float] = field(default_factory=lambda: [0.0])
    delta1: float | None = None
    triggered_epoch: int | None = None
    last_epoch: int = 0
    last_score: float = math.nan

    @classmethod
    def start(cls, theta0: np.ndarray, th: float, normalization: str = "delta1") -> DetectorState:
        if normalization not in ("delta1", "theta0"):
            raise ValueError(f"unknown normalization {normalization!r}")
        return cls(np.array(theta0, dtype=np.float64), float(th), normalization)


def detector_update(state: DetectorState, theta_t: np.ndarray, t: int) -> tuple[float, bool]:
    """Record epoch ``t`` and report (normalized score, should_prune).

    Epoch 1 only establishes Delta_1, so no decision is made before t = 2.
    If Delta_1 is zero the weights did not move at all and the detector
    fires at the first decision epoch.
    """
    theta_t = np.asarray(theta_t, dtype=np.float64)
    if theta_t.shape != state.theta0.shape:
        raise ad.ContractError(f"parameter vector {theta_t.shape} vs initial snapshot {state.theta0.shape}")
    if state.triggered_epoch is not None:
        return state.last_score, True
    if t <= state.last_epoch:
        raise ad.ContractError(f"epoch {t} does not follow epoch {state.last_epoch}")
    delta = float(np.sum((theta_t - state.theta0) ** 2))
    prev = state.delta_history[-1]
    state.delta_history.append(delta)
    state.last_epoch = t
    if state.delta1 is None:
        state.delta1 = delta
    if state.normalization == "theta0":
        denom = float(np.sum(state.theta0**2))
    else:
        denom = state.delta1
    diff = abs(delta - prev)
    if denom == 0.0:
        score = 0.0 if diff == 0.0 else math.inf
    else:
        score = diff / denom
    state.last_score = score
    if len(state.delta_history) < 3:
        return score, False
    fire = score < state.th or (state.normalization == "delta1" and state.delta1 == 0.0)
    if fire:
        state.triggered_epoch = t
    return score, fire


def score_upper_bound(theta_t, theta_prev, theta0, theta1) -> float:
    """Triangle-inequality bound on the delta1-normalized detector score.

    From |a^2 - b^2| = |a - b| (a + b) with a = ||theta_t - theta0|| and
    b = ||theta_prev - theta0||, and |a - b| <= ||theta_t - theta_prev||.
    """
    step = np.linalg.norm(np.subtract(theta_t, theta_prev))
    first = np.linalg.norm(np.subtract(theta1, theta0))
    a = np.linalg.norm(np.subtract(theta_t, theta0))
    b = np.linalg.norm(np.subtract(theta_prev, theta0))
    return float((step / first) * (a + b) / first)


def default_threshold(rho: float) -> float:
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    return 1.0 - rho


def iterative_ratios(rho_final: float, it: int) -> list[float]:
    """Intermediate ratios rho_final - (rho_final - 1/2) / 2^i, i = 1..it, then rho_final.

    Values are rounded to 12 decimals so that e.g. 0.92 comes out as 0.92.
    """
    if not 0.5 <= rho_final < 1.0:
        raise ScheduleError(f"iterative schedules need 0.5 <= rho_final < 1, got {rho_final}")
    if it < 1:
        raise ScheduleError(f"need at least one iteration, got {it}")
    steps = [round(rho_final - (rho_final - 0.5) * 0.5**i, 12) for i in range(1, it + 1)]
    return steps + [rho_final]


@dataclass(frozen=True)
class Schedule:
    mode: str
    it: int
    rho_final: float

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ScheduleError(f"unknown schedule mode {self.mode!r}")
        if self.mode.startswith("iterative") and self.it < 1:
            raise ScheduleError("iterative schedules need it >= 1")

    @property
    def early(self) -> bool:
        return self.mode.endswith("early")

    def ratios(self) -> list[float]:
        if self.mode.startswith("iterative") and self.rho_final > 0:
            return iterative_ratios(self.rho_final, self.it)
        return [self.rho_final]

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> Schedule:
        when = "early" if config.early else "before"
        how = "iterative" if config.iterations > 1 else "one_shot"
        return cls(f"{how}_{when}", config.iterations, config.rho)


# -- optimization ----------------------------------------------------------------


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict = {}

    def step(self, model: Model, keys, grads) -> None:
        for k, g in zip(keys, grads):
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v
            model.set(k, model.get(k) - self.lr * v)


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, model: Model, keys, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, g in zip(keys, grads):
            m = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            model.set(k, model.get(k) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")


def train_step(model: Model, batch, opt) -> float:
    keys = model.param_keys()
    value, grads = ad.value_and_grad(loss_builder(model, batch, keys), [model.get(k) for k in keys])
    opt.step(model, keys, grads)
    enforce_masks(model)
    return value


def train_epoch(model: Model, dataset: Dataset, opt, batch_size: int, rng: np.random.Generator) -> float:
    """One shuffled pass over the training split; returns the mean batch loss."""
    n = len(dataset.x_train)
    perm = rng.permutation(n)
    losses = []
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        losses.append(train_step(model, (dataset.x_train[idx], dataset.y_train[idx]), opt))
    return float(np.mean(losses))


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Accuracy for classification heads, RMSE for regression heads."""
    out = predict(model, x)
    if model.head == "classification":
        return float(np.mean(out.argmax(axis=1) == y))
    return float(np.sqrt(np.mean((out - np.asarray(y).reshape(out.shape)) ** 2)))


def flat_params(model: Model) -> np.ndarray:
    return parameter_index_map(model).flatten(model)


def batch_time_ms(model: Model, batch, warmup: int = 5, repeats: int = 30) -> float:
    """Median wall time of one forward + backward pass, after warm-up."""
    keys = model.param_keys()
    build = loss_builder(model, batch, keys)
    params = [model.get(k) for k in keys]
    times = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        ad.value_and_grad(build, params)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


# -- pruning step ----------------------------------------------------------------


@dataclass
class PruneResult:
    model: Model
    node_mask: structured.NodeMask | None = None
    masks: list = field(default_factory=list)


def prune_now(model: Model, batch, config: ExperimentConfig, schedule: Schedule, epoch: int, train_hook=None) -> PruneResult:
    """Apply the schedule's ratio steps, re-scoring before each one."""
    ratios = schedule.ratios()
    if config.structured:
        gated = structured.inject_gates(model)
        prior = None
        node_mask = None
        for r in ratios:
            scores = structured.gate_scores(gated, batch, config.criterion, config.seed)
            node_mask = structured.build_node_mask(scores, r, prior)
            prior = node_mask.flat()
            gated = structured.apply_node_mask(gated, node_mask)
        return PruneResult(structured.compact(model, node_mask), node_mask)
    masks = []
    for j, r in enumerate(ratios):
        masks.append(criteria.prune(model, batch, config.criterion, r, config.seed, config.include_bias, epoch))
        if train_hook is not None and j < len(ratios) - 1:
            train_hook(model)
    return PruneResult(model, None, masks)


# -- pipeline --------------------------------------------------------------------


def run_pipeline(model: Model, dataset: Dataset, config: ExperimentConfig) -> tuple[Model, MetricsRecord]:
    """Dense phase, optional detection, pruning, sparse phase; one call per run.

    Before-training modes prune at epoch 0. Early modes train densely and
    prune when the detector fires, or at ``max_dense_fraction`` of the epoch
    budget if it never does. ``force_prune_epoch`` overrides both. The epoch
    budget includes the dense phase.
    """
    config.validate()
    t_start = time.perf_counter()
    schedule = Schedule.from_config(config)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, config.lr)
    score_batch = dataset.train_head(config.score_batch)
    record = MetricsRecord(config.mode, config.criterion, config.rho, config.seed)
    record.metric_name = "accuracy" if model.head == "classification" else "rmse"
    original = model.copy()
    node_mask = None
    phases = {"dense": 0.0, "scoring": 0.0, "sparse": 0.0}
    dense_cap = max(1, math.ceil(config.max_dense_fraction * config.epochs))
    detector = DetectorState.start(flat_params(model), config.threshold, config.detector_norm)
    pruning = config.mode != "dense" and config.rho > 0
    warnings_seen: list[str] = []

    if config.force_prune_epoch is not None:
        prune_at = config.force_prune_epoch
    elif config.mode == "dense" or not schedule.early:
        prune_at = 0
    else:
        prune_at = None  # decided by the detector
    pruned = False

    def hook(m):
        for _ in range(config.steps_between_iterations):
            idx = rng.integers(0, len(dataset.x_train), size=config.batch_size)
            train_step(m, (dataset.x_train[idx], dataset.y_train[idx]), opt)

    def do_prune(epoch: int):
        nonlocal model, opt, node_mask, pruned
        t0 = time.perf_counter()
        record.prune_epoch = epoch
        record.delta_at_prune = record.delta_series[-1] if record.delta_series else None
        if pruning:
            result = prune_now(model, score_batch, config, schedule, epoch, hook)
            model, node_mask = result.model, result.node_mask
            opt = make_optimizer(config.optimizer, config.lr)
        pruned = True
        phases["scoring"] += time.perf_counter() - t0

    try:
        if prune_at == 0:
            do_prune(0)
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            loss_value = train_epoch(model, dataset, opt, config.batch_size, rng)
            if not math.isfinite(loss_value):
                raise ad.NonFiniteError(f"loss became {loss_value} at epoch {epoch}")
            phases["sparse" if pruned else "dense"] += time.perf_counter() - t0
            record.loss_series.append(loss_value)
            record.epochs_run = epoch
            if pruned:
                record.delta_series.append(math.nan)
                continue
            t0 = time.perf_counter()
            score, fire = detector_update(detector, flat_params(model), epoch)
            record.delta_series.append(score)
            phases["scoring"] += time.perf_counter() - t0
            if prune_at is not None:
                if epoch == prune_at:
                    do_prune(epoch)
            elif fire:
                record.trigger_epoch = epoch
                do_prune(epoch)
            elif epoch >= dense_cap:
                warnings_seen.append(f"detector did not fire by epoch {dense_cap}; pruned at the cap")
                do_prune(epoch)
    except (ad.NonFiniteError, FloatingPointError) as err:
        record.status = "diverged"
        record.warning = str(err)
        raise NumericDivergenceError(str(err), record) from err

    record.test_metric = evaluate(model, dataset.x_test, dataset.y_test)
    record.train_loss = record.loss_series[-1] if record.loss_series else math.nan
    if config.structured and pruning:
        record.node_sparsity = node_mask.node_sparsity
        record.weight_sparsity = structured.induced_weight_sparsity(original, model)
    else:
        record.weight_sparsity = weight_sparsity(model)
        if config.structured:
            record.node_sparsity = 0.0
    record.param_count = model.n_params()
    disk = csr_disk_estimate(model)
    record.csr_disk_bytes = disk.csr_bytes
    record.csr_disk_bytes_32bit_index = disk.csr_bytes_32bit_index
    record.dense_disk_bytes = disk.dense_bytes
    record.warning = "; ".join(warnings_seen)
    if config.timing:
        record.median_batch_ms = batch_time_ms(model, dataset.train_head(config.batch_size))
        record.dense_time_s = phases["dense"]
        record.scoring_time_s = phases["scoring"]
        record.sparse_time_s = phases["sparse"]
        record.total_time_s = time.perf_counter() - t_start
    for w in warnings_seen:
        warnings.warn(w, RuntimeWarning, stacklevel=2)
    return model, record
