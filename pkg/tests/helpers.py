"""Shared builders for the test modules."""

import numpy as np

from earlycrop.config import ExperimentConfig
from earlycrop.diagnostics import ntk
from earlycrop.experiment import setup
from earlycrop.lifecycle import DetectorState, detector_update, flat_params, make_optimizer, train_epoch
from earlycrop.models import cnn, mlp


def zoo_model(name, seed):
    """(model, batch) for every architecture family the package builds."""
    rng = np.random.default_rng(seed)
    if name == "mlp-relu":
        return mlp([3, 12, 9, 3], "relu", seed=seed), (rng.standard_normal((8, 3)), rng.integers(0, 3, 8))
    if name == "mlp-tanh":
        return mlp([3, 12, 9, 3], "tanh", seed=seed), (rng.standard_normal((8, 3)), rng.integers(0, 3, 8))
    if name == "mlp-regression":
        return mlp([2, 10, 2], "tanh", head="regression", seed=seed), (rng.standard_normal((8, 2)), rng.standard_normal((8, 2)))
    if name == "cnn":
        model = cnn((6, 6, 2), channels=(3, 4), n_out=3, hidden=(5,), activation="tanh", seed=seed)
        return model, (rng.standard_normal((4, 6, 6, 2)), rng.integers(0, 3, 4))
    raise ValueError(name)


ZOO = ("mlp-relu", "mlp-tanh", "mlp-regression", "cnn")


def ntk_drift(seed, epochs=30, th=0.5, lr=0.05):
    """Train a default two-moons MLP with SGD, tracking the detector and the NTK.

    Returns (trigger_epoch, drifts) where drifts[t-1] is the Frobenius norm
    of NTK(t) - NTK(t-1) on the first 32 training samples.
    """
    config = ExperimentConfig(seed=seed, optimizer="sgd", lr=lr)
    data, model = setup(config)
    probe = data.train_head(32)
    opt = make_optimizer(config.optimizer, config.lr)
    rng = np.random.default_rng(seed)
    state = DetectorState.start(flat_params(model), th)
    prev = ntk(model, probe)
    drifts = []
    for t in range(1, epochs + 1):
        train_epoch(model, data, opt, config.batch_size, rng)
        detector_update(state, flat_params(model), t)
        cur = ntk(model, probe)
        drifts.append(float(np.linalg.norm(cur - prev)))
        prev = cur
    return state.triggered_epoch, drifts


def ntk_settles_after_trigger(seed):
    trigger, drifts = ntk_drift(seed)
    if trigger is None:
        return False
    before, after = drifts[:trigger], drifts[trigger:]
    return bool(after) and np.mean(after) < np.mean(before)

