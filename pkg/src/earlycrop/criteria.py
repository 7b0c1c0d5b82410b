"""Per-parameter importance scores and global mask construction.

Scores cover the rankable parameters (weights, optionally biases) of a model.
Second-order criteria differentiate the loss with respect to every weight and
bias, then read off the rankable entries:

    crop       |theta * (H g)|
    grasp      -theta * (H g)      (signed; lowest pruned)
    snip       |theta * g|
    magnitude  |theta|
    random     uniform(0, 1)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import Model, ParamIndex, apply_mask, loss_builder, mask_vector, parameter_index_map

CRITERIA = ("crop", "grasp", "snip", "magnitude", "random")


class DegenerateScoringWarning(UserWarning):
    """The loss gradient vanished everywhere; second-order scores are all zero."""


class InfeasibleRatioError(ValueError):
    pass


@dataclass
class ScoreVector:
    values: np.ndarray
    criterion: str
    batch_id: str | None = None
    # (layer, start, stop) spans whose best entry survives any ratio
    segments: tuple[tuple[int, int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class PruningMask:
    keep: np.ndarray
    rho: float
    criterion: str
    epoch: int = 0
    index: ParamIndex | None = field(default=None, repr=False)

    @property
    def n_pruned(self) -> int:
        return int((~self.keep).sum())


def target_count(rho: float, n: int) -> int:
    """round(rho * n), halves rounded up."""
    return int(math.floor(rho * n + 0.5))


def rankable_index(model: Model, include_bias: bool = False) -> ParamIndex:
    return parameter_index_map(model, include_bias=include_bias)


def _protected_segments(index: ParamIndex) -> tuple[tuple[int, int, int], ...]:
    return tuple((e.layer, e.start, e.stop) for e in index.entries if e.name in ("weight", "gate"))


def _full_grad_hvp(model: Model, batch, loss_scale: float, second_order: bool):
    full = parameter_index_map(model, include_bias=True)
    params = [model.get(k) for k in full.keys]
    build = loss_builder(model, batch, full.keys, loss_scale)
    if second_order:
        g, hg = ad.grad_and_hvp(build, params)
    else:
        _, g = ad.value_and_grad(build, params)
        hg = None
    return full, g, hg


def _select(full: ParamIndex, rank: ParamIndex, arrays) -> np.ndarray:
    by_key = dict(zip(full.keys, arrays))
    return np.concatenate([by_key[k].reshape(-1) for k in rank.keys])


def _effective_theta(model: Model, rank: ParamIndex) -> np.ndarray:
    parts = []
    for e in rank.entries:
        layer = model.layers[e.layer]
        parts.append((getattr(layer, e.name) * getattr(layer, f"{e.name}_mask")).reshape(-1))
    return np.concatenate(parts)


def theta_hg(model: Model, batch, include_bias: bool = False, loss_scale: float = 1.0):
    """(theta, H g, g) restricted to rankable entries, from one exact HVP."""
    full, g, hg = _full_grad_hvp(model, batch, loss_scale, second_order=True)
    rank = rankable_index(model, include_bias)
    g_all = np.concatenate([x.reshape(-1) for x in g])
    if not np.any(g_all):
        warnings.warn("loss gradient is zero everywhere; scores are degenerate", DegenerateScoringWarning, stacklevel=3)
    return _effective_theta(model, rank), _select(full, rank, hg), _select(full, rank, g), rank


def crop_scores(model: Model, batch, include_bias: bool = False, loss_scale: float = 1.0, batch_id=None) -> ScoreVector:
    theta, hg, _, rank = theta_hg(model, batch, include_bias, loss_scale)
    return ScoreVector(np.abs(theta * hg), "crop", batch_id, _protected_segments(rank))


def grasp_scores(model: Model, batch, include_bias: bool = False, loss_scale: float = 1.0, batch_id=None) -> ScoreVector:
    theta, hg, _, rank = theta_hg(model, batch, include_bias, loss_scale)
    return ScoreVector(-(theta * hg), "grasp", batch_id, _protected_segments(rank))


def snip_scores(model: Model, batch, include_bias: bool = False, loss_scale: float = 1.0, batch_id=None) -> ScoreVector:
    full, g, _ = _full_grad_hvp(model, batch, loss_scale, second_order=False)
    rank = rankable_index(model, include_bias)
    theta = _effective_theta(model, rank)
    return ScoreVector(np.abs(theta * _select(full, rank, g)), "snip", batch_id, _protected_segments(rank))


def magnitude_scores(model: Model, include_bias: bool = False) -> ScoreVector:
    rank = rankable_index(model, include_bias)
    return ScoreVector(np.abs(_effective_theta(model, rank)), "magnitude", None, _protected_segments(rank))


def random_scores(model: Model, seed: int = 0, include_bias: bool = False) -> ScoreVector:
    rank = rankable_index(model, include_bias)
    values = np.random.default_rng(seed).uniform(0.0, 1.0, size=rank.size)
    return ScoreVector(values, "random", f"seed={seed}", _protected_segments(rank))


def score(model: Model, batch, criterion: str, seed: int = 0, include_bias: bool = False, loss_scale: float = 1.0) -> ScoreVector:
    if criterion == "crop":
        return crop_scores(model, batch, include_bias, loss_scale)
    if criterion == "grasp":
        return grasp_scores(model, batch, include_bias, loss_scale)
    if criterion == "snip":
        return snip_scores(model, batch, include_bias, loss_scale)
    if criterion == "magnitude":
        return magnitude_scores(model, include_bias)
    if criterion == "random":
        return random_scores(model, seed, include_bias)
    raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def select_pruned(values: np.ndarray, k: int, segments=(), prior_keep: np.ndarray | None = None) -> np.ndarray:
    """Boolean keep-vector pruning the ``k`` lowest entries.

    Ties go to the lower index. The highest-ranked entry of each segment is
    never pruned; entries already pruned in ``prior_keep`` stay pruned.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    eff = values.copy()
    if prior_keep is not None:
        prior_keep = np.asarray(prior_keep, dtype=bool)
        eff[~prior_keep] = -np.inf
        if k < int((~prior_keep).sum()):
            raise InfeasibleRatioError(f"cannot prune {k} entries when {(~prior_keep).sum()} are already pruned")
    order = np.lexsort((np.arange(n), eff))
    rank = np.empty(n, dtype=np.intp)
    rank[order] = np.arange(n)
    protected = np.zeros(n, dtype=bool)
    for _, start, stop in segments:
        if stop > start:
            protected[start + int(np.argmax(rank[start:stop]))] = True
    if k > n - int(protected.sum()):
        raise InfeasibleRatioError(f"pruning {k} of {n} entries would empty a protected layer ({int(protected.sum())} must survive)")
    candidates = order[~protected[order]]
    keep = np.ones(n, dtype=bool)
    keep[candidates[:k]] = False
    return keep


def build_mask(scores: ScoreVector, rho: float, prior_keep: np.ndarray | None = None, epoch: int = 0) -> PruningMask:
    """Globally prune round(rho * n) lowest-scoring parameters."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    k = target_count(rho, len(scores))
    keep = select_pruned(scores.values, k, scores.segments, prior_keep)
    return PruningMask(keep, rho, scores.criterion, epoch)


def prune(model: Model, batch, criterion: str, rho: float, seed: int = 0, include_bias: bool = False, epoch: int = 0) -> PruningMask:
    """Score, build a mask respecting existing masks, and apply it in place."""
    rank = rankable_index(model, include_bias)
    prior = mask_vector(model, rank)
    scores = score(model, batch, criterion, seed, include_bias)
    mask = build_mask(scores, rho, prior if not prior.all() else None, epoch)
    mask.index = rank
    apply_mask(model, mask.keep, rank)
    return mask
