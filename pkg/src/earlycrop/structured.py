"""Node/channel pruning through auxiliary gates, and physical compaction.

A gate is a per-node multiplier fixed at 1 on a hidden layer's pre-activation.
Its gradient and curvature stand in for the importance of the node it scales.
The output layer is never gated, so the task interface is preserved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .criteria import CRITERIA, DegenerateScoringWarning, ScoreVector, select_pruned, target_count
from .models import Layer, Model, loss_builder


class StructuredUnsupportedError(ValueError):
    pass


@dataclass
class NodeMask:
    """Per-layer keep flags over output nodes/channels of hidden layers."""

    layers: tuple[int, ...]
    keep: tuple[np.ndarray, ...]
    rho: float = 0.0
    criterion: str = ""

    def __post_init__(self):
        self.keep = tuple(np.asarray(k, dtype=bool) for k in self.keep)
        if len(self.layers) != len(self.keep):
            raise ValueError("one keep array per layer required")

    @property
    def total(self) -> int:
        return sum(k.size for k in self.keep)

    @property
    def n_pruned(self) -> int:
        return sum(int((~k).sum()) for k in self.keep)

    @property
    def node_sparsity(self) -> float:
        return self.n_pruned / self.total if self.total else 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate(self.keep) if self.keep else np.zeros(0, dtype=bool)

    def for_layer(self, i: int) -> np.ndarray | None:
        for layer, k in zip(self.layers, self.keep):
            if layer == i:
                return k
        return None


def hidden_layers(model: Model) -> list[int]:
    return list(range(len(model.layers) - 1))


def inject_gates(model: Model) -> Model:
    """Copy of ``model`` with all-ones gates on every hidden layer."""
    out = model.copy()
    for i in hidden_layers(out):
        layer = out.layers[i]
        if layer.kind not in ("dense", "conv2d"):
            raise StructuredUnsupportedError(f"layer {i} of kind {layer.kind!r} cannot host gates")
        if layer.gate is None:
            layer.gate = np.ones(layer.n_out)
    return out


def gate_keys(model: Model) -> list[tuple[int, str]]:
    keys = [(i, "gate") for i in hidden_layers(model) if model.layers[i].gate is not None]
    if not keys:
        raise StructuredUnsupportedError("model has no gates; call inject_gates first")
    return keys


def _segments(model: Model, keys) -> tuple[tuple[int, int, int], ...]:
    segs, pos = [], 0
    for i, _ in keys:
        n = model.layers[i].n_out
        segs.append((i, pos, pos + n))
        pos += n
    return tuple(segs)


def gate_grad_hvp(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and gate-block Hessian times gradient, weights held fixed."""
    keys = gate_keys(model)
    g, hg = ad.grad_and_hvp(loss_builder(model, batch, keys), [model.get(k) for k in keys])
    return np.concatenate(g), np.concatenate(hg)


def gate_scores(model: Model, batch, criterion: str = "crop", seed: int = 0) -> ScoreVector:
    """One score per gated node.

    ``crop`` is |H_c g_c| on the gate block. The other criteria are the
    node-level counterparts used as structured baselines: ``snip`` |c g_c|,
    ``grasp`` -c H_c g_c, ``magnitude`` the L1 norm of the node's incoming
    weights (filter norm), ``random`` uniform draws.
    """
    keys = gate_keys(model)
    segs = _segments(model, keys)
    c = np.concatenate([model.get(k) for k in keys])
    if criterion in ("crop", "grasp", "snip"):
        g, hg = gate_grad_hvp(model, batch)
        if not np.any(g):
            warnings.warn("gradient with respect to gates is zero everywhere", DegenerateScoringWarning, stacklevel=2)
        values = {"crop": np.abs(hg), "grasp": -(c * hg), "snip": np.abs(c * g)}[criterion]
    elif criterion == "magnitude":
        values = np.concatenate(
            [np.abs(model.layers[i].weight * model.layers[i].weight_mask).reshape(model.layers[i].n_out, -1).sum(axis=1) for i, _ in keys]
        )
    elif criterion == "random":
        values = np.random.default_rng(seed).uniform(0.0, 1.0, size=c.size)
    else:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    return ScoreVector(values, criterion, None, segs)


def build_node_mask(scores: ScoreVector, rho_nodes: float, prior_keep: np.ndarray | None = None) -> NodeMask:
    """Globally prune round(rho * n) lowest-scoring nodes, keeping one per layer."""
    if not 0.0 <= rho_nodes < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho_nodes}")
    k = target_count(rho_nodes, len(scores))
    keep = select_pruned(scores.values, k, scores.segments, prior_keep)
    layers = tuple(s[0] for s in scores.segments)
    return NodeMask(layers, tuple(keep[a:b] for _, a, b in scores.segments), rho_nodes, scores.criterion)


def apply_node_mask(model: Model, node_mask: NodeMask) -> Model:
    """Gated copy whose pruned nodes have their gate set to zero."""
    out = inject_gates(model)
    for i, keep in zip(node_mask.layers, node_mask.keep):
        out.layers[i].gate = out.layers[i].gate * keep
    return out


def _validate(model: Model, node_mask: NodeMask) -> None:
    last = len(model.layers) - 1
    for i, keep in zip(node_mask.layers, node_mask.keep):
        if i >= last:
            raise StructuredUnsupportedError(f"layer {i} is the output layer; its nodes cannot be removed")
        if keep.size != model.layers[i].n_out:
            raise StructuredUnsupportedError(f"mask for layer {i} has {keep.size} entries, layer has {model.layers[i].n_out} nodes")
        if not keep.any():
            raise StructuredUnsupportedError(f"mask removes every node of layer {i}")


def compact(model: Model, node_mask: NodeMask) -> Model:
    """Physically remove masked nodes; returns a smaller ungated model.

    Rows (and biases) of layer l go, together with the matching input columns
    or input channels of layer l + 1.
    """
    _validate(model, node_mask)
    layers: list[Layer] = []
    src = model.layers
    keeps = [node_mask.for_layer(i) for i in range(len(src))]
    for i, layer in enumerate(src):
        rows = keeps[i] if keeps[i] is not None else np.ones(layer.n_out, dtype=bool)
        w, wm = layer.weight[rows], layer.weight_mask[rows]
        prev = keeps[i - 1] if i > 0 else None
        if prev is not None:
            if layer.kind == "conv2d":
                w, wm = w[:, prev], wm[:, prev]
            elif src[i - 1].kind == "conv2d":
                h, wd, c = layer.input_shape
                w = w.reshape(w.shape[0], h, wd, c)[..., prev].reshape(w.shape[0], -1)
                wm = wm.reshape(wm.shape[0], h, wd, c)[..., prev].reshape(wm.shape[0], -1)
            else:
                w, wm = w[:, prev], wm[:, prev]
        layers.append(
            Layer(layer.kind, w.copy(), layer.bias[rows].copy(), layer.activation, wm.copy(), layer.bias_mask[rows].copy())
        )
    return Model(layers, model.head, tuple(model.input_shape))


def induced_weight_sparsity(before: Model, after: Model) -> float:
    return 1.0 - after.n_params() / before.n_params()
