"""Maskable MLP and plain-CNN chains built on the autodiff tape.

Dense weights are stored ``(out, in)``; conv weights ``(out_ch, in_ch, k, k)``
acting on NHWC activations (stride 1, no padding, im2col + matmul).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": ad.identity,
}

PARAM_NAMES = ("weight", "bias")


class DataError(ValueError):
    """Targets are incompatible with the model head."""


@dataclass
class Layer:
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    weight_mask: np.ndarray | None = None
    bias_mask: np.ndarray | None = None
    gate: np.ndarray | None = None
    # per-sample input shape: (features,) for dense, (H, W, C) for conv or a
    # dense layer that flattens a conv output
    input_shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight_mask is None:
            self.weight_mask = np.ones(self.weight.shape, dtype=bool)
        if self.bias_mask is None:
            self.bias_mask = np.ones(self.bias.shape, dtype=bool)
        self.weight_mask = np.asarray(self.weight_mask, dtype=bool)
        self.bias_mask = np.asarray(self.bias_mask, dtype=bool)
        if self.weight_mask.shape != self.weight.shape or self.bias.shape != (self.n_out,):
            raise ShapeError(f"layer shapes inconsistent: weight {self.weight.shape}, bias {self.bias.shape}")
        if self.gate is not None:
            self.gate = np.asarray(self.gate, dtype=np.float64)
            if self.gate.shape != (self.n_out,):
                raise ShapeError(f"gate shape {self.gate.shape} vs {self.n_out} outputs")
        if not self.input_shape:
            self.input_shape = (self.weight.shape[1],) if self.kind == "dense" else ()

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2] if self.kind == "conv2d" else 1

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.n_out,)
        h, w, _ = self.input_shape
        k = self.kernel
        return (h - k + 1, w - k + 1, self.n_out)

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class Model:
    layers: list[Layer]
    head: str = "classification"
    input_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.head not in ("classification", "regression"):
            raise ValueError(f"unknown head {self.head!r}")
        if not self.input_shape:
            self.input_shape = self.layers[0].input_shape
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                if len(shape) != 3 or layer.weight.shape[1] != shape[2]:
                    raise ShapeError(f"layer {i}: conv weight {layer.weight.shape} cannot consume input {shape}")
            elif layer.weight.shape[1] != int(np.prod(shape)):
                raise ShapeError(f"layer {i}: dense weight {layer.weight.shape} cannot consume input {shape}")
            layer.input_shape = shape
            shape = layer.output_shape

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def param_keys(self, names: Sequence[str] = PARAM_NAMES) -> list[tuple[int, str]]:
        keys = []
        for i, layer in enumerate(self.layers):
            for name in names:
                if getattr(layer, name) is not None:
                    keys.append((i, name))
        return keys

    def get(self, key: tuple[int, str]) -> np.ndarray:
        return getattr(self.layers[key[0]], key[1])

    def set(self, key: tuple[int, str], value: np.ndarray) -> None:
        i, name = key
        old = getattr(self.layers[i], name)
        if old.shape != np.shape(value):
            raise ShapeError(f"{key}: new value {np.shape(value)} vs {old.shape}")
        setattr(self.layers[i], name, np.asarray(value, dtype=np.float64))


# -- construction ----------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def mlp(sizes: Sequence[int], activation: str = "relu", head: str = "classification", seed: int = 0) -> Model:
    """Fully connected chain; ``sizes`` = [inputs, hidden..., outputs]."""
    if len(sizes) < 2:
        raise ValueError("mlp needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for j, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "identity" if j == len(sizes) - 2 else activation
        layers.append(Layer("dense", kaiming_uniform(rng, (n_out, n_in), n_in), np.zeros(n_out), act))
    return Model(layers, head, (int(sizes[0]),))


def cnn(
    input_shape: tuple[int, int, int],
    channels: Sequence[int] = (6, 16),
    n_out: int = 10,
    hidden: Sequence[int] = (),
    kernel: int = 3,
    activation: str = "relu",
    head: str = "classification",
    seed: int = 0,
) -> Model:
    """LeNet-style conv stack followed by dense layers on the flattened map."""
    rng = np.random.default_rng(seed)
    layers = []
    h, w, c = input_shape
    for ch in channels:
        fan_in = c * kernel * kernel
        layers.append(Layer("conv2d", kaiming_uniform(rng, (ch, c, kernel, kernel), fan_in), np.zeros(ch), activation))
        h, w, c = h - kernel + 1, w - kernel + 1, ch
        if h < 1 or w < 1:
            raise ShapeError(f"input {input_shape} too small for {len(channels)} convs of kernel {kernel}")
    sizes = [h * w * c, *hidden, n_out]
    for j, (n_in, n_o) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "identity" if j == len(sizes) - 2 else activation
        layers.append(Layer("dense", kaiming_uniform(rng, (n_o, n_in), n_in), np.zeros(n_o), act))
    return Model(layers, head, tuple(input_shape))


# -- forward -------------------------------------------------------------------


@lru_cache(maxsize=64)
def im2col_index(n: int, h: int, w: int, c: int, k: int) -> np.ndarray:
    """Flat NHWC indices; row (n, oh, ow), column c*k*k + i*k + j."""
    oh, ow = h - k + 1, w - k + 1
    nn, ii, jj, cc, ki, kj = np.meshgrid(
        np.arange(n), np.arange(oh), np.arange(ow), np.arange(c), np.arange(k), np.arange(k), indexing="ij"
    )
    flat = ((nn * h + ii + ki) * w + jj + kj) * c + cc
    flat = flat.reshape(n * oh * ow, c * k * k)
    flat.setflags(write=False)
    return flat


def _layer_forward(layer: Layer, x: Tensor, p: dict[str, Tensor]) -> Tensor:
    w = ad.mul(p["weight"], Tensor(layer.weight_mask.astype(np.float64)))
    b = ad.mul(p["bias"], Tensor(layer.bias_mask.astype(np.float64)))
    if layer.kind == "dense":
        if x.ndim != 2:
            x = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        if x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(f"dense layer expects {layer.weight.shape[1]} features, input has shape {x.shape}")
        pre = ad.add(ad.matmul(x, ad.transpose(w)), b)
    else:
        n = x.shape[0]
        if x.shape[1:] != layer.input_shape:
            raise ShapeError(f"conv layer expects input {layer.input_shape}, got {x.shape[1:]}")
        h, wd, c = layer.input_shape
        k = layer.kernel
        cols = ad.take(x, im2col_index(n, h, wd, c, k))
        pre = ad.add(ad.matmul(cols, ad.transpose(ad.reshape(w, (layer.n_out, c * k * k)))), b)
    if layer.gate is not None:
        pre = ad.mul(pre, p["gate"])
    out = ACTIVATIONS[layer.activation](pre)
    if layer.kind == "conv2d":
        oh, ow, o = layer.output_shape
        out = ad.reshape(out, (x.shape[0], oh, ow, o))
    return out


def forward(model: Model, inputs, params: dict[tuple[int, str], Tensor] | None = None) -> Tensor:
    """Model output on a batch; ``params`` overrides stored arrays with tape leaves."""
    params = params or {}
    x = ad.as_tensor(inputs)
    expected = tuple(model.input_shape)
    if x.shape[1:] != expected and not (len(expected) == 1 and x.ndim > 2 and int(np.prod(x.shape[1:])) == expected[0]):
        raise ShapeError(f"model expects per-sample input {expected}, got batch shape {x.shape}")
    for i, layer in enumerate(model.layers):
        p = {}
        for name in ("weight", "bias", "gate"):
            arr = getattr(layer, name)
            if arr is not None:
                override = params.get((i, name))
                p[name] = Tensor(arr) if override is None else override
        x = _layer_forward(layer, x, p)
    return x


def loss_from_output(model: Model, out: Tensor, targets) -> Tensor:
    targets = np.asarray(targets)
    if model.head == "classification":
        if targets.ndim != 1:
            raise DataError(f"classification targets must be 1-d labels, got shape {targets.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= model.output_dim):
            raise DataError(f"label out of range [0, {model.output_dim}): min {targets.min()}, max {targets.max()}")
        return ad.softmax_cross_entropy(out, targets)
    t = targets.reshape(out.shape) if targets.size == out.size else targets
    return ad.mse(out, t)


def loss(model: Model, batch, params: dict[tuple[int, str], Tensor] | None = None) -> Tensor:
    """Mean cross-entropy (classification) or MSE (regression) on ``(inputs, targets)``."""
    inputs, targets = batch
    return loss_from_output(model, forward(model, inputs, params), targets)


def predict(model: Model, inputs) -> np.ndarray:
    with ad.no_grad():
        return forward(model, inputs).data


def loss_builder(model: Model, batch, keys: Sequence[tuple[int, str]], loss_scale: float = 1.0):
    """Closure mapping a list of leaf tensors (aligned with ``keys``) to the loss."""

    def build(leaves: list[Tensor]) -> Tensor:
        value = loss(model, batch, dict(zip(keys, leaves)))
        return value if loss_scale == 1.0 else ad.scale(value, loss_scale)

    return build


# -- flat parameter index ------------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    layer: int
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class ParamIndex:
    """Bijection between flat indices and (layer, tensor, offset) triples."""

    entries: tuple[IndexEntry, ...]

    @property
    def size(self) -> int:
        return self.entries[-1].stop if self.entries else 0

    @property
    def keys(self) -> list[tuple[int, str]]:
        return [(e.layer, e.name) for e in self.entries]

    def locate(self, flat: int) -> tuple[int, str, int]:
        for e in self.entries:
            if e.start <= flat < e.stop:
                return e.layer, e.name, flat - e.start
        raise IndexError(flat)

    def flat_index(self, layer: int, name: str, offset: int) -> int:
        for e in self.entries:
            if e.layer == layer and e.name == name:
                if not 0 <= offset < e.stop - e.start:
                    raise IndexError(offset)
                return e.start + offset
        raise KeyError((layer, name))

    def flatten(self, model: Model) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([model.get((e.layer, e.name)).reshape(-1) for e in self.entries])

    def split(self, vec: np.ndarray) -> list[np.ndarray]:
        return [np.asarray(vec[e.start : e.stop]).reshape(e.shape) for e in self.entries]

    def scatter(self, model: Model, vec: np.ndarray) -> None:
        if len(vec) != self.size:
            raise ShapeError(f"vector of length {len(vec)} vs index of size {self.size}")
        for e, part in zip(self.entries, self.split(vec)):
            model.set((e.layer, e.name), part)

    def segments(self) -> list[tuple[int, int, int]]:
        """(layer, start, stop) spans, merging adjacent tensors of one layer."""
        out: list[list[int]] = []
        for e in self.entries:
            if out and out[-1][0] == e.layer and out[-1][2] == e.start:
                out[-1][2] = e.stop
            else:
                out.append([e.layer, e.start, e.stop])
        return [tuple(s) for s in out]


def parameter_index_map(model: Model, include_bias: bool = True, names: Sequence[str] | None = None) -> ParamIndex:
    names = names or (("weight", "bias") if include_bias else ("weight",))
    entries, pos = [], 0
    for i, name in model.param_keys(names):
        shape = model.get((i, name)).shape
        n = int(np.prod(shape))
        entries.append(IndexEntry(i, name, pos, pos + n, shape))
        pos += n
    return ParamIndex(tuple(entries))


def mask_vector(model: Model, index: ParamIndex) -> np.ndarray:
    parts = [getattr(model.layers[e.layer], f"{e.name}_mask").reshape(-1) for e in index.entries]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def apply_mask(model: Model, keep: np.ndarray, index: ParamIndex) -> None:
    """Install a flat keep-vector as layer masks and zero the pruned values."""
    keep = np.asarray(keep, dtype=bool)
    if keep.size != index.size:
        raise ShapeError(f"mask of length {keep.size} vs index of size {index.size}")
    for e, part in zip(index.entries, index.split(keep)):
        layer = model.layers[e.layer]
        setattr(layer, f"{e.name}_mask", part.copy())
        setattr(layer, e.name, getattr(layer, e.name) * part)


def enforce_masks(model: Model) -> None:
    for layer in model.layers:
        layer.weight *= layer.weight_mask
        layer.bias *= layer.bias_mask


def weight_sparsity(model: Model) -> float:
    total = sum(layer.weight_mask.size for layer in model.layers)
    kept = sum(int(layer.weight_mask.sum()) for layer in model.layers)
    return float(Fraction(total - kept, total)) if total else 0.0
