"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of differentiable ``Tensor`` ops, so
running ``grad(..., create_graph=True)`` records the backward pass itself and
a second differentiation yields exact Hessian-vector products.

Nodes receive a monotonically increasing id at creation. Sorting reachable
nodes by id gives the topological order of the tape: an op can only consume
tensors that already exist.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import warnings
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operands are not conformable for the requested op."""


class ContractError(ValueError):
    """A differentiation call violated its preconditions."""


class UnsupportedSecondOrderError(RuntimeError):
    """The loss uses an op whose backward pass is not itself differentiable."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class UnreachableParameterWarning(UserWarning):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """An n-d float64 array that may participate in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_second_order", "_id", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._second_order = True
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self) -> Tensor:
        return mean(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str, second_order: bool = True) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward
        out._second_order = second_order
    else:
        out.op = op
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not conformable") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a non-differentiable constant scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = (a.data > 0).astype(np.float64)
    return _make(a.data * on, (a,), lambda g: (mul(g, Tensor(on)),), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), (a,), backward, "tanh")
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    out = _make(value, (a,), backward, "exp")
    return out


def identity(a) -> Tensor:
    return as_tensor(a)


# -- shape ops -------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_(a), 1.0 / a.size)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} cannot broadcast to {shape}") from None
    return _make(data, (a,), lambda g: (sum_to(g, a.shape),), "broadcast_to")


def sum_to(a, shape) -> Tensor:
    """Adjoint of broadcasting: sum ``a`` down to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    return _make(data, (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


def take(a, index: np.ndarray) -> Tensor:
    """Gather from the flattened ``a``; output has ``index.shape``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    return _make(a.data.reshape(-1)[index], (a,), lambda g: (scatter_add(g, index, a.shape),), "take")


def scatter_add(g, index: np.ndarray, shape) -> Tensor:
    """Adjoint of ``take``: accumulate ``g`` into a zero array of ``shape``."""
    g = as_tensor(g)
    flat = np.zeros(int(np.prod(shape)), dtype=np.float64)
    np.add.at(flat, index.reshape(-1), g.data.reshape(-1))
    return _make(flat.reshape(shape), (g,), lambda h: (take(h, index),), "scatter_add")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- losses ----------------------------------------------------------------------


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax of a 2-d array."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"log_softmax: expected (batch, classes), got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = None

    def backward(g):
        return (sub(g, mul(exp(out), sum_(g, axis=1, keepdims=True))),)

    out = _make(data, (a,), backward, "log_softmax")
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    picked = take(log_softmax(logits), np.arange(n) * k + labels.astype(np.intp))
    return scale(sum_(picked), -1.0 / n)


def mse(pred, target) -> Tensor:
    """Mean squared error over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


def first_order_op(fn: Callable[[np.ndarray], np.ndarray], vjp: Callable[[np.ndarray, np.ndarray], np.ndarray], name: str):
    """Wrap a numpy function whose vector-Jacobian product is numpy-only.

    Gradients flow through it, but its backward is opaque to the tape, so any
    second-order request that reaches it raises ``UnsupportedSecondOrderError``.
    """

    def op(a) -> Tensor:
        a = as_tensor(a)

        def backward(g):
            return (Tensor(vjp(a.data, g.data)),)

        return _make(np.asarray(fn(a.data), dtype=np.float64), (a,), backward, name, second_order=False)

    return op


# -- differentiation -----------------------------------------------------------


def tape(output: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``output``, inputs before consumers."""
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id)


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` is given. Inputs the
    output does not depend on receive zeros and an
    ``UnreachableParameterWarning``. With ``create_graph`` the returned
    tensors are themselves on the tape.
    """
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"grad: output must be scalar, got shape {output.shape}")
        grad_output = Tensor(np.ones_like(output.data))
    grad_output = as_tensor(grad_output)
    if grad_output.shape != output.shape:
        raise ContractError(f"grad: grad_output {grad_output.shape} vs output {output.shape}")

    nodes = tape(output)
    grads: dict[int, Tensor] = {id(output): grad_output}
    with set_grad_enabled(create_graph):
        for node in reversed(nodes):
            if node.is_leaf:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            if create_graph and not node._second_order:
                raise UnsupportedSecondOrderError(f"op '{node.op}' has no differentiable backward")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    out = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            warnings.warn(f"input {x!r} does not reach the output; gradient is zero", UnreachableParameterWarning, stacklevel=2)
            g = Tensor(np.zeros_like(x.data))
        out.append(g)
    return out


def vdot(a: Sequence[Tensor], b: Sequence[Tensor]) -> Tensor:
    """Sum of elementwise products over two aligned lists of tensors."""
    terms = [sum_(mul(x, y)) for x, y in zip(a, b)]
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def hvp(loss_builder: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor], v: Sequence[np.ndarray | Tensor]) -> list[np.ndarray]:
    """Exact Hessian-vector product H(params) @ v by nested differentiation.

    ``loss_builder`` maps a list of leaf tensors (same shapes as ``params``)
    to a scalar loss. ``v`` is treated as a constant direction.
    """
    leaves = [Tensor(p.data if isinstance(p, Tensor) else p, requires_grad=True) for p in params]
    vs = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in v]
    for p, d in zip(leaves, vs):
        if p.shape != d.shape:
            raise ShapeError(f"hvp: direction {d.shape} vs parameter {p.shape}")
    with set_grad_enabled(True):
        loss = loss_builder(leaves)
        gs = grad(loss, leaves, create_graph=True)
        inner = vdot(gs, [Tensor(d) for d in vs])
        if not inner.requires_grad:
            return [np.zeros_like(d) for d in vs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnreachableParameterWarning)
            hv = grad(inner, leaves)
    return [h.data for h in hv]


def value_and_grad(loss_builder: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with set_grad_enabled(True):
        loss = loss_builder(leaves)
        gs = grad(loss, leaves)
    return loss.item(), [g.data for g in gs]


def grad_and_hvp(loss_builder: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradient g and H @ g from a single forward pass."""
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with set_grad_enabled(True):
        loss = loss_builder(leaves)
        gs = grad(loss, leaves, create_graph=True)
        g_const = [Tensor(g.data) for g in gs]
        inner = vdot(gs, g_const)
        if not inner.requires_grad:
            return [g.data for g in g_const], [np.zeros_like(g.data) for g in g_const]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnreachableParameterWarning)
            hg = grad(inner, leaves)
    return [g.data for g in g_const], [h.data for h in hg]


# -- finite-difference oracles (tests only) --------------------------------------


def fd_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        out[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return out


def fd_hvp(g: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """(g(theta + eps v) - g(theta - eps v)) / 2 eps for a flat gradient function."""
    theta = np.asarray(theta, dtype=np.float64)
    return (g(theta + eps * v) - g(theta - eps * v)) / (2 * eps)
