"""Gradient flow, empirical NTK, and first/second-order Taylor probes.

Gradient flow (GF) is ||g||^2 for the loss gradient g. The empirical NTK is
J J^T for the Jacobian J of the flattened predictions (rows indexed by
(sample, output) pairs). By the chain rule g = J^T g_Y with g_Y the loss
gradient with respect to the predictions, hence GF = g_Y^T NTK g_Y.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Model, forward, loss_builder, loss_from_output

DEFAULT_PROBE = 32
MAX_NTK_ROWS = 2048


class NTKSizeError(ValueError):
    pass


@dataclass
class TaylorPoint:
    delta_norm: float
    prediction_error: float
    gradnorm_error: float


@dataclass
class DiagnosticsReport:
    gf_direct: float
    gf_via_ntk: float
    ntk_matrix: np.ndarray
    probe_size: int
    taylor_errors: list[TaylorPoint] = field(default_factory=list)

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.gf_direct), abs(self.gf_via_ntk))
        return 0.0 if scale == 0 else abs(self.gf_direct - self.gf_via_ntk) / scale

    @property
    def ntk_min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.ntk_matrix).min()) if self.ntk_matrix.size else 0.0

    def to_json(self) -> dict:
        return {
            "gf_direct": self.gf_direct,
            "gf_via_ntk": self.gf_via_ntk,
            "relative_gap": self.relative_gap,
            "probe_size": self.probe_size,
            "ntk_shape": list(self.ntk_matrix.shape),
            "ntk_trace": float(np.trace(self.ntk_matrix)),
            "ntk_min_eigenvalue": self.ntk_min_eigenvalue,
            "taylor_errors": [[p.delta_norm, p.prediction_error, p.gradnorm_error] for p in self.taylor_errors],
        }


def probe(batch, size: int = DEFAULT_PROBE):
    x, y = batch
    return x[:size], y[:size]


def _leaves(model: Model):
    keys = model.param_keys()
    return keys, [Tensor(model.get(k), requires_grad=True) for k in keys]


def gradient_flow(model: Model, batch, loss_scale: float = 1.0) -> float:
    """Squared norm of the loss gradient over all parameters."""
    keys = model.param_keys()
    _, grads = ad.value_and_grad(loss_builder(model, batch, keys, loss_scale), [model.get(k) for k in keys])
    return float(sum(np.sum(g * g) for g in grads))


def prediction_jacobian(model: Model, inputs, max_rows: int = MAX_NTK_ROWS) -> np.ndarray:
    """Rows: flattened (sample, output) pairs; columns: flattened parameters."""
    keys, leaves = _leaves(model)
    with ad.set_grad_enabled(True):
        out = forward(model, inputs, dict(zip(keys, leaves)))
    rows = out.size
    if rows > max_rows:
        raise NTKSizeError(f"NTK would have {rows}x{rows} entries (limit {max_rows} rows); use a smaller probe batch")
    jac = np.empty((rows, sum(leaf.size for leaf in leaves)))
    seed = np.zeros(out.shape)
    for r in range(rows):
        seed.flat[r] = 1.0
        gs = ad.grad(out, leaves, grad_output=Tensor(seed))
        seed.flat[r] = 0.0
        jac[r] = np.concatenate([g.data.ravel() for g in gs])
    return jac


def ntk(model: Model, batch, max_rows: int = MAX_NTK_ROWS) -> np.ndarray:
    inputs = batch[0] if isinstance(batch, tuple) else batch
    jac = prediction_jacobian(model, inputs, max_rows)
    return jac @ jac.T


def loss_output_gradient(model: Model, batch, loss_scale: float = 1.0) -> np.ndarray:
    """Gradient of the loss with respect to the flattened predictions."""
    inputs, targets = batch
    with ad.set_grad_enabled(True):
        out = forward(model, inputs)
        out_leaf = Tensor(out.data, requires_grad=True)
        value = ad.scale(loss_from_output(model, out_leaf, targets), loss_scale)
        (g,) = ad.grad(value, [out_leaf])
    return g.data.ravel()


def gf_ntk_identity(model: Model, batch, max_rows: int = MAX_NTK_ROWS, loss_scale: float = 1.0) -> tuple[float, float]:
    """(||g||^2, g_Y^T NTK g_Y) on the same batch, computed along separate paths."""
    kernel = ntk(model, batch, max_rows)
    gy = loss_output_gradient(model, batch, loss_scale)
    return gradient_flow(model, batch, loss_scale), float(gy @ kernel @ gy)


# -- Taylor probes -------------------------------------------------------------------


def _as_list(xs) -> list[np.ndarray]:
    return [np.asarray(x, dtype=np.float64) for x in (xs if isinstance(xs, (list, tuple)) else [xs])]


def prediction_taylor_error(fn: Callable[[list[Tensor]], Tensor], params, delta) -> float:
    """||f(p + d) - f(p) - J d|| for a tensor-valued ``fn`` of a parameter list.

    J d is obtained exactly as the derivative of <J^T u, d> with respect to u.
    """
    params, delta = _as_list(params), _as_list(delta)
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with ad.set_grad_enabled(True):
        out = fn(leaves)
        u = Tensor(np.zeros(out.shape), requires_grad=True)
        vjp = ad.grad(out, leaves, grad_output=u, create_graph=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ad.UnreachableParameterWarning)
            inner = ad.vdot(vjp, [Tensor(d) for d in delta])
            (jd,) = ad.grad(inner, [u]) if inner.requires_grad else (Tensor(np.zeros(out.shape)),)
    with ad.no_grad():
        shifted = fn([Tensor(p + d) for p, d in zip(params, delta)]).data
    return float(np.linalg.norm((shifted - out.data - jd.data).ravel()))


def gradnorm_taylor_error(loss_fn: Callable[[list[Tensor]], Tensor], params, delta) -> float:
    """| ||g(p + d)||^2 - ||g(p)||^2 - 2 (H g)^T d | for a scalar ``loss_fn``."""
    params, delta = _as_list(params), _as_list(delta)
    g, hg = ad.grad_and_hvp(loss_fn, params)
    _, g_shift = ad.value_and_grad(loss_fn, [p + d for p, d in zip(params, delta)])
    sq = lambda gs: sum(float(np.sum(x * x)) for x in gs)  # noqa: E731
    linear = 2.0 * sum(float(np.sum(h * d)) for h, d in zip(hg, delta))
    return abs(sq(g_shift) - sq(g) - linear)


def taylor_probe(model: Model, batch, direction: Sequence[np.ndarray] | None = None, steps: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4), seed: int = 0) -> list[TaylorPoint]:
    """Linearization errors of predictions and of ||g||^2 along ``steps * direction``.

    ``direction`` defaults to a seeded unit-norm random direction over all parameters.
    """
    keys = model.param_keys()
    params = [model.get(k) for k in keys]
    if direction is None:
        rng = np.random.default_rng(seed)
        direction = [rng.standard_normal(p.shape) for p in params]
    direction = _as_list(direction)
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
    direction = [d / norm for d in direction]

    inputs = batch[0]

    def predict_fn(leaves):
        return forward(model, inputs, dict(zip(keys, leaves)))

    loss_fn = loss_builder(model, batch, keys)
    points = []
    for s in steps:
        delta = [s * d for d in direction]
        points.append(TaylorPoint(float(s), prediction_taylor_error(predict_fn, params, delta), gradnorm_taylor_error(loss_fn, params, delta)))
    return points


def loglog_slope(norms: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(norm)."""
    return float(np.polyfit(np.log(norms), np.log(errors), 1)[0])


def diagnose(model: Model, batch, probe_size: int = DEFAULT_PROBE, steps: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4), seed: int = 0) -> DiagnosticsReport:
    small = probe(batch, probe_size)
    gf, via = gf_ntk_identity(model, small)
    return DiagnosticsReport(gf, via, ntk(model, small), len(small[0]), taylor_probe(model, small, steps=steps, seed=seed))
