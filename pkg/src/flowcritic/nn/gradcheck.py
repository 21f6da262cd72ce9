"""Finite-difference verification of tape gradients.

The reference gradient is a central difference with step h on every scalar
parameter entry, recomputing the loss from scratch each time. A parameter
entry passes when either the relative error against the analytic gradient is
below rtol or the absolute error is below atol (to cover entries whose true
gradient is zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import zero_grads
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_param: str
    passed: bool


def analytic_gradients(loss_fn, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else np.array(p.grad, dtype=np.float64)
    zero_grads(params)
    return grads


def finite_difference_gradients(loss_fn, params: dict[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def gradient_check(
    loss_fn,
    params: dict[str, Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> GradCheckReport:
    analytic = analytic_gradients(loss_fn, params)
    numeric = finite_difference_gradients(loss_fn, params, h=h)
    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    passed = True
    for name in params:
        a = analytic[name].reshape(-1)
        n = numeric[name].reshape(-1)
        abs_err = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        rel_err = abs_err / denom
        ok = (rel_err < rtol) | (abs_err < atol)
        if not ok.all():
            passed = False
        bad = float(rel_err.max()) if rel_err.size else 0.0
        if bad > max_rel:
            max_rel = bad
            worst = name
        max_abs = max(max_abs, float(abs_err.max()) if abs_err.size else 0.0)
    return GradCheckReport(max_rel_error=max_rel, max_abs_error=max_abs, worst_param=worst, passed=passed)
