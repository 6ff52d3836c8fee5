"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from collections.abc import Callable

import numpy as np


def finite_diff_check(
    loss_and_grad: Callable[[], tuple[float, np.ndarray]],
    theta: np.ndarray,
    eps: float = 1e-4,
    indices: np.ndarray | None = None,
) -> float:
    """Max over parameters of ``|analytic - numeric| / max(1e-8, |numeric|)``.

    ``theta`` is perturbed in place (and restored); ``loss_and_grad`` must read
    the current values of ``theta`` and return the loss and its gradient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = loss_and_grad()
    analytic = np.array(analytic, dtype=np.float64, copy=True)
    if indices is None:
        indices = np.arange(theta.size)
    worst = 0.0
    for i in indices:
        old = theta[i]
        theta[i] = old + eps
        f_plus = loss_and_grad()[0]
        theta[i] = old - eps
        f_minus = loss_and_grad()[0]
        theta[i] = old
        numeric = (f_plus - f_minus) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst


def check_module(module, x: np.ndarray, eps: float = 1e-4, seed: int = 0) -> float:
    """Finite-difference check of a module's parameter gradient.

    The scalar loss is a fixed random projection of the module output, which
    keeps every gradient component at order one.
    """
    out = module.forward(x)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    params = module.params

    def loss_and_grad():
        y = module.forward(x)
        params.grad[...] = 0.0
        module.backward(proj)
        return float((proj * y).sum()), params.grad[module._start:module._stop]

    return finite_diff_check(loss_and_grad, params.data[module._start:module._stop], eps)
