"""Adam over a flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or infinity."""


@dataclass
class OptimizerState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)
        if self.m.shape != (self.n_params,) or self.v.shape != (self.n_params,):
            raise ValueError("moment accumulators must match the parameter count")


def optimizer_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Apply one Adam update to ``params`` in place and return it."""
    if params.shape != (state.n_params,) or grads.shape != params.shape:
        raise ValueError(
            f"shape mismatch: state {state.n_params}, params {params.shape}, grads {grads.shape}"
        )
    bad = ~np.isfinite(grads)
    if bad.any():
        where = np.flatnonzero(bad)
        raise NonFiniteGradient(
            f"non-finite gradient at step {state.step + 1}: {where.size} entries, "
            f"first indices {where[:8].tolist()}"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
