"""Adam with bias correction, usable for ascent or descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError


@dataclass
class AdamState:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def reset(self, n: int) -> None:
        self.step = 0
        self.m = np.zeros(n)
        self.v = np.zeros(n)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, maximize: bool = True) -> np.ndarray:
    """Return updated parameters and advance ``state`` in place.

    With ``maximize`` the update climbs ``grad``; the L2 term always pulls
    parameters toward zero (``-l2 * params`` is added to the ascent direction).
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericError(f"non-finite gradient ({bad} of {grad.size} entries) at adam step {state.step + 1}")
    if state.m is None or state.m.shape != params.shape:
        state.reset(params.size)
        state.m = state.m.reshape(params.shape)
        state.v = state.v.reshape(params.shape)

    # descent direction
    g = (-grad if maximize else grad) + state.l2 * params
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
