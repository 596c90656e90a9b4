"""First-order optimizers over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str
    step_size: float
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def make_optimizer(kind: str, step_size: float, n_params: int) -> OptimizerState:
    return OptimizerState(kind, float(step_size), np.zeros(n_params), np.zeros(n_params))


def step(state: OptimizerState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Return the updated parameters; ``state`` buffers are advanced in place."""
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("optimizer buffers do not match theta")
    state.t += 1
    if state.kind == "sgd":
        return theta - state.step_size * grad
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1**state.t)
    vhat = state.v / (1 - state.beta2**state.t)
    return theta - state.step_size * mhat / (np.sqrt(vhat) + state.eps)
