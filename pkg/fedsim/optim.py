"""
SGD and Adam update rules.

The step functions are pure: Adam's moments travel in an explicit AdamState.
The Optimizer wrappers hold that state for the duration of one training run
(one client's local update, or one centralized run).
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .config import OptimizerConfig
from .errors import ManifestMismatchError, NonFiniteError
from .model import ParameterVector


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, size: int, config: OptimizerConfig) -> "AdamState":
        return cls(
            m=np.zeros(size),
            v=np.zeros(size),
            t=0,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
        )


def _checked(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("optimizer step produced non-finite parameters")
    return values


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float) -> ParameterVector:
    """Plain gradient descent: params - lr * grad."""
    params.check_compatible(grad)
    return params.with_values(_checked(params.values - lr * grad.values))


def adam_step(
    state: AdamState, params: ParameterVector, grad: ParameterVector
) -> Tuple[AdamState, ParameterVector]:
    """
    One bias-corrected Adam update.

    Args:
        state: moments and step counter before the update
        params: current parameters
        grad: gradient at params

    Returns:
        (state with t + 1, updated parameters)
    """
    params.check_compatible(grad)
    if state.m.shape != params.values.shape:
        raise ManifestMismatchError(
            f"Adam state has {state.m.size} entries, parameters have {len(params)}"
        )
    g = grad.values
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    denom = np.sqrt(v_hat) + state.epsilon
    # zero gradient with epsilon=0 leaves 0/0; such coordinates do not move
    step = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0.0)
    new_values = _checked(params.values - state.lr * step)
    new_state = AdamState(
        m=m,
        v=v,
        t=t,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_state, params.with_values(new_values)


class Optimizer(ABC):
    """Stateful wrapper used by the training loops."""

    @abstractmethod
    def step(self, params: ParameterVector, grad: ParameterVector) -> ParameterVector:
        """Apply one update and return the new parameters."""


class SGDOptimizer(Optimizer):
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParameterVector, grad: ParameterVector) -> ParameterVector:
        return sgd_step(params, grad, self.lr)


class AdamOptimizer(Optimizer):
    def __init__(self, size: int, config: OptimizerConfig):
        self.state = AdamState.fresh(size, config)

    def step(self, params: ParameterVector, grad: ParameterVector) -> ParameterVector:
        self.state, params = adam_step(self.state, params, grad)
        return params


def make_optimizer(config: OptimizerConfig, size: int) -> Optimizer:
    """Build a fresh optimizer for a parameter vector of the given length."""
    if config.name == "sgd":
        return SGDOptimizer(config.lr)
    return AdamOptimizer(size, config)
