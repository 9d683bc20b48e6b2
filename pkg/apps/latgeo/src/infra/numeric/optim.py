"""Adam with bias correction and the warmup/inverse-sqrt learning-rate schedule."""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.exceptions import ContractError, TrainingDivergenceError
from src.infra.numeric.module import Module
from src.infra.numeric.tensor import Tensor

logger = logging.getLogger(__name__)


class OptimizerState(BaseModel):
    """Per-parameter moments plus the shared step counter."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: dict[str, np.ndarray] = Field(default_factory=dict, description="First moments by parameter name")
    v: dict[str, np.ndarray] = Field(default_factory=dict, description="Second moments by parameter name")
    t: int = Field(default=0, ge=0, description="Number of completed steps")
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.98, ge=0, lt=1)
    eps: float = Field(default=1e-9, ge=0)


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), peaking at step == warmup."""
    if step < 1 or d_model < 1 or warmup < 1:
        raise ContractError(f"noam_lr needs positive arguments, got step={step}, d_model={d_model}, warmup={warmup}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None)))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def adam_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    max_grad_norm: Optional[float] = None,
) -> OptimizerState:
    """
    One bias-corrected Adam update on every parameter, in place.

    Parameters without a gradient are treated as having a zero gradient.

    Raises:
        ContractError: If lr is not positive
        TrainingDivergenceError: If any gradient is NaN or infinite
    """
    if lr <= 0:
        raise ContractError(f"Learning rate must be positive, got {lr}")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergenceError("Non-finite gradient", parameter=name)
    if max_grad_norm is not None:
        clip_grad_norm(params, max_grad_norm)

    state.t += 1
    b1, b2, eps, t = state.beta1, state.beta2, state.eps, state.t
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"Gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p.data)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p.data)) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v

        m_hat = m / correction1
        denom = np.sqrt(v / correction2) + eps
        # Zero moments with eps == 0 give 0/0; those entries do not move
        step = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
        p.data = p.data - lr * step

    return state


class Adam:
    """Adam bound to a module's named parameters."""

    def __init__(
        self,
        module: Module,
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-9,
        max_grad_norm: Optional[float] = None,
    ):
        self.module = module
        self.max_grad_norm = max_grad_norm
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        self.module.zero_grad()

    def step(self, lr: float) -> None:
        adam_step(dict(self.module.named_parameters()), self.state, lr, self.max_grad_norm)
        logger.debug(f"Adam step {self.state.t} at lr={lr:.3e}")
