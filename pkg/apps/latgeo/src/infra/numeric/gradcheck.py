"""Central finite-difference oracle for reverse-mode gradients."""

import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field

from src.infra.numeric.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

LossFn = Callable[[], Tensor]

SCALE_FLOOR = 1e-6


class GradCheckResult(BaseModel):
    name: str = Field(..., description="Tensor or op under test")
    max_rel_error: float = Field(..., ge=0)
    coordinates: int = Field(..., ge=0, description="Number of coordinates compared")
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    max|a - n| / max(max|a|, max|n|, SCALE_FLOOR), measured over the whole tensor.

    The floor sits above central-difference roundoff (about 1e-11 for O(1) losses),
    so tensors with vanishing gradients compare on absolute error.
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_gradient(
    loss_fn: LossFn,
    target: Tensor,
    h: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of loss_fn w.r.t. target at the given flat coordinates."""
    flat = target.data.reshape(-1)
    coords = np.arange(flat.size) if coords is None else coords
    grads = np.zeros(len(coords))
    with no_grad():
        for k, idx in enumerate(coords):
            original = flat[idx]
            flat[idx] = original + h
            plus = loss_fn().item()
            flat[idx] = original - h
            minus = loss_fn().item()
            flat[idx] = original
            grads[k] = (plus - minus) / (2.0 * h)
    return grads


def check_gradients(
    loss_fn: LossFn,
    inputs: dict[str, Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[GradCheckResult]:
    """
    Compare backward() against finite differences for each named input.

    Args:
        loss_fn: rebuilds the scalar loss from the current input data
        inputs: tensors (requires_grad=True) to differentiate against
        max_coords: if set, sample at most this many coordinates per tensor
        rng: generator for coordinate sampling

    Returns:
        One result per input, in insertion order
    """
    for t in inputs.values():
        t.zero_grad()
    backward(loss_fn())

    results: list[GradCheckResult] = []
    for name, tensor in inputs.items():
        analytic = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)).reshape(-1)
        coords = np.arange(tensor.size)
        if max_coords is not None and tensor.size > max_coords:
            sampler = rng or np.random.default_rng(0)
            coords = np.sort(sampler.choice(tensor.size, size=max_coords, replace=False))
        numeric = numeric_gradient(loss_fn, tensor, h, coords)
        err = relative_error(analytic[coords], numeric)
        results.append(
            GradCheckResult(name=name, max_rel_error=err, coordinates=len(coords), passed=err < tolerance)
        )
        logger.debug(f"gradcheck {name}: rel err {err:.2e} over {len(coords)} coords")
    return results
