"""
Adam with bias correction over lists of Tensors.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import NonFiniteError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamState(BaseModel):
    """Moment buffers, shaped like their parameters, plus the step counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = Field(0, ge=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **constants) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **constants,
        )


def adam_update(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    batch_id: Optional[int] = None,
) -> AdamState:
    """
    Apply one Adam step in place.

    The update is all-or-nothing: when any gradient is NaN or infinite, no
    parameter and no buffer changes.

    Args:
        params: Tensors to update
        grads: Gradients, one per parameter
        state: Moment buffers for ``params``
        lr: Learning rate
        batch_id: Reported in the error when the step is rejected

    Returns:
        The same ``state``, advanced by one step

    Raises:
        ShapeError: If counts or shapes disagree
        NonFiniteError: If a gradient is not finite
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment buffers"
        )
    for index, (param, grad, m) in enumerate(zip(params, grads, state.m)):
        if grad.shape != param.shape or m.shape != param.shape:
            raise ShapeError(
                f"parameter {index}: shape {param.shape}, gradient {grad.shape}, moment {m.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {index}", batch_id)

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Optimiser bound to a fixed list of parameters; reads their ``grad`` buffers."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros_like(self.params, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self, batch_id: Optional[int] = None) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adam_update(self.params, grads, self.state, self.lr, batch_id)
