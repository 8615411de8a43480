"""Adam optimizer with bias correction.

Defaults follow the training recipe: lr 1e-4, betas (0.9, 0.999),
eps 1e-8. Non-finite gradients skip the update and are reported to the
caller so the training loop can log them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamState", "adam_step", "AdamOptimizer"]


@dataclass
class AdamState:
    """Per-parameter moment estimates; ``step`` increases by 1 per update."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, param: Tensor, grad: np.ndarray) -> bool:
    """Apply one Adam update in place. Returns False if skipped.

    A non-finite gradient leaves the parameter and moments untouched
    (the step counter still advances so schedules stay aligned).
    """
    grad = np.asarray(grad)
    if grad.shape != param.data.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match "
                         f"parameter shape {param.data.shape}")
    if state.m is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    state.step += 1
    if not np.all(np.isfinite(grad)):
        return False
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


class AdamOptimizer:
    """Adam over a named parameter dict, one AdamState per entry."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.states = {name: AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for name in params}

    def step(self) -> list[str]:
        """Update every parameter with a gradient; returns skipped names."""
        skipped = []
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not adam_step(self.states[name], p, p.grad):
                skipped.append(name)
        return skipped

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
