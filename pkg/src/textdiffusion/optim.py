"""Adam with bias correction and a warmup-then-linear-decay learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericsError, Tensor

__all__ = ["OptimizerState", "Adam", "effective_lr"]


def effective_lr(step: int, base_lr: float, warmup_steps: int, max_steps: int) -> float:
    """Learning rate at `step` (1-based): linear warmup, then linear decay to 0.

    During warmup the rate is base_lr * step / warmup_steps; afterwards it
    decays linearly so it reaches 0 at max_steps.  When max_steps does not
    exceed warmup_steps the decay leg is skipped.
    """
    if step < 1:
        raise NumericsError(f"step counter must be >= 1, got {step}")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if max_steps <= warmup_steps:
        return base_lr
    remaining = max(0, max_steps - step)
    return base_lr * remaining / (max_steps - warmup_steps)


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared step counter."""

    base_lr: float
    warmup_steps: int
    max_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Standard Adam over a named parameter dict.

    Gradients must be populated on every parameter before ``step``; a step
    with a missing or non-finite gradient is rejected naming the parameter.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        base_lr: float,
        warmup_steps: int,
        max_steps: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.state = OptimizerState(
            base_lr=base_lr,
            warmup_steps=warmup_steps,
            max_steps=max_steps,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )
        for name, tensor in params.items():
            self.state.first_moment[name] = np.zeros_like(tensor.data)
            self.state.second_moment[name] = np.zeros_like(tensor.data)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self) -> float:
        """Apply one Adam update; returns the effective learning rate used."""
        state = self.state
        if state.step_count >= state.max_steps:
            raise NumericsError(
                f"optimizer exhausted: step {state.step_count} >= max_steps {state.max_steps}"
            )
        state.step_count += 1
        t = state.step_count
        lr = effective_lr(t, state.base_lr, state.warmup_steps, state.max_steps)
        bias1 = 1.0 - state.beta1**t
        bias2 = 1.0 - state.beta2**t
        for name, tensor in self.params.items():
            grad = tensor.grad
            if grad is None:
                raise NumericsError(f"parameter '{name}' has no gradient")
            if not np.all(np.isfinite(grad)):
                raise NumericsError(f"parameter '{name}' has a non-finite gradient")
            m = state.first_moment[name]
            v = state.second_moment[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
            tensor.data = tensor.data - (lr * update).astype(tensor.data.dtype)
        return lr
