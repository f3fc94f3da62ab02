"""Finite-difference verification of analytic gradients.

The oracle is the central difference (f(x+eps) - f(x-eps)) / (2 eps),
evaluated elementwise while the rest of the computation is rebuilt from
scratch, so it is independent of the tape's backward rules.  Checks should
run in float64: float32 rounding swamps the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward

__all__ = ["BlockReport", "GradientCheckReport", "numerical_gradient", "check_gradients"]


@dataclass
class BlockReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool


@dataclass
class GradientCheckReport:
    tolerance: float
    blocks: list[BlockReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    def failures(self) -> list[BlockReport]:
        return [b for b in self.blocks if not b.passed]

    def __str__(self) -> str:
        lines = [
            f"  {b.name}: max_rel_err={b.max_rel_err:.3e} "
            f"{'ok' if b.passed else 'FAIL'}"
            for b in self.blocks
        ]
        status = "passed" if self.passed else "FAILED"
        return f"gradient check {status} (tol {self.tolerance:g})\n" + "\n".join(lines)


def numerical_gradient(
    loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of `loss_fn` w.r.t. every element of `param`.

    `loss_fn` must recompute the loss from current parameter values each
    call; `param.data` is perturbed in place and restored.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    grad_flat = grad.ravel()
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + eps
        f_plus = float(loss_fn().data)
        flat[j] = original - eps
        f_minus = float(loss_fn().data)
        flat[j] = original
        grad_flat[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradientCheckReport:
    """Compare tape gradients of a scalar loss against central differences.

    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|),
    reported per parameter block; the report carries failures rather than
    raising.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss = loss_fn()
    backward(loss)
    report = GradientCheckReport(tolerance=tolerance)
    for name, tensor in params.items():
        analytic = tensor.grad
        if analytic is None:
            analytic = np.zeros_like(tensor.data)
        numeric = numerical_gradient(loss_fn, tensor, eps=eps)
        abs_err = np.abs(analytic - numeric)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = abs_err / denom
        max_rel = float(rel.max()) if rel.size else 0.0
        max_abs = float(abs_err.max()) if abs_err.size else 0.0
        report.blocks.append(
            BlockReport(name=name, max_rel_err=max_rel, max_abs_err=max_abs, passed=max_rel < tolerance)
        )
    return report
