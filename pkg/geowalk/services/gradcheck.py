"""
Gradient check - central finite differences against autograd
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Tuple

import torch

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    max_relative_error: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_relative_error.values())

    @property
    def worst(self) -> Tuple[str, float]:
        if not self.max_relative_error:
            return "", 0.0
        name = max(self.max_relative_error, key=self.max_relative_error.get)
        return name, self.max_relative_error[name]


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1.0)
    return float(((analytic - numeric).abs() / scale).max()) if analytic.numel() else 0.0


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[Tuple[str, torch.Tensor]],
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GradCheckResult:
    """
    Compare autograd gradients of the scalar loss_fn() with central differences,
    one entry at a time. Parameters should be float64 leaf tensors.
    The relative error is measured against max(|g|, |g_num|, 1).
    """
    params = [(name, p) for name, p in params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)

    errors = {}
    with torch.no_grad():
        for (name, p), grad in zip(params, analytic):
            grad = torch.zeros_like(p) if grad is None else grad
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            flat_numeric = numeric.view(-1)
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + h
                plus = float(loss_fn())
                flat[i] = original - h
                minus = float(loss_fn())
                flat[i] = original
                flat_numeric[i] = (plus - minus) / (2 * h)
            errors[name] = _relative_error(grad, numeric)
    return GradCheckResult(errors, tolerance)
