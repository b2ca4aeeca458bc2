"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradcheckReport:
    max_rel_error: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error)

    def __str__(self):
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        return f"gradcheck {'pass' if self.passed else 'FAIL'} (tol {self.tol:g}): [{errs}]"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, loss_scale: float) -> float:
    # Entries far below the tensor's largest gradient, or below the
    # round-off level of the differences (~1e-11 * |loss|), are compared on
    # that scale instead of their own.
    peak = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)))
    floor = max(1e-3 * peak, 1e-6 * max(1.0, loss_scale))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def gradcheck(
    closure: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Compare tape gradients of ``closure(*tensors)`` with central differences.

    ``closure`` must be deterministic (seed any dropout inside it).
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck requires 64-bit tensors")
        t.data = np.ascontiguousarray(t.data)
    with Tape() as tape:
        tape.watch(*tensors)
        loss = closure(*tensors)
    tape.backward(loss)
    loss_scale = abs(float(loss.data))
    analytic = [t.grad.copy() for t in tensors]

    errors = []
    for t, a in zip(tensors, analytic):
        numeric = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(closure(*tensors).data)
            flat[k] = orig - step
            down = float(closure(*tensors).data)
            flat[k] = orig
            nflat[k] = (up - down) / (2 * step)
        errors.append(_relative_error(a, numeric, loss_scale))
    return GradcheckReport(errors, tol)
