"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    worst_input: int = 0
    message: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.op_name}: max_rel={self.max_rel_error:.3e} "
            f"max_abs={self.max_abs_error:.3e}{(' ' + self.message) if self.message else ''}"
        )


def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[Tensor], k: int, eps: float) -> np.ndarray:
    x = inputs[k]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(*inputs).item()
        flat[i] = orig - eps
        fm = f(*inputs).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-8,
    op_name: str = "f",
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f`` against central differences.

    ``x`` may be one tensor or a sequence; every input is perturbed in turn
    and ``f`` is called as ``f(*inputs)``. Per coordinate the relative error
    is ``|a - n| / max(|a|, |n|, 1e-3 * scale)`` where ``scale`` is the
    largest gradient magnitude of that input, so coordinates whose gradient
    is negligible next to the rest are judged on the common scale. The check
    passes when the worst relative error is within ``tol`` or the worst
    absolute error is within ``abs_floor``.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_rel = 0.0
    max_abs = 0.0
    worst: tuple[int, ...] | None = None
    worst_input = 0
    for k, t in enumerate(inputs):
        numeric = numerical_gradient(f, inputs, k, eps)
        a = analytic[k]
        bad = ~(np.isfinite(a) & np.isfinite(numeric))
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            return GradCheckReport(op_name, float("inf"), float("inf"), False, idx, k, f"non-finite gradient at input {k} index {idx}")
        diff = np.abs(a - numeric)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), max(1e-3 * scale, 1e-300))
        rel = diff / denom
        if rel.size and rel.max() > max_rel:
            max_rel = float(rel.max())
            worst = tuple(int(i) for i in np.unravel_index(int(rel.argmax()), rel.shape))
            worst_input = k
        if diff.size:
            max_abs = max(max_abs, float(diff.max()))
    passed = max_rel <= tol or max_abs <= abs_floor
    return GradCheckReport(op_name, max_rel, max_abs, passed, worst, worst_input)
