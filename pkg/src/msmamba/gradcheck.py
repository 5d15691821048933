"""Finite-difference verification of analytic gradients.

Runs in float64 only; 32-bit round-off swamps the O(h^2) truncation error of
central differences and makes the comparison meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from .tensor import ContractViolation, Tape, Tensor, backward, grad_of


@dataclass
class GradcheckReport:
    """Per-parameter worst relative errors from one gradcheck run."""

    max_rel_err: float = 0.0
    per_input: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _check_finite(name: str, arr: np.ndarray, failures: List[str]) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        failures.append(f"{name}: {bad} non-finite entries")


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] = None,
    max_entries: int = None,
    rng: np.random.Generator = None,
) -> GradcheckReport:
    """Compare tape gradients of a scalar-valued ``fn`` against central differences.

    Every input must be float64. ``max_entries`` caps how many coordinates of
    each input are probed (a random subset, for large tensors); by default all
    coordinates are checked. Relative error uses max(|analytic|, |numeric|, 1e-8)
    as the denominator.
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise ContractViolation(f"gradcheck input {i} must be float64, got {t.dtype}")
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]
    if rng is None:
        rng = np.random.default_rng(0)

    for t in inputs:
        t.grad = None  # drop grads accumulated by any earlier backward
    with Tape():
        loss = fn(*inputs)
        if loss.size != 1:
            raise ContractViolation("gradcheck target must be scalar")
        backward(loss)
    analytic = [grad_of(t).copy() for t in inputs]
    for t in inputs:
        t.grad = None

    report = GradcheckReport()
    for name, t, g in zip(names, inputs, analytic):
        _check_finite(f"{name}.grad", g, report.failures)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            fp = _eval(fn, inputs)
            flat[j] = orig - h
            fm = _eval(fn, inputs)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(gflat[j]), abs(numeric), 1e-8)
            rel = abs(gflat[j] - numeric) / denom
            if rel > worst:
                worst = rel
            if rel > tol:
                report.failures.append(
                    f"{name}[{j}]: analytic={gflat[j]:.6e} numeric={numeric:.6e} rel={rel:.3e}"
                )
        report.per_input[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


def _eval(fn, inputs) -> float:
    # no tape open here, so nothing is recorded
    out = fn(*inputs)
    return float(out.data.reshape(()))
