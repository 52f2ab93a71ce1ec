"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and central-difference grads."""

    eps: float
    tol: float
    max_rel_err: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_err.values())

    def failures(self) -> list[str]:
        return [name for name, err in self.max_rel_err.items() if err > self.tol]


def grad_check(
    fn: LossFn,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences, elementwise.

    ``fn`` must map a dict of tensors (tracked or constant) to a scalar tensor.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    tape = Tape()
    tracked = {name: tape.leaf(np.asarray(v, dtype=np.float64)) for name, v in params.items()}
    loss = fn(tracked)
    tape.backward(loss)
    analytic = {name: tape.grad(t) for name, t in tracked.items()}

    def eval_at(values: Mapping[str, np.ndarray]) -> float:
        consts = {name: Tensor.const(v) for name, v in values.items()}
        return float(fn(consts).values)

    base = {name: np.asarray(v, dtype=np.float64).copy() for name, v in params.items()}
    max_rel_err: dict[str, float] = {}
    for name, arr in base.items():
        a = analytic[name]
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_at(base)
            flat[i] = orig - eps
            down = eval_at(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            denom = max(abs(ai), abs(numeric), 1e-8)
            worst = max(worst, abs(ai - numeric) / denom)
        max_rel_err[name] = worst
    return GradCheckReport(eps=eps, tol=tol, max_rel_err=max_rel_err)
