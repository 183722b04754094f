"""Finite-difference verification of taped gradients.

A graph builder receives a dict of leaf tensors plus a fresh tape and
returns a scalar loss tensor. The checker compares the taped gradients
against central differences coordinate by coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from ..errors import NumericalError
from .tape import Tape, Tensor

GraphBuilder = Callable[[dict[str, Tensor], Tape], Tensor]


@dataclass
class ParamReport:
    """Worst finite-difference disagreement for one parameter group."""

    name: str
    max_rel_err: float
    worst_coord: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    params: dict[str, ParamReport]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.params.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def worst(self) -> ParamReport | None:
        if not self.params:
            return None
        return max(self.params.values(), key=lambda r: r.max_rel_err)


def _evaluate(build: GraphBuilder, arrays: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in arrays.items()}
    out = build(leaves, tape)
    val = float(out.value)
    if not np.isfinite(val):
        raise NumericalError("grad_check: forward value is not finite")
    return val


def grad_check(
    build: GraphBuilder,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    atol: float = 1e-8,
) -> GradCheckReport:
    """Compare taped gradients with central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-12) as the
    denominator. Coordinates where both sides are below atol count as
    agreement: central differences of an O(1) function carry rounding
    noise of roughly |f|*ulp/(2*eps) ~ 1e-11, so below that scale the
    "numeric" side is noise, not a derivative (this is what happens on
    parameters whose gradient is exactly zero, e.g. a bias that batch
    normalization cancels).
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in arrays.items()}
    out = build(leaves, tape)
    if not np.isfinite(out.value).all():
        raise NumericalError("grad_check: forward value is not finite")
    tape.backward(out)
    analytic = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for k, t in leaves.items()
    }

    reports: dict[str, ParamReport] = {}
    for name, base in arrays.items():
        flat = base.ravel()
        ana = analytic[name].ravel()
        worst = ParamReport(name, 0.0, -1, 0.0, 0.0)
        for i in range(flat.size):
            bumped = {k: (v.copy() if k == name else v) for k, v in arrays.items()}
            bumped[name].ravel()[i] = flat[i] + eps
            f_plus = _evaluate(build, bumped)
            bumped[name].ravel()[i] = flat[i] - eps
            f_minus = _evaluate(build, bumped)
            num = (f_plus - f_minus) / (2.0 * eps)
            if max(abs(ana[i]), abs(num)) < atol:
                continue
            denom = max(abs(ana[i]), abs(num), 1e-12)
            rel = abs(ana[i] - num) / denom
            if rel > worst.max_rel_err:
                worst = ParamReport(name, rel, i, float(ana[i]), float(num))
        reports[name] = worst
    return GradCheckReport(reports, tolerance)
