"""Compute-aware training objective.

The penalty couples the retention fraction to downstream cost: a
quadratic term for attention time, a linear term for KV memory (both
normalized by the cap n_max), and a quadratic prior pulling rho toward
a neutral mean.  Gradients in rho are analytic.  An optional dual
variable enforces a dataset-level budget target by standard projected
ascent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var, custom_op
from .errors import ParameterError


@dataclass(frozen=True)
class PenaltyWeights:
    lambda_t: float = 0.1
    lambda_m: float = 0.17
    lambda_s: float = 0.05
    rho_bar: float = 0.275

    def __post_init__(self) -> None:
        if min(self.lambda_t, self.lambda_m, self.lambda_s) < 0:
            raise ParameterError("penalty weights must be nonnegative")
        if not (0.0 < self.rho_bar < 1.0):
            raise ParameterError(f"rho_bar must lie in (0, 1), got {self.rho_bar}")


@dataclass(frozen=True)
class DualState:
    """Multiplier state for the optional budget constraint rho*M <= n_bar."""

    alpha: float = 0.0
    n_bar: int = 256
    step: float = 1e-3

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ParameterError(f"dual variable must be nonnegative, got {self.alpha}")
        if self.step <= 0:
            raise ParameterError(f"ascent step must be positive, got {self.step}")


def compute_penalties(
    rho: float, m: int, n_max: int, w: PenaltyWeights
) -> tuple[float, float]:
    """Penalty value and its analytic d/drho.

    value = lt*(rho*M)^2/n_max^2 + lm*rho*M/n_max + ls*(rho - rho_bar)^2
    grad  = 2*lt*rho*M^2/n_max^2 + lm*M/n_max + 2*ls*(rho - rho_bar)
    """
    if m < 1 or n_max < 1:
        raise ParameterError(f"token count and cap must be >= 1, got M={m}, n_max={n_max}")
    value = (
        w.lambda_t * (rho * m) ** 2 / n_max**2
        + w.lambda_m * rho * m / n_max
        + w.lambda_s * (rho - w.rho_bar) ** 2
    )
    grad = (
        2.0 * w.lambda_t * rho * m**2 / n_max**2
        + w.lambda_m * m / n_max
        + 2.0 * w.lambda_s * (rho - w.rho_bar)
    )
    return value, grad


def penalty_var(rho: Var, m: int, n_max: int, w: PenaltyWeights) -> Var:
    """Penalty as a tape node; backward applies the analytic gradient."""
    value, grad = compute_penalties(rho.item(), m, n_max, w)

    def backward(g):
        return (np.array([[g[0, 0] * grad]]),)

    return custom_op(np.array([[value]]), (rho,), backward)


def dual_penalty(rho: float, m: int, dual: DualState) -> float:
    """alpha * (rho*M - n_bar), the Lagrangian term for the budget target."""
    return dual.alpha * (rho * m - dual.n_bar)


def dual_ascent(dual: DualState, rho: float, m: int) -> DualState:
    """Projected ascent: alpha <- max(0, alpha + step*(rho*M - n_bar))."""
    return replace(dual, alpha=max(0.0, dual.alpha + dual.step * (rho * m - dual.n_bar)))


def dual_penalty_var(rho: Var, m: int, dual: DualState) -> Var:
    # linear in rho: gradient alpha*M
    return ad.add_const(ad.smul(rho, dual.alpha * m), -dual.alpha * dual.n_bar)


def total_loss(
    task_loss: Var,
    rho: Var,
    m: int,
    n_max: int,
    w: PenaltyWeights,
    dual: DualState | None = None,
) -> Var:
    """Task loss plus compute penalties (plus the dual term when given).

    The task loss is a pluggable hook: any scalar tape variable works,
    and its gradients flow to whatever produced it while the penalty
    gradient flows to the budget head through rho.
    """
    out = ad.add(task_loss, penalty_var(rho, m, n_max, w))
    if dual is not None:
        out = ad.add(out, dual_penalty_var(rho, m, dual))
    return out
