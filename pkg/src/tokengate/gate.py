"""Keep/drop gating of visual tokens.

Training uses a differentiable gate: a scalar threshold t is solved so
the tempered sigmoid keep-probabilities sum to the target budget rho*M,
then a two-class Gumbel straight-through sample turns the per-token
margins into hard keep decisions whose expectation matches the budget.
Inference takes the hard Top-n by relevance.

The logits fed to the Gumbel sampler are pre-scaled by 1/tau_s so the
hard sample's keep probability equals sigmoid((r_i - t)/tau_s) — the
same quantity the threshold equation controls.  Without that scaling
the expected kept count would not match rho*M for tau_s != 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var, sigmoid_values, custom_op
from .errors import ParameterError

logger = logging.getLogger(__name__)

# Guard under which the gate counts as saturated and implicit gradients
# are clamped to zero instead of dividing by ~0.
SATURATION_GUARD = 1e-12

# Convergence criterion on the Newton step, well inside the 1e-9
# agreement required against a bisection oracle.
STEP_TOL = 1e-12


@dataclass(frozen=True)
class GateConfig:
    """Gate hyperparameters; tau_s and the iteration budget follow the
    reference training configuration."""

    tau_s: float = 0.5
    newton_iters: int = 6
    residual_tol: float = 1e-6
    clamp_margin: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tau_s <= 0:
            raise ParameterError(f"gate temperature must be positive, got {self.tau_s}")
        if self.newton_iters < 1:
            raise ParameterError(f"newton_iters must be >= 1, got {self.newton_iters}")
        if self.residual_tol <= 0:
            raise ParameterError(f"residual_tol must be positive, got {self.residual_tol}")


@dataclass
class KeepMask:
    """Binary keep decisions with the kept indices in ascending order."""

    keep: Array
    indices: Array
    noise: Array | None = None  # frozen Gumbel pair (2, M), training only

    def __post_init__(self) -> None:
        if self.keep.sum() < 1:
            raise ParameterError("keep mask must retain at least one token")
        if np.any(np.diff(self.indices) <= 0):
            raise ParameterError("kept indices must be strictly ascending")

    @property
    def count(self) -> int:
        return int(self.indices.size)


def _as_relevance(r) -> Array:
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size < 1:
        raise ParameterError("relevance vector must be nonempty")
    return r


def _keep_sum(r: Array, t: float, tau: float) -> float:
    return float(sigmoid_values((r - t) / tau).sum())


def find_threshold(
    r, rho: float, tau_s: float, cfg: GateConfig = GateConfig()
) -> tuple[float, float]:
    """Solve sum_i sigmoid((r_i - t)/tau_s) = rho*M for the threshold t.

    Newton iterations start at the median; iterates are clamped to
    [min r - margin*tau, max r + margin*tau] and a bisection fallback
    (guaranteed by strict monotonicity of the residual) finishes the job
    whenever Newton fails to converge tightly.  Returns (t, |residual|).
    """
    r = _as_relevance(r)
    m = r.size
    if not (0.0 < rho <= 1.0):
        raise ParameterError(f"retention fraction must lie in (0, 1], got {rho}")
    if rho * m > m:
        raise ParameterError(f"target rho*M = {rho * m} exceeds token count {m}")
    if tau_s <= 0:
        raise ParameterError(f"gate temperature must be positive, got {tau_s}")

    target = rho * m
    tol = cfg.residual_tol * m
    lo = float(r.min()) - cfg.clamp_margin * tau_s
    hi = float(r.max()) + cfg.clamp_margin * tau_s

    t = float(np.median(r))
    converged = False
    for _ in range(cfg.newton_iters):
        s = sigmoid_values((r - t) / tau_s)
        u = float(s.sum()) - target
        slope = -float((s * (1.0 - s)).sum()) / tau_s
        if abs(u) <= tol and converged:
            break
        if slope >= -SATURATION_GUARD:
            break  # flat region: leave it to bisection
        step = u / slope
        t = min(max(t - step, lo), hi)
        converged = abs(step) <= STEP_TOL * max(1.0, abs(t))

    residual = abs(_keep_sum(r, t, tau_s) - target)
    if not (converged and residual <= tol):
        t = _bisect_threshold(r, target, tau_s, lo, hi)
        residual = abs(_keep_sum(r, t, tau_s) - target)
    return t, residual


def _bisect_threshold(r: Array, target: float, tau: float, lo: float, hi: float) -> float:
    # keep-sum is strictly decreasing in t: u(lo) > 0 > u(hi) for any
    # attainable target; expand the bracket if saturation spoils it
    for _ in range(60):
        if _keep_sum(r, lo, tau) - target > 0:
            break
        lo -= 10.0 * tau
    for _ in range(60):
        if _keep_sum(r, hi, tau) - target < 0:
            break
        hi += 10.0 * tau
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _keep_sum(r, mid, tau) - target > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def threshold_gradients(r, rho: float, t: float, tau_s: float) -> tuple[float, Array]:
    """Implicit-function derivatives of the solved threshold.

    dt/drho = -M*tau / sum s_i(1-s_i) and dt/dr_i = s_i(1-s_i) / sum_j s_j(1-s_j)
    with s_i = sigmoid((r_i - t)/tau).  A saturated gate (vanishing
    denominator) clamps both to zero with a warning.
    """
    r = _as_relevance(r)
    m = r.size
    s = sigmoid_values((r - t) / tau_s)
    weights = s * (1.0 - s)
    denom = float(weights.sum())
    if denom < SATURATION_GUARD:
        logger.warning("saturated gate: threshold gradients clamped to zero")
        return 0.0, np.zeros(m)
    dt_drho = -m * tau_s / denom
    dt_dr = weights / denom
    return dt_drho, dt_dr


def threshold_var(r: Var, rho: Var, tau_s: float, cfg: GateConfig = GateConfig()) -> Var:
    """Tape-aware threshold solve; backward uses the implicit gradients."""
    r_values = r.value.ravel()
    t, _ = find_threshold(r_values, rho.item(), tau_s, cfg)

    def backward(g):
        dt_drho, dt_dr = threshold_gradients(r_values, rho.item(), t, tau_s)
        g0 = g[0, 0]
        return (g0 * dt_dr.reshape(1, -1), np.array([[g0 * dt_drho]]))

    return custom_op(np.array([[t]]), (r, rho), backward)


def sample_gumbel_pairs(m: int, rng: np.random.Generator) -> Array:
    """Two independent Gumbel(0, 1) draws per token, shape (2, M)."""
    u = rng.random((2, m))
    return -np.log(-np.log(u + 1e-20) + 1e-20)


def soft_gate_apply(
    r: Var, t: Var, tau_s: float, noise: Array
) -> tuple[Var, Var, KeepMask]:
    """Gumbel straight-through gate with frozen noise.

    Builds the differentiable path soft_i = sigmoid(z_i / tau_s) with
    z_i = (r_i - t)/tau_s + g0_i - g1_i, takes the hard sample z_i > 0
    (argmax of the perturbed two-class logits), and returns
    (soft, straight_through, mask).  Forward values of the straight
    through variable are the hard 0/1 mask; its gradient flows through
    the soft path.  If everything is dropped, the highest-relevance
    token is forced on.
    """
    noise_diff = (noise[0] - noise[1]).reshape(1, -1)
    z = ad.add(ad.smul(ad.sub(r, t), 1.0 / tau_s), ad.const(noise_diff))
    soft = ad.sigmoid(ad.smul(z, 1.0 / tau_s))
    hard = (z.value.ravel() > 0.0).astype(np.float64)
    if hard.sum() < 1:
        hard[int(np.argmax(r.value.ravel()))] = 1.0
    st = ad.straight_through(soft, hard.reshape(1, -1))
    mask = KeepMask(keep=hard.astype(bool), indices=np.flatnonzero(hard), noise=noise)
    return soft, st, mask


def soft_gate_train(
    r, t: float, cfg: GateConfig, rng: np.random.Generator
) -> tuple[KeepMask, Array]:
    """Value-level training gate: sample noise, return (mask, soft scores)."""
    r = _as_relevance(r)
    noise = sample_gumbel_pairs(r.size, rng)
    soft, _, mask = soft_gate_apply(
        ad.const(r.reshape(1, -1)), ad.scalar(t), cfg.tau_s, noise
    )
    return mask, soft.value.ravel()


def hard_top_n(r, n: int) -> KeepMask:
    """Inference gate: the n highest-relevance tokens, ties to the lower
    index, returned in ascending index order."""
    r = _as_relevance(r)
    m = r.size
    if n < 1:
        raise ParameterError(f"budget must be >= 1, got {n}")
    if n > m:
        logger.warning("budget %d exceeds token count %d; clamping", n, m)
        n = m
    order = np.argsort(-r, kind="stable")[:n]
    indices = np.sort(order)
    keep = np.zeros(m, dtype=bool)
    keep[indices] = True
    return KeepMask(keep=keep, indices=indices)
