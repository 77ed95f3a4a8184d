"""Penalised central aggregation and the penalty schedule.

The server problem for one component index is::

    min_{nu_1..nu_K, nu_bar}  sum_k  n/2 |nu_k - t_k|^2 + sqrt(n) lam |nu_k - nu_bar|

For a fixed center the inner problems are block soft-thresholds of each
``t_k`` toward ``nu_bar`` with radius ``tau = lam / sqrt(n)``. Profiling them
out leaves ``F(nu_bar) = n sum_k huber_tau(|t_k - nu_bar|)``, which is convex
and C^1, and is minimised here by gradient descent with Armijo backtracking.
The trial step ``1 / (n sum_k min(1, tau / r_k))`` is the majorize-minimize
(IRLS) step for the Huber loss, so the first trial always satisfies Armijo.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, ConvergenceError

MAX_ITERS = 10_000
GRAD_TOL = 1e-10
ARMIJO_C = 1e-4


@dataclass(frozen=True)
class AggregateResult:
    per_task: np.ndarray  # (K, d)
    center: np.ndarray  # (d,)
    objective: float
    iterations: int


def _huber(r, tau):
    return np.where(r <= tau, 0.5 * r * r, tau * r - 0.5 * tau * tau)


def shrink_toward(center, theta_tilde, tau):
    """Block soft-threshold of each row of ``theta_tilde`` toward ``center``."""
    diff = theta_tilde - center
    r = np.linalg.norm(diff, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(r > tau, 1.0 - tau / r, 0.0)
    return center + scale[:, None] * diff


def objective(per_task, center, theta_tilde, lam, n) -> float:
    fit = 0.5 * n * np.sum((per_task - theta_tilde) ** 2)
    spread = float(np.sum(np.linalg.norm(per_task - center, axis=1)))
    # an infinite penalty costs nothing once every block sits on the center
    pen = math.sqrt(n) * lam * spread if spread > 0 else 0.0
    return float(fit + pen)


def profiled_objective(center, theta_tilde, lam, n) -> float:
    """``F(center)``: the objective with the per-task blocks optimised out."""
    tau = lam / math.sqrt(n)
    r = np.linalg.norm(theta_tilde - center, axis=1)
    return float(n * np.sum(_huber(r, tau)))


def collapse_lambda(theta_tilde, n) -> float:
    """Smallest penalty at which every task collapses onto the plain mean."""
    t = np.asarray(theta_tilde, dtype=float)
    return math.sqrt(n) * float(np.max(np.linalg.norm(t - t.mean(axis=0), axis=1)))


def central_update(theta_tilde, lam: float, n: int, max_iters: int = MAX_ITERS) -> AggregateResult:
    """Solve the server problem for one component index.

    Args:
        theta_tilde: ``(K, d)`` local gradient-EM iterates.
        lam: penalty ``lambda >= 0``; ``inf`` forces full pooling.
        n: per-task sample size.

    At ``lam == 0`` the center is reported as the arithmetic mean (the
    objective does not depend on it there).
    """
    t = np.asarray(theta_tilde, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
        raise ContractError(f"theta_tilde must be a non-empty K x d array, got shape {t.shape}")
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if not (lam >= 0):
        raise ContractError(f"penalty must be non-negative, got {lam}")
    if not np.all(np.isfinite(t)):
        raise ContractError("theta_tilde must be finite")
    K = t.shape[0]
    if K == 1:
        return AggregateResult(t.copy(), t[0].copy(), 0.0, 0)
    mean = t.mean(axis=0)
    if lam == 0:
        return AggregateResult(t.copy(), mean, 0.0, 0)
    tau = lam / math.sqrt(n)
    spread = float(np.max(np.linalg.norm(t - mean, axis=1)))
    if tau >= spread:
        # every block sits inside the quadratic zone at the mean: full pooling
        per_task = np.tile(mean, (K, 1))
        return AggregateResult(per_task, mean, objective(per_task, mean, t, lam, n), 0)

    tol = GRAD_TOL * n * K * max(1.0, spread)
    center = mean.copy()
    f = profiled_objective(center, t, lam, n)
    gnorm = math.inf
    for it in range(1, max_iters + 1):
        diff = center - t
        r = np.linalg.norm(diff, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            wts = np.where(r > tau, tau / r, 1.0)
        grad = n * (wts @ diff)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            break
        step = 1.0 / (n * wts.sum())
        while True:
            trial = center - step * grad
            f_trial = profiled_objective(trial, t, lam, n)
            if f_trial <= f - ARMIJO_C * step * gnorm * gnorm or step < 1e-300:
                break
            step *= 0.5
        if np.array_equal(trial, center):
            # floating-point fixed point; the gradient cannot shrink further
            break
        center, f = trial, f_trial
    else:
        raise ConvergenceError(
            f"central update did not converge in {max_iters} iterations "
            f"(gradient norm {gnorm:.3e}, tolerance {tol:.3e})",
            last_iterate=center, grad_norm=gnorm)
    per_task = shrink_toward(center, t, tau)
    return AggregateResult(per_task, center, objective(per_task, center, t, lam, n), it)


# --------------------------------------------------------------------------
# penalty schedule


@dataclass(frozen=True)
class PenaltySchedule:
    """``current <- decay * current + additive_floor`` each round."""

    lambda0: float
    decay: float
    additive_floor: float
    current: float

    def __post_init__(self):
        if not (self.lambda0 >= 0 and self.current >= 0):
            raise ContractError("penalties must be non-negative")
        if not 0 < self.decay < 1:
            raise ContractError(f"decay must lie in (0, 1), got {self.decay}")
        if not self.additive_floor >= 0:
            raise ContractError("additive floor must be non-negative")

    @classmethod
    def start(cls, lambda0: float, decay: float, additive_floor: float) -> "PenaltySchedule":
        return cls(lambda0, decay, additive_floor, lambda0)

    @classmethod
    def constant(cls, lam: float, decay: float = 0.5) -> "PenaltySchedule":
        """A schedule pinned at its fixed point, so every round uses ``lam``."""
        return cls(lam, decay, lam * (1.0 - decay), lam)

    @property
    def fixed_point(self) -> float:
        return self.additive_floor / (1.0 - self.decay)


def schedule_next(sched: PenaltySchedule) -> PenaltySchedule:
    return replace(sched, current=sched.decay * sched.current + sched.additive_floor)


def default_schedule(n: int, d: int, R: int, K: int, delta_conf: float = 0.05,
                     c_lambda0: float = 1.0, c_floor: float = 0.1,
                     decay: float = 0.5) -> PenaltySchedule:
    """Data-free surrogate for the theoretical schedule.

    ``lambda0 = c_lambda0 * sqrt(n)`` and
    ``floor = c_floor * (sqrt(d) + sqrt(log(R K / delta_conf)))``. The
    resulting shrinkage radius ``lambda / sqrt(n)`` settles at a multiple of
    ``(sqrt(d) + sqrt(log(RK/delta))) / sqrt(n)``, the single-task rate.
    """
    if min(n, d, R, K) < 1:
        raise ContractError("n, d, R, K must all be >= 1")
    if not 0 < delta_conf < 1:
        raise ContractError(f"delta_conf must lie in (0, 1), got {delta_conf}")
    if c_lambda0 < 0 or c_floor < 0:
        raise ContractError("schedule constants must be non-negative")
    lambda0 = c_lambda0 * math.sqrt(n)
    floor = c_floor * (math.sqrt(d) + math.sqrt(math.log(R * K / delta_conf)))
    return PenaltySchedule.start(lambda0, decay, floor)


def theory_schedule(n: int, r_w: float, r_theta: float, kappa0: float,
                    w_rate: float, e1_rate: float, eta_bar: float) -> PenaltySchedule:
    """Schedule with the constants from the convergence theory.

    ``lambda0 = (15/119) sqrt(n) (r_w + r_theta)`` and
    ``lambda_t = kappa0 lambda_{t-1} + 15 sqrt(n) (W + 2 eta_bar E1)``.
    The contraction factor and the rate functions are not observable from
    data, so this exists for reference runs where they are supplied by hand.
    """
    lambda0 = 15.0 / 119.0 * math.sqrt(n) * (r_w + r_theta)
    floor = 15.0 * math.sqrt(n) * (w_rate + 2.0 * eta_bar * e1_rate)
    return PenaltySchedule.start(lambda0, kappa0, floor)
