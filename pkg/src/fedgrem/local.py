"""Single-task gradient EM, its full-EM baseline, step sizes and initializers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractError
from .mixture import (
    MixtureParams,
    ModelKind,
    TaskDataset,
    exact_m_step_gmm,
    log_likelihood,
    posterior,
    q_hat_gradient,
    q_hat_value,
    weight_m_step,
)

ETA_MIN, ETA_MAX = 1e-3, 1e3


class StepRule(str, enum.Enum):
    COROLLARY_GMM = "corollary_gmm"
    COROLLARY_MOR = "corollary_mor"
    FIXED = "fixed"
    BACKTRACKING = "backtracking"


@dataclass(frozen=True)
class StepSizePlan:
    """Per-component step sizes for one task.

    ``etas`` is filled once from the round-0 weight estimate. With the
    backtracking rule each component's step is halved (at most
    ``halvings_max`` times) until its share of ``q_hat`` does not decrease.
    """

    rule: StepRule
    etas: np.ndarray
    halvings_max: int = 0

    @property
    def backtracking(self) -> bool:
        return self.rule is StepRule.BACKTRACKING


def make_step_plan(rule, initial_weights, c_b: float = 0.25, eta: float = 1.0,
                   halvings_max: int = 20, eta_min: float = ETA_MIN,
                   eta_max: float = ETA_MAX) -> StepSizePlan:
    """Build a step plan.

    ``corollary_gmm`` gives ``eta_r = 1 / ((1 + c_b) w_r)`` and
    ``corollary_mor`` gives ``eta_r = 1 / ((1 + 2 c_b) w_r)``, both clamped to
    ``[eta_min, eta_max]``. ``fixed`` and ``backtracking`` use ``eta`` for
    every component.
    """
    rule = StepRule(rule)
    w = np.asarray(initial_weights, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise ContractError("initial weights must be a non-empty vector")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"initial weights must be positive and on the simplex, got {w}")
    if rule in (StepRule.COROLLARY_GMM, StepRule.COROLLARY_MOR):
        if c_b < 0:
            raise ContractError(f"C_b must be non-negative, got {c_b}")
        factor = 1.0 + c_b if rule is StepRule.COROLLARY_GMM else 1.0 + 2.0 * c_b
        etas = np.clip(1.0 / (factor * w), eta_min, eta_max)
    else:
        if not (np.isfinite(eta) and eta >= 0):
            raise ContractError(f"step size must be finite and non-negative, got {eta}")
        etas = np.full(w.shape, float(eta))
    etas.flags.writeable = False
    return StepSizePlan(rule, etas, halvings_max if rule is StepRule.BACKTRACKING else 0)


def local_update(kind, params: MixtureParams, data: TaskDataset, plan: StepSizePlan):
    """One E-step plus weight and gradient M-steps.

    Returns ``(weights_hat, theta_tilde)``; both use the posterior at the
    incoming parameters.
    """
    gamma = posterior(kind, params, data)
    weights = weight_m_step(gamma)
    grad = q_hat_gradient(kind, params, gamma, data)
    if plan.etas.shape[0] != params.R:
        raise ContractError(f"step plan has {plan.etas.shape[0]} entries for R={params.R}")
    theta = params.components + plan.etas[:, None] * grad
    if plan.backtracking:
        theta = _backtrack(kind, params.components, grad, plan, gamma, data)
    return weights, theta


def _backtrack(kind, theta0, grad, plan, gamma, data):
    theta = theta0.copy()
    for r in range(theta0.shape[0]):
        # q_hat separates over components, so each one is checked alone
        g_r = gamma[:, r:r + 1]
        base = q_hat_value(kind, theta0[r:r + 1], g_r, data)
        eta = plan.etas[r]
        for _ in range(plan.halvings_max + 1):
            trial = theta0[r] + eta * grad[r]
            if q_hat_value(kind, trial[None, :], g_r, data) >= base:
                break
            eta *= 0.5
        else:
            trial = theta0[r]
        theta[r] = trial
    return theta


WEIGHT_FLOOR = np.finfo(float).tiny


def to_simplex(w):
    """Renormalize a weight update onto the open simplex.

    Column means already sum to one up to rounding. A component that has lost
    all posterior mass decays geometrically and would underflow to exactly 0;
    it is held at the smallest normal double instead, so the mixture stays
    valid and the component can still recover.
    """
    w = np.maximum(w, WEIGHT_FLOOR)
    return w / w.sum()


def gradient_em_step(kind, params: MixtureParams, data: TaskDataset,
                     plan: StepSizePlan) -> MixtureParams:
    weights, theta = local_update(kind, params, data, plan)
    return MixtureParams(to_simplex(weights), theta)


def full_em_step(kind, params: MixtureParams, data: TaskDataset) -> MixtureParams:
    """Exact EM update (GMM only): weights and weighted means from one E-step."""
    if ModelKind(kind) is not ModelKind.GMM:
        raise ContractError("full EM baseline is implemented for GMM only")
    gamma = posterior(kind, params, data)
    return MixtureParams(to_simplex(weight_m_step(gamma)), exact_m_step_gmm(gamma, data))


@dataclass
class LocalTrajectory:
    params: List[MixtureParams]
    log_likelihood: List[float] = field(default_factory=list)

    @property
    def final(self) -> MixtureParams:
        return self.params[-1]


def run_local(kind, data: TaskDataset, init: MixtureParams, plan: Optional[StepSizePlan],
              T: int, full_em: bool = False) -> LocalTrajectory:
    """Run ``T`` local iterations; ``trajectory.params[0]`` is ``init``."""
    if T < 0:
        raise ContractError(f"T must be >= 0, got {T}")
    if plan is None and not full_em:
        raise ContractError("gradient EM needs a step plan")
    traj = LocalTrajectory([init], [log_likelihood(kind, init, data)])
    current = init
    for _ in range(T):
        if full_em:
            current = full_em_step(kind, current, data)
        else:
            current = gradient_em_step(kind, current, data, plan)
        traj.params.append(current)
        traj.log_likelihood.append(log_likelihood(kind, current, data))
    return traj


# --------------------------------------------------------------------------
# initialization


class InitKind(str, enum.Enum):
    ORACLE = "oracle"
    KMEANS = "kmeans"
    RANDOM = "random"


@dataclass(frozen=True)
class InitStrategy:
    kind: InitKind = InitKind.ORACLE
    delta_w: float = 0.0
    delta_theta: float = 0.0
    c_w: float = 1.0
    restarts: int = 10
    iters: int = 25

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if self.delta_w < 0 or self.delta_theta < 0:
            raise ContractError("perturbation sizes must be non-negative")
        if not 0 < self.c_w <= 1:
            raise ContractError(f"c_w must lie in (0, 1], got {self.c_w}")
        if self.restarts < 1 or self.iters < 1:
            raise ContractError("restarts and iters must be >= 1")

    @classmethod
    def oracle(cls, delta_w=0.0, delta_theta=0.0, c_w=1.0):
        return cls(InitKind.ORACLE, delta_w=delta_w, delta_theta=delta_theta, c_w=c_w)

    @classmethod
    def kmeans(cls, restarts=10, iters=25):
        return cls(InitKind.KMEANS, restarts=restarts, iters=iters)

    @classmethod
    def random(cls, restarts=10):
        return cls(InitKind.RANDOM, restarts=restarts)


def uniform_ball(rng: np.random.Generator, radius: float, d: int, size=None) -> np.ndarray:
    """Uniform draws from the closed d-ball of the given radius."""
    shape = (d,) if size is None else (size, d)
    g = rng.standard_normal(shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    u = rng.random(() if size is None else (size, 1))
    return radius * g / norms * np.power(u, 1.0 / d)


def oracle_perturb(truth: MixtureParams, delta_w: float, delta_theta: float, c_w: float,
                   rng: np.random.Generator) -> MixtureParams:
    """Truth plus bounded perturbations.

    Weights get i.i.d. ``U(-delta_w, delta_w)`` noise, are clipped at
    ``c_w / (2R)`` and renormalised; each component moves uniformly inside a
    ball of radius ``delta_theta``.
    """
    R, d = truth.R, truth.d
    if delta_w < 0 or delta_theta < 0:
        raise ContractError("perturbation sizes must be non-negative")
    if delta_w >= c_w / R:
        raise ContractError(f"delta_w={delta_w} must be below c_w/R={c_w / R}")
    if delta_w == 0 and delta_theta == 0:
        return truth
    w = truth.weights + rng.uniform(-delta_w, delta_w, size=R)
    w = np.maximum(w, c_w / (2 * R))
    w = w / w.sum()
    theta = truth.components + uniform_ball(rng, delta_theta, d, size=R)
    return MixtureParams(w, theta)


def farthest_point_seeds(x: np.ndarray, R: int, first: int) -> np.ndarray:
    idx = [first]
    dist = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, R):
        nxt = int(np.argmax(dist))
        idx.append(nxt)
        dist = np.minimum(dist, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy()


def lloyd(x: np.ndarray, centroids: np.ndarray, iters: int):
    """Plain Lloyd iterations. Returns ``(centroids, labels, inertia)``.

    An empty cluster keeps its previous centroid.
    """
    c = np.array(centroids, dtype=float)
    labels = None
    for _ in range(iters):
        d2 = np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for r in range(c.shape[0]):
            members = x[labels == r]
            if len(members):
                c[r] = members.mean(axis=0)
    d2 = np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(x)), labels].sum())
    return c, labels, inertia


def kmeans_lloyd(data: TaskDataset, R: int, rng: np.random.Generator,
                 restarts: int = 10, iters: int = 25) -> MixtureParams:
    if data.kind is not ModelKind.GMM:
        raise ContractError("k-means initialization requires GMM data")
    x = data.observations
    best = None
    for _ in range(restarts):
        first = int(rng.integers(data.n))
        c, labels, inertia = lloyd(x, farthest_point_seeds(x, R, first), iters)
        if best is None or inertia < best[2]:
            best = (c, labels, inertia)
    c, labels, _ = best
    counts = np.bincount(labels, minlength=R).astype(float)
    if np.any(counts == 0):
        counts = np.maximum(counts, 0.5)
    return MixtureParams(counts / counts.sum(), c)


def random_restarts(kind, data: TaskDataset, R: int, rng: np.random.Generator,
                    restarts: int = 10) -> MixtureParams:
    """Best log-likelihood among random draws (best effort, no guarantees).

    GMM draws distinct data rows as centers; MoR draws random directions with
    norm matched to the response scale.
    """
    kind = ModelKind(kind)
    best, best_ll = None, -np.inf
    for _ in range(restarts):
        if kind is ModelKind.GMM:
            idx = rng.choice(data.n, size=R, replace=data.n < R)
            theta = data.observations[idx]
        else:
            scale = np.sqrt(max(float(np.mean(data.responses ** 2)) - 1.0, 1e-6))
            g = rng.standard_normal((R, data.d))
            theta = scale * g / np.linalg.norm(g, axis=1, keepdims=True)
        cand = MixtureParams(np.full(R, 1.0 / R), theta)
        ll = log_likelihood(kind, cand, data)
        if ll > best_ll:
            best, best_ll = cand, ll
    return best


def initialize(strategy: InitStrategy, kind, data: TaskDataset, R: int,
               truth: Optional[MixtureParams] = None,
               rng: Optional[np.random.Generator] = None) -> MixtureParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    if strategy.kind is InitKind.ORACLE:
        if truth is None:
            raise ContractError("oracle initialization needs the true parameters")
        return oracle_perturb(truth, strategy.delta_w, strategy.delta_theta, strategy.c_w, rng)
    if strategy.kind is InitKind.KMEANS:
        if ModelKind(kind) is not ModelKind.GMM:
            raise ContractError("k-means initialization requires GMM data")
        return kmeans_lloyd(data, R, rng, strategy.restarts, strategy.iters)
    return random_restarts(kind, data, R, rng, strategy.restarts)
