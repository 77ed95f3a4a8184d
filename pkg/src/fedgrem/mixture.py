"""Mixture model families: isotropic GMM and mixture of linear regressions.

Every routine here is a pure function of its inputs. Parameters are carried
as :class:`MixtureParams` (weights on the simplex plus one parameter vector
per component) and data as :class:`TaskDataset`.

Posterior logits use component 1 as the reference class::

    GMM: g_ir = x_i'(theta_r - theta_1) - (|theta_r|^2 - |theta_1|^2) / 2 + log w_r
    MoR: g_ir = y_i x_i'(theta_r - theta_1)
                - ((x_i'theta_r)^2 - (x_i'theta_1)^2) / 2 + log w_r

and are normalised with a max-subtracted softmax. The surrogate ``q_hat``
drops the additive ``-(d/2) log 2pi`` density constant; only its differences
and gradients are ever used.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateClusterError, NumericError

SIMPLEX_TOL = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


class ModelKind(str, enum.Enum):
    GMM = "GMM"
    MOR = "MoR"


@dataclass(frozen=True)
class MixtureParams:
    """Weights ``(R,)`` and components ``(R, d)`` of one task's mixture."""

    weights: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        c = np.array(self.components, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if w.ndim != 1 or c.ndim != 2 or w.shape[0] != c.shape[0]:
            raise ContractError(
                f"weights {w.shape} and components {c.shape} disagree on R")
        if w.shape[0] < 1 or c.shape[1] < 1:
            raise ContractError("need R >= 1 and d >= 1")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(c))):
            raise ContractError("mixture parameters must be finite")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ContractError(f"weights must be positive and sum to 1, got {w}")
        w.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", c)

    @property
    def R(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.components.shape[1]

    def permuted(self, perm) -> "MixtureParams":
        """Relabel so that new component ``r`` is old component ``perm[r]``."""
        perm = np.asarray(perm, dtype=int)
        return MixtureParams(self.weights[perm], self.components[perm])

    def with_components(self, components) -> "MixtureParams":
        return MixtureParams(self.weights, components)


@dataclass(frozen=True)
class TaskDataset:
    """One task's local observations. ``responses`` is set only for MoR."""

    kind: ModelKind
    observations: np.ndarray
    responses: Optional[np.ndarray] = None

    def __post_init__(self):
        kind = ModelKind(self.kind)
        x = np.array(self.observations, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ContractError(f"observations must be n x d with n, d >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError("observations must be finite")
        y = None
        if kind is ModelKind.MOR:
            if self.responses is None:
                raise ContractError("MoR dataset requires responses")
            y = np.array(self.responses, dtype=float).reshape(-1)
            if y.shape[0] != x.shape[0]:
                raise ContractError(f"{y.shape[0]} responses for {x.shape[0]} rows")
            if not np.all(np.isfinite(y)):
                raise ContractError("responses must be finite")
            y.flags.writeable = False
        elif self.responses is not None:
            raise ContractError("GMM dataset must not carry responses")
        x.flags.writeable = False
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "observations", x)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d(self) -> int:
        return self.observations.shape[1]


def _check(kind, params: MixtureParams, data: TaskDataset):
    kind = ModelKind(kind)
    if kind is not data.kind:
        raise ContractError(f"model kind {kind.value} does not match {data.kind.value} data")
    if params.d != data.d:
        raise ContractError(f"parameter dimension {params.d} != data dimension {data.d}")
    return kind


def _check_posterior(posterior, data: TaskDataset, R: int):
    gamma = np.asarray(posterior, dtype=float)
    if gamma.shape != (data.n, R):
        raise ContractError(f"posterior shape {gamma.shape} != ({data.n}, {R})")
    return gamma


def _as_components(kind, components, d):
    theta = np.asarray(components.components if isinstance(components, MixtureParams)
                       else components, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    if theta.ndim != 2 or theta.shape[1] != d:
        raise ContractError(f"components shape {theta.shape} incompatible with d={d}")
    return theta


def logits(kind, params: MixtureParams, data: TaskDataset) -> np.ndarray:
    """Reference-class logits ``g_ir`` (component 1 as reference)."""
    kind = _check(kind, params, data)
    x = data.observations
    theta = params.components
    diff = theta - theta[0]
    if kind is ModelKind.GMM:
        sq = np.einsum("rd,rd->r", theta, theta)
        g = x @ diff.T - 0.5 * (sq - sq[0])
    else:
        proj = x @ theta.T
        g = data.responses[:, None] * (x @ diff.T) - 0.5 * (proj ** 2 - proj[:, :1] ** 2)
    return g + np.log(params.weights)


def posterior(kind, params: MixtureParams, data: TaskDataset) -> np.ndarray:
    """E-step responsibilities, an ``(n, R)`` row-stochastic matrix."""
    g = logits(kind, params, data)
    g = g - g.max(axis=1, keepdims=True)
    e = np.exp(g)
    total = e.sum(axis=1, keepdims=True)
    gamma = e / total
    bad = ~np.all(np.isfinite(gamma), axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite posterior in row {row}")
    return gamma


def _residuals(kind, theta, data):
    # (n, R) squared residuals for GMM, scalar residuals for MoR
    x = data.observations
    if kind is ModelKind.GMM:
        return x[:, None, :] - theta[None, :, :]
    return data.responses[:, None] - x @ theta.T


def q_hat_value(kind, params_eval, posterior, data: TaskDataset) -> float:
    """Empirical surrogate with frozen responsibilities.

    GMM: ``-(1/2n) sum_i sum_r gamma_ir |x_i - theta_r|^2``;
    MoR: ``-(1/2n) sum_i sum_r gamma_ir (y_i - x_i'theta_r)^2``.
    """
    kind = ModelKind(kind)
    if kind is not data.kind:
        raise ContractError(f"model kind {kind.value} does not match {data.kind.value} data")
    theta = _as_components(kind, params_eval, data.d)
    gamma = _check_posterior(posterior, data, theta.shape[0])
    res = _residuals(kind, theta, data)
    sq = np.einsum("nrd,nrd->nr", res, res) if kind is ModelKind.GMM else res ** 2
    return float(-0.5 * np.sum(gamma * sq) / data.n)


def q_hat_gradient(kind, params_eval, posterior, data: TaskDataset) -> np.ndarray:
    """Gradient of :func:`q_hat_value` in each component, shape ``(R, d)``."""
    kind = ModelKind(kind)
    if kind is not data.kind:
        raise ContractError(f"model kind {kind.value} does not match {data.kind.value} data")
    theta = _as_components(kind, params_eval, data.d)
    gamma = _check_posterior(posterior, data, theta.shape[0])
    x = data.observations
    n = data.n
    if kind is ModelKind.GMM:
        # -(1/n) sum_i gamma_ir (theta_r - x_i)
        mass = gamma.sum(axis=0)
        return (gamma.T @ x - mass[:, None] * theta) / n
    res = data.responses[:, None] - x @ theta.T
    return (gamma * res).T @ x / n


def weight_m_step(posterior) -> np.ndarray:
    """Column means of the responsibilities."""
    gamma = np.asarray(posterior, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] < 1:
        raise ContractError(f"posterior must be a non-empty n x R matrix, got {gamma.shape}")
    return gamma.mean(axis=0)


def exact_m_step_gmm(posterior, data: TaskDataset) -> np.ndarray:
    """Responsibility-weighted means, the full-EM component update for GMMs."""
    if data.kind is not ModelKind.GMM:
        raise ContractError("exact M-step is defined for GMM data only")
    gamma = np.asarray(posterior, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] != data.n:
        raise ContractError(f"posterior shape {gamma.shape} does not match n={data.n}")
    mass = gamma.sum(axis=0)
    low = np.flatnonzero(mass < 1e-12)
    if low.size:
        r = int(low[0])
        raise DegenerateClusterError(
            f"component {r} has responsibility mass {mass[r]:.3g}", component=r)
    return gamma.T @ data.observations / mass[:, None]


def sample(kind, params: MixtureParams, n: int, rng: np.random.Generator,
           return_labels: bool = False):
    """Draw ``n`` i.i.d. observations.

    GMM draws ``x ~ N(theta_z, I)``; MoR draws ``x ~ N(0, I)`` and
    ``y = x'theta_z + e`` with ``e ~ N(0, 1)``. Latent labels are returned
    only when ``return_labels`` is set (debug use).
    """
    kind = ModelKind(kind)
    if n < 1:
        raise ContractError(f"sample size must be >= 1, got {n}")
    R, d = params.R, params.d
    z = rng.choice(R, size=n, p=params.weights)
    noise = rng.standard_normal((n, d))
    if kind is ModelKind.GMM:
        data = TaskDataset(kind, params.components[z] + noise)
    else:
        eps = rng.standard_normal(n)
        y = np.einsum("nd,nd->n", noise, params.components[z]) + eps
        data = TaskDataset(kind, noise, y)
    if return_labels:
        return data, z
    return data


def component_log_density(kind, components, data: TaskDataset) -> np.ndarray:
    """``log p_r(x_i; theta_r)`` for every row and component, shape ``(n, R)``.

    For MoR this is the conditional density of ``y`` given ``x``; the
    covariate density is common to all components and cancels everywhere
    except the absolute likelihood level, so it is included there.
    """
    kind = ModelKind(kind)
    theta = _as_components(kind, components, data.d)
    res = _residuals(kind, theta, data)
    if kind is ModelKind.GMM:
        return -0.5 * np.einsum("nrd,nrd->nr", res, res) - 0.5 * data.d * _LOG_2PI
    x = data.observations
    log_px = -0.5 * np.einsum("nd,nd->n", x, x) - 0.5 * data.d * _LOG_2PI
    return -0.5 * res ** 2 - 0.5 * _LOG_2PI + log_px[:, None]


def log_likelihood(kind, params: MixtureParams, data: TaskDataset) -> float:
    """Average log-likelihood ``(1/n) sum_i log sum_r w_r p_r(x_i)``."""
    kind = _check(kind, params, data)
    a = component_log_density(kind, params.components, data) + np.log(params.weights)
    m = a.max(axis=1, keepdims=True)
    ll = m[:, 0] + np.log(np.exp(a - m).sum(axis=1))
    value = float(ll.mean())
    if not np.isfinite(value):
        raise NumericError("log-likelihood is not finite")
    return value


def stack_components(params: Sequence[MixtureParams]) -> np.ndarray:
    """``(K, R, d)`` array of components across tasks."""
    return np.stack([p.components for p in params])
