"""Federated gradient EM: round loop, server aggregation and baselines.

A round has two phases. Every task runs one E-step, a weight M-step and a
gradient M-step on its own data and sends a :class:`LocalReport`. The server
then solves one penalised aggregation per component index and sends back a
:class:`CentralDirective`. Mixture weights never leave the task.

Round ``t`` uses the penalty ``lambda_t``, the schedule advanced ``t`` times
from ``lambda_0``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .aggregate import PenaltySchedule, central_update, schedule_next
from .alignment import PermutationSet, StepwiseMode, align_stepwise, apply_alignment
from .errors import ContractError
from .local import StepSizePlan, local_update, to_simplex
from .metrics import estimation_error
from .mixture import MixtureParams, TaskDataset


class Mode(str, enum.Enum):
    FEDGREM = "fedgrem"
    NAIVE_AVERAGE = "naive_average"
    LOCAL_ONLY = "local_only"
    POOLED = "pooled"

    @property
    def federated(self) -> bool:
        return self in (Mode.FEDGREM, Mode.NAIVE_AVERAGE)


@dataclass(frozen=True)
class LocalReport:
    """What a task sends to the server. Carries estimates only, never data."""

    task_id: int
    round: int
    weights_hat: np.ndarray  # (R,)
    theta_tilde: np.ndarray  # (R, d)

    def __post_init__(self):
        if self.round < 1:
            raise ContractError(f"report round must be >= 1, got {self.round}")
        w = np.array(self.weights_hat, dtype=float)
        t = np.array(self.theta_tilde, dtype=float)
        if w.ndim != 1 or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ContractError(f"task {self.task_id}: reported weights are off the simplex")
        if t.ndim != 2 or t.shape[0] != w.shape[0] or not np.all(np.isfinite(t)):
            raise ContractError(f"task {self.task_id}: malformed or non-finite theta_tilde")
        w.flags.writeable = t.flags.writeable = False
        object.__setattr__(self, "weights_hat", w)
        object.__setattr__(self, "theta_tilde", t)


@dataclass(frozen=True)
class CentralDirective:
    round: int
    theta_hat: np.ndarray  # (K, R, d)
    theta_bar: np.ndarray  # (R, d)
    lambda_used: float

    def __post_init__(self):
        th = np.array(self.theta_hat, dtype=float)
        tb = np.array(self.theta_bar, dtype=float)
        if th.ndim != 3 or tb.shape != th.shape[1:]:
            raise ContractError(f"directive shapes {th.shape} and {tb.shape} are inconsistent")
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(tb))):
            raise ContractError("directive carries non-finite parameters")
        th.flags.writeable = tb.flags.writeable = False
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "theta_bar", tb)


Message = Union[LocalReport, CentralDirective]


@dataclass(frozen=True)
class FederationState:
    round: int
    params: Tuple[MixtureParams, ...]
    schedule: PenaltySchedule
    log: Tuple[Message, ...] = ()
    mode: Mode = Mode.FEDGREM

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "log", tuple(self.log))
        if self.round < 0:
            raise ContractError("round must be non-negative")
        expected = self.round * (len(self.params) + 1) if self.mode.federated else 0
        if len(self.log) != expected:
            raise ContractError(f"log holds {len(self.log)} messages after round {self.round}, "
                                f"expected {expected}")


def _check_inputs(params, datasets, plans):
    K = len(params)
    if K < 1 or len(datasets) != K or len(plans) != K:
        raise ContractError(f"need one dataset and one step plan per task, got "
                            f"{K} params, {len(datasets)} datasets, {len(plans)} plans")
    kind = datasets[0].kind
    R, d = params[0].R, params[0].d
    for k, (p, data) in enumerate(zip(params, datasets)):
        if data.kind is not kind:
            raise ContractError(f"task {k} holds {data.kind.value} data, task 0 holds {kind.value}")
        if p.R != R or p.d != d or data.d != d:
            raise ContractError(f"task {k} dimensions differ from task 0")
    return kind


def _pooled_dataset(datasets, inliers):
    picked = [datasets[k] for k in inliers]
    x = np.concatenate([t.observations for t in picked])
    y = None if picked[0].responses is None else np.concatenate([t.responses for t in picked])
    return TaskDataset(picked[0].kind, x, y)


def fedgrem_round(state: FederationState, datasets: Sequence[TaskDataset],
                  plans: Sequence[StepSizePlan],
                  pooled: Optional[TaskDataset] = None) -> FederationState:
    """Run one round and return the new state; the input state is untouched.

    ``pooled`` is the concatenated inlier data and is only read in pooled mode.
    """
    kind = _check_inputs(state.params, datasets, plans)
    mode, t = state.mode, state.round + 1
    K = len(state.params)
    schedule = schedule_next(state.schedule)

    if mode is Mode.POOLED:
        if pooled is None:
            raise ContractError("pooled mode needs the concatenated inlier dataset")
        w, theta = local_update(kind, state.params[0], pooled, plans[0])
        shared = MixtureParams(to_simplex(w), theta)
        return replace(state, round=t, params=(shared,) * K, schedule=schedule)

    reports = []
    for k in range(K):
        w, theta = local_update(kind, state.params[k], datasets[k], plans[k])
        reports.append(LocalReport(k, t, to_simplex(w), theta))

    if mode is Mode.LOCAL_ONLY:
        params = tuple(MixtureParams(rep.weights_hat, rep.theta_tilde) for rep in reports)
        return replace(state, round=t, params=params, schedule=schedule)

    tilde = np.stack([rep.theta_tilde for rep in reports])  # (K, R, d)
    if mode is Mode.NAIVE_AVERAGE:
        lam = float("inf")
        # same per-index reduction as a fully collapsed central update
        bar = np.stack([tilde[:, r, :].mean(axis=0) for r in range(tilde.shape[1])])
        hat = np.broadcast_to(bar, tilde.shape)
    else:
        lam = schedule.current
        hat = np.empty_like(tilde)
        bar = np.empty(tilde.shape[1:])
        for r in range(tilde.shape[1]):
            res = central_update(tilde[:, r, :], lam, datasets[0].n)
            hat[:, r, :], bar[r] = res.per_task, res.center
    directive = CentralDirective(t, hat, bar, lam)
    params = tuple(MixtureParams(reports[k].weights_hat, directive.theta_hat[k]) for k in range(K))
    return FederationState(t, params, schedule, state.log + tuple(reports) + (directive,), mode)


@dataclass
class FitResult:
    final: List[MixtureParams]
    trajectories: List[List[MixtureParams]]  # [task][round], round 0 is the init
    log: Tuple[Message, ...]
    lambdas: List[float]  # penalty per round; entry 0 is the starting value
    alignment: Optional[PermutationSet] = None
    mode: Mode = Mode.FEDGREM


def run(mode, datasets: Sequence[TaskDataset], inits: Sequence[MixtureParams],
        plans: Sequence[StepSizePlan], schedule: PenaltySchedule, T: int,
        align_first: bool = False, inliers: Optional[Sequence[int]] = None) -> FitResult:
    """Run ``T`` rounds of the chosen mode.

    With ``align_first`` the inits (and each task's step sizes) are relabeled
    by greedy stepwise alignment before round 1. ``inliers`` selects the
    tasks whose data pooled mode concatenates (all tasks by default).
    """
    mode = Mode(mode)
    if T < 0:
        raise ContractError(f"T must be >= 0, got {T}")
    inits, plans = list(inits), list(plans)
    _check_inputs(inits, datasets, plans)
    perms = None
    if align_first:
        perms = align_stepwise(inits, StepwiseMode.ASSIGNMENT)
        inits = apply_alignment(inits, perms)
        plans = [replace(p, etas=p.etas[perms[k]]) for k, p in enumerate(plans)]
    pooled = None
    if mode is Mode.POOLED:
        inliers = list(range(len(datasets))) if inliers is None else list(inliers)
        if not inliers:
            raise ContractError("pooled mode needs at least one inlier task")
        pooled = _pooled_dataset(datasets, inliers)
        first = inliers[0]
        inits = [inits[first]] * len(inits)
        plans = [plans[first]] * len(plans)

    state = FederationState(0, inits, schedule, (), mode)
    traj = [[p] for p in inits]
    lambdas = [_penalty(state)]
    for _ in range(T):
        state = fedgrem_round(state, datasets, plans, pooled)
        for k, p in enumerate(state.params):
            traj[k].append(p)
        lambdas.append(_penalty(state))
    return FitResult(list(state.params), traj, state.log, lambdas, perms, mode)


def _penalty(state: FederationState) -> float:
    if state.mode is Mode.FEDGREM:
        return state.schedule.current
    return float("inf") if state.mode is Mode.NAIVE_AVERAGE else 0.0


@dataclass(frozen=True)
class ProbeRecord:
    round: int
    err_theta: float
    err_w: float
    lam: float


def error_decomposition_probe(fit: FitResult, truths: Sequence[MixtureParams],
                              inlier_set: Sequence[int]) -> List[ProbeRecord]:
    """Per-round max inlier errors under one common relabeling per round."""
    inliers = list(inlier_set)
    if not inliers:
        raise ContractError("inlier set is empty")
    out = []
    for t in range(len(fit.trajectories[0])):
        est = [fit.trajectories[k][t] for k in inliers]
        _, et, ew = estimation_error(est, [truths[k] for k in inliers])
        out.append(ProbeRecord(t, et, ew, fit.lambdas[t]))
    return out
