"""Label-permutation alignment across tasks.

Convention: ``perms[k][r]`` is the index of the component in task ``k`` that
plays global label ``r``, so the aligned estimate of task ``k`` is
``estimates[k][perms[k]]``. A common relabeling ``iota`` of the global labels
maps ``perms[k]`` to ``perms[k][iota]`` for every task and leaves the score
unchanged.
"""
from __future__ import annotations

import enum
import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, ContractError

EXHAUSTIVE_LOG2_LIMIT = 30.0
ENUMERATE_LIMIT = math.factorial(10)
_TIE_RTOL = 1e-12
_CHUNK = 1 << 18


class StepwiseMode(str, enum.Enum):
    ENUMERATE = "enumerate"
    ASSIGNMENT = "assignment"


@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray  # (K, R) int

    def __post_init__(self):
        p = np.array(self.perms, dtype=int)
        if p.ndim != 2:
            raise ContractError(f"permutation set must be K x R, got shape {p.shape}")
        expected = np.arange(p.shape[1])
        for k, row in enumerate(p):
            if not np.array_equal(np.sort(row), expected):
                raise ContractError(f"task {k}: {row.tolist()} is not a permutation")
        p.flags.writeable = False
        object.__setattr__(self, "perms", p)

    @classmethod
    def identity(cls, K: int, R: int) -> "PermutationSet":
        return cls(np.tile(np.arange(R), (K, 1)))

    def __len__(self):
        return self.perms.shape[0]

    def __getitem__(self, k):
        return self.perms[k]

    def relabeled(self, iota) -> "PermutationSet":
        return PermutationSet(self.perms[:, np.asarray(iota, dtype=int)])


def _as_estimates(estimates) -> np.ndarray:
    arr = np.asarray([getattr(e, "components", e) for e in estimates], dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ContractError(f"estimates must be K x R x d, got shape {arr.shape}")
    return arr


def _all_perms(R: int) -> np.ndarray:
    # lexicographic order of image tuples
    return np.array(list(itertools.permutations(range(R))), dtype=int).reshape(-1, R)


def _dist(a, b):
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)


def score(perms, estimates, k_limit: Optional[int] = None) -> float:
    """Sum over ordered task pairs ``k != k'`` among the first ``k_limit``
    tasks of the aligned component distances."""
    est = _as_estimates(estimates)
    P = perms.perms if isinstance(perms, PermutationSet) else np.asarray(perms, dtype=int)
    K = est.shape[0]
    k_limit = K if k_limit is None else k_limit
    if not 0 <= k_limit <= K or P.shape[0] < k_limit or P.shape[1] != est.shape[1]:
        raise ContractError(
            f"score needs k_limit <= K={K} and perms of shape (>= k_limit, {est.shape[1]})")
    aligned = np.stack([est[k][P[k]] for k in range(k_limit)]) if k_limit else est[:0]
    total = 0.0
    for k in range(k_limit):
        for j in range(k_limit):
            if j != k:
                total += float(np.linalg.norm(aligned[k] - aligned[j], axis=1).sum())
    return total


def _stepwise_cost(est, fixed, k):
    """``C[r, a] = sum_{j<k} |est[j][fixed[j][r]] - est[k][a]|``."""
    C = np.zeros((est.shape[1], est.shape[1]))
    for j in range(k):
        C += _dist(est[j][fixed[j]], est[k])
    return C


def _argmin_first(values):
    best = values.min()
    tol = _TIE_RTOL * max(1.0, abs(best))
    return int(np.flatnonzero(values <= best + tol)[0])


def _lex_min_assignment(C):
    """Optimal assignment ``r -> perm[r]``, lexicographically smallest among ties."""
    R = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    best = float(C[rows, cols].sum())
    tol = _TIE_RTOL * max(1.0, abs(best))
    perm = np.empty(R, dtype=int)
    perm[rows] = cols
    free = list(range(R))
    fixed = 0.0
    for r in range(R - 1):
        rest = np.arange(r + 1, R)
        for a in free:
            if a == perm[r]:
                break
            others = [b for b in free if b != a]
            sub = C[np.ix_(rest, others)]
            rr, cc = linear_sum_assignment(sub)
            if fixed + C[r, a] + sub[rr, cc].sum() <= best + tol:
                perm[r] = a
                perm[rest[rr]] = np.asarray(others)[cc]
                break
        fixed += C[r, perm[r]]
        free.remove(perm[r])
    return perm


def _stepwise_order(est, order, mode: StepwiseMode, all_perms=None):
    K, R = est.shape[:2]
    perms = np.zeros((K, R), dtype=int)
    done = []
    for step, k in enumerate(order):
        if step == 0:
            perms[k] = np.arange(R)
        else:
            C = np.zeros((R, R))
            for j in done:
                C += _dist(est[j][perms[j]], est[k])
            if mode is StepwiseMode.ASSIGNMENT:
                perms[k] = _lex_min_assignment(C)
            else:
                costs = C[np.arange(R), all_perms].sum(axis=1)
                perms[k] = all_perms[_argmin_first(costs)]
        done.append(k)
    return perms


def align_stepwise(estimates, mode=StepwiseMode.ASSIGNMENT, shuffles: int = 0,
                   rng: Optional[np.random.Generator] = None) -> PermutationSet:
    """Greedy sequential alignment.

    Task ``k`` takes the permutation minimising its summed distance to the
    already-aligned tasks ``0..k-1``. That objective is additive over labels,
    so the assignment mode solves it exactly as a linear assignment problem;
    the enumerate mode scans all ``R!`` permutations.

    ``shuffles > 0`` runs the greedy pass over that many random task orders
    as well and takes a per-task majority vote after mapping every run onto
    the first one's labels (an experimental consensus variant).
    """
    mode = StepwiseMode(mode)
    est = _as_estimates(estimates)
    K, R = est.shape[:2]
    all_perms = None
    if mode is StepwiseMode.ENUMERATE:
        if math.factorial(R) > ENUMERATE_LIMIT:
            raise CapacityError(f"R! = {math.factorial(R)} too large to enumerate; use assignment mode")
        all_perms = _all_perms(R)
    base = _stepwise_order(est, range(K), mode, all_perms)
    if shuffles <= 0:
        return PermutationSet(base)
    rng = rng if rng is not None else np.random.default_rng(0)
    runs = [base]
    for _ in range(shuffles):
        runs.append(_stepwise_order(est, rng.permutation(K), mode, all_perms))
    return PermutationSet(_majority_vote(runs, R))


def _majority_vote(runs, R):
    ref = runs[0]
    canon = []
    for run in runs:
        # relabel the run so that it agrees with the reference on as many tasks as possible
        agree = np.zeros((R, R))
        for k in range(ref.shape[0]):
            # run[k][iota[r]] should equal ref[k][r]
            inv = np.argsort(run[k])
            for r in range(R):
                agree[r, inv[ref[k][r]]] += 1
        rows, cols = linear_sum_assignment(-agree)
        iota = np.empty(R, dtype=int)
        iota[rows] = cols
        canon.append(run[:, iota])
    out = np.empty_like(ref)
    for k in range(ref.shape[0]):
        votes = Counter(tuple(c[k]) for c in canon)
        top = max(votes.values())
        out[k] = min(p for p, v in votes.items() if v == top)
    return out


def align_exhaustive(estimates) -> PermutationSet:
    """Global minimiser of the score over all per-task permutations.

    Ties go to the lexicographically smallest flattened permutation list.
    The first task is pinned to the identity, which loses nothing: the score
    is invariant under a common relabeling and the lexicographically smallest
    member of any optimal orbit starts with the identity. The remaining tasks
    are enumerated depth-first in lexicographic order, pruning any partial
    assignment whose (non-negative) partial score already exceeds the best
    complete one.
    """
    est = _as_estimates(estimates)
    K, R = est.shape[:2]
    m = math.factorial(R)
    if K * math.log2(m) > EXHAUSTIVE_LOG2_LIMIT:
        raise CapacityError(
            f"exhaustive search over (R!)^K = {m}^{K} permutation sets exceeds 2^30; "
            "use align_stepwise")
    if K == 1 or R == 1:
        return PermutationSet.identity(K, R)
    P = _all_perms(R)
    # pair tables: cost[j][k][p, q] for ordered j < k, with task 0 pinned to p = 0
    D = [[None] * K for _ in range(K)]
    for j in range(K):
        for k in range(j + 1, K):
            dist = _dist(est[j], est[k])
            rows = P[:1] if j == 0 else P
            D[j][k] = dist[rows[:, None, :], P[None, :, :]].sum(axis=2)

    seed = _stepwise_order(est, range(K), StepwiseMode.ASSIGNMENT)
    inv_first = np.argsort(seed[0])
    seed = seed[:, inv_first]  # relabel so task 0 is the identity
    seed_idx = [int(np.flatnonzero((P == row).all(axis=1))[0]) for row in seed]
    state = {"val": sum(D[j][k][0 if j == 0 else seed_idx[j], seed_idx[k]]
                        for j in range(K) for k in range(j + 1, K)),
             "idx": seed_idx}

    def tol():
        return _TIE_RTOL * max(1.0, state["val"]) + 1e-12

    def expand(idx, partial):
        k = idx.shape[1]
        if k == K:
            i = _argmin_first(partial)
            v = float(partial[i])
            cand = idx[i].tolist()
            if v < state["val"] - tol() or (v <= state["val"] + tol() and cand < state["idx"]):
                state["val"], state["idx"] = min(v, state["val"]), cand
            return
        F = idx.shape[0]
        if F * m > _CHUNK and F > 1:
            step = max(1, _CHUNK // m)
            for start in range(0, F, step):
                expand(idx[start:start + step], partial[start:start + step])
            return
        new_idx = np.empty((F * m, k + 1), dtype=int)
        new_idx[:, :k] = np.repeat(idx, m, axis=0)
        new_idx[:, k] = np.tile(np.arange(m), F)
        add = np.zeros((F, m))
        for j in range(k):
            table = D[j][k]
            add += table[0][None, :] if j == 0 else table[idx[:, j]]
        new_partial = (partial[:, None] + add).reshape(-1)
        keep = new_partial <= state["val"] + tol()
        new_idx, new_partial = new_idx[keep], new_partial[keep]
        if new_idx.shape[0]:
            expand(new_idx, new_partial)

    expand(np.zeros((1, 1), dtype=int), np.zeros(1))
    return PermutationSet(P[state["idx"]])


def best_permutation_match(estimate, truth):
    """Permutation minimising ``sum_r |estimate[perm[r]] - truth[r]|``.

    Returns ``(perm, distances)`` with ``distances[r]`` the aligned distance
    for label ``r``.
    """
    est = np.asarray(getattr(estimate, "components", estimate), dtype=float)
    tru = np.asarray(getattr(truth, "components", truth), dtype=float)
    if est.ndim == 1:
        est, tru = est[:, None], tru[:, None]
    if est.shape != tru.shape:
        raise ContractError(f"estimate {est.shape} and truth {tru.shape} differ in shape")
    C = _dist(tru, est)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(est.shape[0], dtype=int)
    perm[rows] = cols
    return perm, C[np.arange(est.shape[0]), perm]


def common_relabeling(found, planted, tasks: Optional[Sequence[int]] = None):
    """The ``iota`` with ``found[k] == planted[k][iota]`` on all given tasks, or None."""
    F = found.perms if isinstance(found, PermutationSet) else np.asarray(found, dtype=int)
    T = planted.perms if isinstance(planted, PermutationSet) else np.asarray(planted, dtype=int)
    tasks = list(range(F.shape[0])) if tasks is None else list(tasks)
    if not tasks:
        return np.arange(F.shape[1])
    k0 = tasks[0]
    iota = np.argsort(T[k0])[F[k0]]
    for k in tasks:
        if not np.array_equal(T[k][iota], F[k]):
            return None
    return iota


def apply_alignment(params_list, perms: PermutationSet):
    """Relabel each task's parameters so component ``r`` is global label ``r``."""
    return [p.permuted(perms[k]) for k, p in enumerate(params_list)]
