"""Permutation-invariant estimation error against known truths."""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import CapacityError, ContractError

MAX_R = 8


def _stack(items, attr):
    return np.stack([np.asarray(getattr(p, attr), dtype=float) for p in items])


def estimation_error(estimates: Sequence, truths: Sequence, per_task: bool = False):
    """Best relabeling ``iota`` and the aligned errors over the given tasks.

    ``estimates[k].components[iota[r]]`` is compared with
    ``truths[k].components[r]``. One ``iota`` is shared by all tasks and
    chosen to minimise the max component error; ties go to the first
    permutation in lexicographic order. Returns ``(iota, err_theta, err_w)``.

    With ``per_task`` every task picks its own relabeling; ``iota`` is then a
    ``(K, R)`` array.
    """
    if len(estimates) != len(truths) or not estimates:
        raise ContractError("need the same non-zero number of estimates and truths")
    est_t, tru_t = _stack(estimates, "components"), _stack(truths, "components")
    est_w, tru_w = _stack(estimates, "weights"), _stack(truths, "weights")
    if est_t.shape != tru_t.shape:
        raise ContractError(f"estimate shape {est_t.shape} differs from truth {tru_t.shape}")
    R = est_t.shape[1]
    if R > MAX_R:
        raise CapacityError(f"R={R} exceeds the relabeling enumeration guard of {MAX_R}")
    perms = np.array(list(itertools.permutations(range(R))), dtype=int)
    # err[p, k, r] = |est[k][perm_p[r]] - truth[k][r]|
    err_t = np.linalg.norm(est_t[:, perms, :].transpose(1, 0, 2, 3) - tru_t[None], axis=3)
    err_w = np.abs(est_w[:, perms].transpose(1, 0, 2) - tru_w[None])
    if per_task:
        best = np.argmin(err_t.max(axis=2), axis=0)
        k = np.arange(est_t.shape[0])
        return perms[best], float(err_t[best, k].max()), float(err_w[best, k].max())
    best = int(np.argmin(err_t.max(axis=(1, 2))))
    return perms[best], float(err_t[best].max()), float(err_w[best].max())
