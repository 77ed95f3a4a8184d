"""Synthetic multi-task mixtures and outlier-task contamination.

Every inlier task shares ``R`` base centers, each moved by at most ``h``;
mixture proportions differ per task but never drop below ``c_w / R``.
Contamination replaces a fraction of the tasks with adversarial data.

Dataset text format (one file per task)::

    kind,n,d,R
    GMM,200,5,3
    x_1,...,x_d          (GMM rows)
    x_1,...,x_d,y        (MoR rows)

Floats are written with ``repr`` so a read-back is bit-exact. Truth files
use the same two header lines followed by ``R`` rows ``w_r,theta_r1..theta_rd``.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, InfeasibleError
from .local import uniform_ball
from .mixture import MixtureParams, ModelKind, TaskDataset, sample

CENTER_ATTEMPTS = 10_000


@dataclass(frozen=True)
class TaskGenSpec:
    kind: ModelKind
    K: int
    n: int
    d: int
    R: int
    delta: float
    h: float = 0.0
    c_w: float = 0.5
    M: float = 5.0
    dirichlet_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        for name in ("K", "n", "d", "R"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.delta < 0 or self.h < 0:
            raise ContractError("delta and h must be non-negative")
        if not self.M > 0:
            raise ContractError(f"M must be positive, got {self.M}")
        if self.delta > 2 * self.M:
            raise ContractError(f"delta={self.delta} exceeds 2M={2 * self.M}: no placement exists")
        if not 0 < self.c_w <= 1 or self.c_w / self.R >= 1:
            raise ContractError(f"need 0 < c_w <= 1 and c_w/R < 1, got c_w={self.c_w}, R={self.R}")
        if not self.dirichlet_alpha > 0:
            raise ContractError("dirichlet_alpha must be positive")


class Attack(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    MEAN_FLIP = "mean_flip"
    POINT_MASS = "point_mass"
    CLUSTER_SWAPPED = "cluster_swapped"
    SHIFTED_COPY = "shifted_copy"


class Placement(str, enum.Enum):
    RANDOM = "random"
    LAST_BLOCK = "last_block"
    FIRST_BLOCK = "first_block"


@dataclass(frozen=True)
class ContaminationSpec:
    """Which tasks become outliers and what their data looks like.

    ``scale`` parameterises GaussianNoise, ``value`` PointMass (zeros when
    unset) and ``offset`` ShiftedCopy (a scalar is broadcast to every
    coordinate).
    """

    epsilon: float = 0.0
    attack: Attack = Attack.GAUSSIAN_NOISE
    placement: Placement = Placement.RANDOM
    scale: float = 1.0
    value: Optional[Tuple[float, ...]] = None
    offset: Union[float, Tuple[float, ...]] = 5.0

    def __post_init__(self):
        object.__setattr__(self, "attack", Attack(self.attack))
        object.__setattr__(self, "placement", Placement(self.placement))
        if not 0 <= self.epsilon < 1:
            raise ContractError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.scale >= 0:
            raise ContractError("noise scale must be non-negative")

    def n_outliers(self, K: int) -> int:
        # tolerate float noise such as 0.3 * 10 = 2.9999999999999996
        return int(math.floor(self.epsilon * K + 1e-9))


def _min_gap(c):
    if c.shape[0] < 2:
        return math.inf
    return min(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(c, 2))


def gen_centers(spec: TaskGenSpec, rng: np.random.Generator):
    """Base centers ``(R, d)`` and per-task copies ``(K, R, d)``.

    Centers are drawn jointly inside the ball of radius ``M`` and redrawn
    until every pair is at least ``delta`` apart. When the first half of the
    budget fails, the remaining attempts draw on the sphere of radius ``M``,
    where near-maximal separations have positive probability.
    """
    R, d = spec.R, spec.d
    base = None
    for attempt in range(CENTER_ATTEMPTS):
        if attempt < CENTER_ATTEMPTS // 2:
            cand = uniform_ball(rng, spec.M, d, size=R)
        else:
            g = rng.standard_normal((R, d))
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            cand = spec.M * g / norms
        if _min_gap(cand) >= spec.delta:
            base = cand
            break
    if base is None:
        raise InfeasibleError(
            f"no {R} centers with pairwise separation >= {spec.delta} found in the ball of "
            f"radius {spec.M} in d={d} after {CENTER_ATTEMPTS} attempts")
    if spec.h == 0:
        per_task = np.tile(base, (spec.K, 1, 1))
    else:
        per_task = base[None] + uniform_ball(rng, spec.h, d, size=spec.K * R).reshape(spec.K, R, d)
    return base, per_task


def gen_weights(spec: TaskGenSpec, rng: np.random.Generator) -> np.ndarray:
    """``(K, R)`` proportions: Dirichlet draws mixed with the uniform vector."""
    R = spec.R
    raw = rng.dirichlet(np.full(R, float(spec.dirichlet_alpha)), size=spec.K)
    floor = spec.c_w / R
    return (1.0 - spec.c_w) * raw + floor


def gen_tasks(spec: TaskGenSpec, rng: np.random.Generator):
    """Returns ``(datasets, truths, inlier_flags)`` for ``K`` clean tasks."""
    _, per_task = gen_centers(spec, rng)
    weights = gen_weights(spec, rng)
    truths = [MixtureParams(weights[k], per_task[k]) for k in range(spec.K)]
    datasets = [sample(spec.kind, truths[k], spec.n, rng) for k in range(spec.K)]
    return datasets, truths, [True] * spec.K


def outlier_indices(K: int, spec: ContaminationSpec, rng: np.random.Generator) -> List[int]:
    m = spec.n_outliers(K)
    if m >= K:
        raise ContractError(f"epsilon={spec.epsilon} leaves no inlier among {K} tasks")
    if m == 0:
        return []
    if spec.placement is Placement.LAST_BLOCK:
        return list(range(K - m, K))
    if spec.placement is Placement.FIRST_BLOCK:
        return list(range(m))
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def _vector(v, d, default=0.0):
    arr = np.full(d, float(default)) if v is None else np.broadcast_to(np.asarray(v, dtype=float), (d,))
    if not np.all(np.isfinite(arr)):
        raise ContractError("attack vector must be finite")
    return np.array(arr)


def _attack(task: TaskDataset, truth: MixtureParams, spec: ContaminationSpec, rng):
    kind, n, d = task.kind, task.n, task.d
    a = spec.attack
    if a is Attack.GAUSSIAN_NOISE:
        x = spec.scale * rng.standard_normal((n, d))
        y = spec.scale * rng.standard_normal(n) if kind is ModelKind.MOR else None
        return TaskDataset(kind, x, y)
    if a is Attack.MEAN_FLIP:
        return sample(kind, truth.with_components(-truth.components), n, rng)
    if a is Attack.POINT_MASS:
        x = np.tile(_vector(spec.value, d), (n, 1))
        return TaskDataset(kind, x, np.zeros(n) if kind is ModelKind.MOR else None)
    if a is Attack.CLUSTER_SWAPPED:
        R = truth.R
        if R < 2:
            raise ContractError("cluster_swapped needs R >= 2")
        perm = np.arange(R)
        while np.array_equal(perm, np.arange(R)):
            perm = rng.permutation(R)
        # components move, weights stay in place
        return sample(kind, truth.with_components(truth.components[perm]), n, rng)
    # shifted copy: GMM rows move by the offset; MoR responses move by x'offset,
    # which shifts every regression vector by the offset
    off = _vector(spec.offset, d)
    if kind is ModelKind.GMM:
        return TaskDataset(kind, task.observations + off)
    return TaskDataset(kind, task.observations, task.responses + task.observations @ off)


def apply_contamination(tasks: Sequence[TaskDataset], truths: Sequence[MixtureParams],
                        spec: ContaminationSpec, rng: np.random.Generator):
    """Replace ``floor(epsilon K)`` task datasets with attack data.

    Returns ``(tasks, inlier_flags)``; inlier datasets are passed through
    as the same objects.
    """
    K = len(tasks)
    bad = outlier_indices(K, spec, rng)
    out = list(tasks)
    flags = [True] * K
    for k in bad:
        out[k] = _attack(tasks[k], truths[k], spec, rng)
        flags[k] = False
    return out, flags


# --------------------------------------------------------------------------
# text format


def _header(kind, n, d, R):
    return f"kind,n,d,R\n{ModelKind(kind).value},{n},{d},{R}\n"


def _row(values):
    return ",".join(repr(float(v)) for v in values) + "\n"


def _read_header(lines, path):
    if len(lines) < 2 or lines[0].strip() != "kind,n,d,R":
        raise ContractError(f"{path}: missing 'kind,n,d,R' header")
    parts = lines[1].strip().split(",")
    if len(parts) != 4:
        raise ContractError(f"{path}: malformed header values {lines[1].strip()!r}")
    try:
        return ModelKind(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise ContractError(f"{path}: {exc}") from None


def _read_rows(lines, path, width):
    rows = []
    for i, line in enumerate(lines, start=3):
        parts = line.strip().split(",")
        if len(parts) != width:
            raise ContractError(f"{path}:{i}: expected {width} values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ContractError(f"{path}:{i}: {exc}") from None
    return np.array(rows, dtype=float).reshape(len(rows), width)


def write_dataset(path, data: TaskDataset, R: int) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(_header(data.kind, data.n, data.d, R))
        for i in range(data.n):
            vals = list(data.observations[i])
            if data.responses is not None:
                vals.append(data.responses[i])
            fh.write(_row(vals))


def read_dataset(path) -> Tuple[TaskDataset, int]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    kind, n, d, R = _read_header(lines, path)
    mor = kind is ModelKind.MOR
    rows = _read_rows(lines[2:], path, d + int(mor))
    if rows.shape[0] != n:
        raise ContractError(f"{path}: header says n={n}, found {rows.shape[0]} rows")
    if mor:
        return TaskDataset(kind, rows[:, :d], rows[:, d]), R
    return TaskDataset(kind, rows), R


def write_truth(path, kind, params: MixtureParams, n: int) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(_header(kind, n, params.d, params.R))
        for r in range(params.R):
            fh.write(_row([params.weights[r], *params.components[r]]))


def read_truth(path) -> MixtureParams:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    _, _, d, R = _read_header(lines, path)
    rows = _read_rows(lines[2:], path, d + 1)
    if rows.shape[0] != R:
        raise ContractError(f"{path}: header says R={R}, found {rows.shape[0]} rows")
    return MixtureParams(rows[:, 0], rows[:, 1:])
