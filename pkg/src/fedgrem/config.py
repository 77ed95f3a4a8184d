"""Experiment configuration and its INI-style text format.

Every key is optional; missing keys take the defaults of
:class:`ExperimentConfig`. Section and key names are case-insensitive.
Unknown sections or keys are errors. Example::

    [task]
    kind = GMM
    k = 20
    n = 200
    d = 20
    r = 2
    delta = 6
    h = 0

    [contamination]
    epsilon = 0.2
    attack = mean_flip
    placement = random

    [init]
    kind = oracle
    delta_theta = 1.0

    [step]
    rule = corollary_gmm
    c_b = 0.25

    [penalty]
    c_lambda0 = 1.0
    decay = 0.5
    c_floor = 0.1
    delta_conf = 0.05
    # lambda = 3.0   (a constant penalty instead of the decaying schedule)

    [run]
    mode = fedgrem
    t = 40
    align_first = false
    master_seed = 0
    repeats = 10

    [sweep]
    n = 100, 200, 400
    contamination.epsilon = 0, 0.1

A ``[sweep]`` key is either ``section.key`` or one of the shorthands
``n``, ``eps``/``epsilon``, ``h``, ``lambda``, ``mode``. Values are comma
separated; the grid is the product of the axes in the order given.
"""
from __future__ import annotations

import configparser
import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import ConfigError, ContractError
from .federation import Mode
from .local import InitKind, InitStrategy, StepRule
from .mixture import ModelKind
from .synthdata import Attack, ContaminationSpec, Placement, TaskGenSpec

U64 = (1 << 64) - 1


@dataclass(frozen=True)
class StepConfig:
    rule: StepRule = StepRule.COROLLARY_GMM
    c_b: float = 0.25
    eta: float = 1.0
    halvings_max: int = 20


@dataclass(frozen=True)
class PenaltyConfig:
    c_lambda0: float = 1.0
    decay: float = 0.5
    c_floor: float = 0.1
    delta_conf: float = 0.05
    lam: Optional[float] = None  # constant penalty when set


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskGenSpec = field(default_factory=lambda: TaskGenSpec(ModelKind.GMM, 10, 200, 5, 2, 6.0))
    contamination: ContaminationSpec = field(default_factory=ContaminationSpec)
    init: InitStrategy = field(default_factory=lambda: InitStrategy.oracle(0.05, 1.0, c_w=0.5))
    step: StepConfig = field(default_factory=StepConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    mode: Mode = Mode.FEDGREM
    T: int = 40
    align_first: bool = False
    master_seed: int = 0
    repeats: int = 1
    per_task_iota: bool = False
    timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.T < 0 or self.repeats < 0:
            raise ConfigError("run.t and run.repeats must be non-negative")
        if not 0 <= self.master_seed <= U64:
            raise ConfigError(f"master_seed must be an unsigned 64-bit integer, got {self.master_seed}")
        p = self.penalty
        if not 0 < p.decay < 1 or p.c_lambda0 < 0 or p.c_floor < 0 or not 0 < p.delta_conf < 1:
            raise ConfigError("penalty: need 0 < decay < 1, 0 < delta_conf < 1 and "
                              "non-negative c_lambda0 and c_floor")
        if p.lam is not None and not p.lam >= 0:
            raise ConfigError(f"penalty.lambda must be non-negative, got {p.lam}")
        if self.contamination.n_outliers(self.task.K) >= self.task.K:
            raise ConfigError(f"epsilon={self.contamination.epsilon} leaves no inlier task")
        if (self.align_first and self.contamination.placement is Placement.FIRST_BLOCK
                and self.contamination.n_outliers(self.task.K) > 0):
            raise ConfigError("align_first needs a clean first task; first_block placement "
                              "puts an outlier there")
        if self.init.kind is InitKind.KMEANS and self.task.kind is ModelKind.MOR:
            raise ConfigError("kmeans initialization is defined for GMM only")
        if self.init.kind is InitKind.ORACLE and self.init.delta_w >= self.init.c_w / self.task.R:
            raise ConfigError(f"init.delta_w must be below init.c_w / R = {self.init.c_w / self.task.R}")

    @property
    def warnings(self) -> List[str]:
        out = []
        if self.mode is Mode.FEDGREM and self.contamination.epsilon >= 1 / 3:
            out.append(f"epsilon={self.contamination.epsilon} is at or above 1/3, outside the "
                       "range where robustness is guaranteed")
        return out


# --------------------------------------------------------------------------
# parsing


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _u64(s: str) -> int:
    v = int(s.strip(), 0)
    if not 0 <= v <= U64:
        raise ValueError(f"{s!r} is not an unsigned 64-bit integer")
    return v


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in s.split(","))


def _scalar_or_vector(s: str):
    vals = _floats(s)
    return vals[0] if len(vals) == 1 else vals


def _enum(cls):
    def conv(s: str):
        # "NaiveAverage", "naive-average" and "naive_average" all match
        key = s.strip().lower().replace("-", "").replace("_", "")
        for member in cls:
            if key == member.value.lower().replace("_", ""):
                return member
        raise ValueError(f"expected one of {', '.join(m.value for m in cls)}")
    return conv


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


# section -> key -> (target field, converter)
SCHEMA: Dict[str, Dict[str, Tuple[str, object]]] = {
    "task": {
        "kind": ("kind", _enum(ModelKind)), "k": ("K", int), "n": ("n", int), "d": ("d", int),
        "r": ("R", int), "delta": ("delta", float), "h": ("h", float), "c_w": ("c_w", float),
        "m": ("M", float), "dirichlet_alpha": ("dirichlet_alpha", float),
    },
    "contamination": {
        "epsilon": ("epsilon", float), "attack": ("attack", _enum(Attack)),
        "placement": ("placement", _enum(Placement)), "scale": ("scale", float),
        "value": ("value", _floats), "offset": ("offset", _scalar_or_vector),
    },
    "init": {
        "kind": ("kind", _enum(InitKind)), "delta_w": ("delta_w", float),
        "delta_theta": ("delta_theta", float), "c_w": ("c_w", float),
        "restarts": ("restarts", int), "iters": ("iters", int),
    },
    "step": {
        "rule": ("rule", _enum(StepRule)), "c_b": ("c_b", float), "eta": ("eta", float),
        "halvings_max": ("halvings_max", int),
    },
    "penalty": {
        "c_lambda0": ("c_lambda0", float), "decay": ("decay", float),
        "c_floor": ("c_floor", float), "delta_conf": ("delta_conf", float),
        "lambda": ("lam", _opt_float),
    },
    "run": {
        "mode": ("mode", _enum(Mode)), "t": ("T", int), "align_first": ("align_first", _bool),
        "master_seed": ("master_seed", _u64), "repeats": ("repeats", int),
        "per_task_iota": ("per_task_iota", _bool), "timing": ("timing", _bool),
    },
}

SWEEP_ALIASES = {
    "n": "task.n", "eps": "contamination.epsilon", "epsilon": "contamination.epsilon",
    "h": "task.h", "lambda": "penalty.lambda", "mode": "run.mode",
}


def _convert(section: str, key: str, raw: str):
    try:
        name, conv = SCHEMA[section][key]
    except KeyError:
        raise ConfigError(f"unknown key '{key}' in section [{section}]") from None
    try:
        return name, conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Dict[str, str]]) -> ExperimentConfig:
    """Return ``cfg`` with ``{section: {key: raw_text}}`` applied and revalidated."""
    parts = {
        "task": _fields(cfg.task),
        "contamination": _fields(cfg.contamination),
        "init": _fields(cfg.init),
        "step": _fields(cfg.step),
        "penalty": _fields(cfg.penalty),
        "run": {f: getattr(cfg, f) for f in
                ("mode", "T", "align_first", "master_seed", "repeats", "per_task_iota", "timing")},
    }
    for section, items in overrides.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in items.items():
            name, val = _convert(section, key, raw)
            parts[section][name] = val
    try:
        return ExperimentConfig(
            task=TaskGenSpec(**parts["task"]),
            contamination=ContaminationSpec(**parts["contamination"]),
            init=InitStrategy(**parts["init"]),
            step=StepConfig(StepRule(parts["step"].pop("rule")), **parts["step"]),
            penalty=PenaltyConfig(**parts["penalty"]),
            **parts["run"],
        )
    except ConfigError:
        raise
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


@dataclass(frozen=True)
class SweepAxis:
    section: str
    key: str
    values: Tuple[str, ...]

    @property
    def label(self) -> str:
        return f"{self.section}.{self.key}"


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    return cp


def parse_config(text: str, source: str = "<config>") -> Tuple[ExperimentConfig, List[SweepAxis]]:
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    overrides: Dict[str, Dict[str, str]] = {}
    axes: List[SweepAxis] = []
    for section in cp.sections():
        name = section.strip().lower()
        if name == "sweep":
            for key, raw in cp.items(section):
                axes.append(_sweep_axis(key, raw))
            continue
        if name not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        overrides.setdefault(name, {}).update(dict(cp.items(section)))
    return apply_overrides(ExperimentConfig(), overrides), axes


def _sweep_axis(key: str, raw: str) -> SweepAxis:
    target = SWEEP_ALIASES.get(key, key)
    if "." not in target:
        raise ConfigError(f"sweep axis '{key}' must be section.key or a known shorthand")
    section, sub = target.split(".", 1)
    if section not in SCHEMA or sub not in SCHEMA[section]:
        raise ConfigError(f"unknown sweep axis '{key}'")
    values = tuple(v.strip() for v in raw.split(",") if v.strip())
    if not values:
        raise ConfigError(f"sweep axis '{key}' has no values")
    for v in values:
        _convert(section, sub, v)
    return SweepAxis(section, sub, values)


def load_config(path) -> Tuple[ExperimentConfig, List[SweepAxis]]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def grid(cfg: ExperimentConfig, axes: List[SweepAxis]) -> List[ExperimentConfig]:
    """All sweep cells in row-major order of the axes."""
    cells = []
    for combo in itertools.product(*(a.values for a in axes)):
        over: Dict[str, Dict[str, str]] = {}
        for axis, val in zip(axes, combo):
            over.setdefault(axis.section, {})[axis.key] = val
        cells.append(apply_overrides(cfg, over))
    return cells
