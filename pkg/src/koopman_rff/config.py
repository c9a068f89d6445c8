"""Experiment configuration: JSON files with comments, strict key checking.

A config names a benchmark system, how to sample initial particles, the
integration window, one or more dictionaries to fit, training
hyperparameters, and the evaluation protocol. Unknown keys anywhere are
rejected so typos fail loudly, and parse -> serialize -> parse is the
identity.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

from .dynamics import DOMAINS, default_params
from .learning import TrainConfig

SYSTEMS = ("duffing", "double_gyre", "bickley")


class ConfigError(ValueError):
    pass


def _strip_comments(text: str) -> str:
    # full-line // comments and /* */ blocks
    text = re.sub(r"/\*.*?\*/", "", text, flags=re.S)
    return re.sub(r"^\s*//.*$", "", text, flags=re.M)


def _check_keys(payload: dict, allowed, where: str) -> None:
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def _dataclass_from(payload: dict, cls, where: str):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(payload, names, where)
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class SamplingConfig:
    kind: str = "grid"             # "grid" (lattice) or "uniform" (i.i.d.)
    counts: tuple[int, ...] | None = None
    n: int | None = None           # uniform mode only
    bounds: tuple | None = None    # defaults to the system domain
    seed: int = 0                  # uniform draws only; grids ignore it

    def __post_init__(self):
        if self.kind not in ("grid", "uniform"):
            raise ValueError(f"sampling kind must be grid|uniform, got {self.kind!r}")
        if self.kind == "grid" and self.counts is None:
            raise ValueError("grid sampling requires counts")
        if self.kind == "uniform" and self.n is None:
            raise ValueError("uniform sampling requires n")
        if self.counts is not None:
            object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.bounds is not None:
            object.__setattr__(self, "bounds",
                               tuple(tuple(float(v) for v in b) for b in self.bounds))


@dataclass(frozen=True)
class TimeConfig:
    t0: float = 0.0
    t1: float = 1.0
    step: float = 0.1
    solver: str = "rk45"           # "rk45" or "abm4"
    eval_t1: float | None = None   # extend ground truth beyond the training window
    reltol: float = 1e-8
    abstol: float = 1e-10
    substeps: int = 12             # abm4 internal refinement

    def __post_init__(self):
        if self.solver not in ("rk45", "abm4"):
            raise ValueError(f"solver must be rk45|abm4, got {self.solver!r}")
        if self.t1 <= self.t0:
            raise ValueError("t1 must exceed t0")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.eval_t1 is not None and self.eval_t1 < self.t1:
            raise ValueError("eval_t1 must be >= t1")


@dataclass(frozen=True)
class DictionarySpec:
    """One dictionary to fit: rff | gaussian | monomial | kernel."""

    type: str
    m: int | None = None               # rff feature count
    bandwidth: float | None = None     # rff init bandwidth
    grid: tuple[int, int] | None = None  # gaussian center lattice
    sigma: float | None = None         # gaussian width / kernel bandwidth
    degree: int | None = None          # monomial max total degree
    bounds: tuple | None = None        # gaussian center box (default: domain)
    max_points: int | None = None      # kernel: particle subsample
    pair_index: int = 0                # kernel: start snapshot
    lag: int = 1                       # kernel: steps between paired states

    def __post_init__(self):
        required = {"rff": ("m",), "gaussian": ("grid", "sigma"),
                    "monomial": ("degree",), "kernel": ("sigma",)}
        if self.type not in required:
            raise ValueError(f"dictionary type must be one of {sorted(required)}, got {self.type!r}")
        for name in required[self.type]:
            if getattr(self, name) is None:
                raise ValueError(f"dictionary type {self.type!r} requires {name!r}")
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.bounds is not None:
            object.__setattr__(self, "bounds",
                               tuple(tuple(float(v) for v in b) for b in self.bounds))

    def label(self) -> str:
        if self.type == "rff":
            return f"rff_m{self.m}"
        if self.type == "gaussian":
            return f"gaussian_{self.grid[0]}x{self.grid[1]}"
        if self.type == "monomial":
            return f"monomial_d{self.degree}"
        return f"kernel_s{self.sigma:g}"


@dataclass(frozen=True)
class EvalConfig:
    nt: int = 10
    lt: int = 40
    max_starts: int | None = None      # None = every valid start time
    eigfunc_samples: int = 100
    top_j: int = 5
    field_grid: tuple[int, int] = (100, 50)

    def __post_init__(self):
        if self.nt < 1 or self.lt < 1:
            raise ValueError("horizons must be >= 1")
        object.__setattr__(self, "field_grid", tuple(int(g) for g in self.field_grid))


@dataclass(frozen=True)
class ExperimentConfig:
    system: str
    sampling: SamplingConfig
    time: TimeConfig
    dictionaries: tuple[DictionarySpec, ...]
    train: TrainConfig = TrainConfig()
    evaluation: EvalConfig = EvalConfig()
    system_params: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "run"

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"system must be one of {SYSTEMS}, got {self.system!r}")
        if not self.dictionaries:
            raise ValueError("at least one dictionary is required")
        object.__setattr__(self, "dictionaries", tuple(self.dictionaries))
        # validate param names against the system's dataclass
        params = default_params(self.system)
        valid = {f.name for f in dataclasses.fields(params)}
        unknown = set(self.system_params) - valid
        if unknown:
            raise ValueError(f"system_params: unknown key(s) {sorted(unknown)} for {self.system}")

    def params(self):
        base = default_params(self.system)
        if not self.system_params:
            return base
        return dataclasses.replace(base, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in self.system_params.items()})

    def domain(self):
        return self.sampling.bounds if self.sampling.bounds is not None else DOMAINS[self.system]


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            obj = dataclasses.asdict(obj)
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items() if v is not None}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    return clean(cfg)


def config_from_dict(payload: dict) -> ExperimentConfig:
    _check_keys(payload, [f.name for f in dataclasses.fields(ExperimentConfig)], "config")
    try:
        sampling = _dataclass_from(payload.get("sampling", {}), SamplingConfig, "sampling")
        timecfg = _dataclass_from(payload.get("time", {}), TimeConfig, "time")
        train = _dataclass_from(payload.get("train", {}), TrainConfig, "train")
        evaluation = _dataclass_from(payload.get("evaluation", {}), EvalConfig, "evaluation")
        dicts = tuple(_dataclass_from(d, DictionarySpec, f"dictionaries[{i}]")
                      for i, d in enumerate(payload.get("dictionaries", [])))
        return ExperimentConfig(
            system=payload.get("system", ""),
            sampling=sampling,
            time=timecfg,
            dictionaries=dicts,
            train=train,
            evaluation=evaluation,
            system_params=dict(payload.get("system_params", {})),
            seed=int(payload.get("seed", 0)),
            output_dir=str(payload.get("output_dir", "run")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    try:
        payload = json.loads(_strip_comments(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return config_from_dict(payload)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
