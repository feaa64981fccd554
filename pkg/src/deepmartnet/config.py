"""Run configuration: YAML <-> dataclasses, validation and built-in presets.

Keys follow the usual symbols of the method (M, N, dt, T, k, alpha_bdry, ...).
Validation errors name the offending field by its dotted path.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidInput
from .nn import MlpParams, init_mlp, parse_activation
from .problems import PROBLEM_DEFAULTS, ProblemSpec, build_problem
from .trainer import TrainConfig


@dataclass
class ProblemConfig:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class SdeConfig:
    """Paths: one start ``x0`` with ``M`` paths, or ``starts`` with per-start ``counts``."""

    N: int
    dt: float
    T: float
    M: int = 0
    x0: list[float] | None = None  # None -> origin
    starts: list[list[float]] | None = None
    counts: list[int] | None = None
    seed: int = 0
    regenerate_every: int = 0
    drift_in_paths: bool = True

    def start_points(self, d: int) -> tuple[list[np.ndarray], list[int]]:
        if self.starts:
            return [np.asarray(s, dtype=np.float64) for s in self.starts], list(self.counts)
        x0 = np.zeros(d) if self.x0 is None else np.asarray(self.x0, dtype=np.float64)
        return [x0], [self.M]


@dataclass
class EigenConfig:
    kind: str = "scalar"  # scalar | network
    init: float = 0.0
    width: int | None = None
    activation: str = "relu_pow:9"


@dataclass
class NetworkConfig:
    layers: list[int]
    activations: list[str]
    seed: int = 0
    eigen: EigenConfig | None = None

    def build(self) -> MlpParams:
        if self.eigen is None:
            return init_mlp(self.layers, self.activations, seed=self.seed)
        if self.eigen.kind == "network":
            return init_mlp(
                self.layers, self.activations, seed=self.seed,
                eigen_net_width=self.eigen.width or self.layers[0], eigen_net_activation=self.eigen.activation,
            )
        return init_mlp(self.layers, self.activations, seed=self.seed, eigenvalue=self.eigen.init)


@dataclass
class FkConfig:
    """Optional separate path set for the Feynman-Kac target (finer dt than training)."""

    M: int
    dt: float
    N: int
    seed: int = 11
    continuity_correction: bool = True


@dataclass
class RunConfig:
    name: str
    problem: ProblemConfig
    sde: SdeConfig
    network: NetworkConfig
    train: TrainConfig
    fk: FkConfig | None = None
    output: str = "runs"
    cache: bool = False
    cache_dir: str = ".cache"

    def build_problem(self) -> ProblemSpec:
        return build_problem(self.problem.name, **self.problem.params)

    def validate(self) -> RunConfig:
        """Cross-field checks; raises InvalidInput naming the field."""
        if self.problem.name not in PROBLEM_DEFAULTS:
            raise InvalidInput(f"problem.name: unknown problem {self.problem.name!r}")
        try:
            pb = self.build_problem()
        except InvalidInput as exc:
            raise InvalidInput(f"problem.params: {exc}") from None
        s = self.sde
        if s.N < 1:
            raise InvalidInput(f"sde.N: must be >= 1, got {s.N}")
        if not s.dt > 0:
            raise InvalidInput(f"sde.dt: must be > 0, got {s.dt}")
        if abs(s.T - s.N * s.dt) > 1e-12 * max(1.0, abs(s.T)):
            raise InvalidInput(f"sde.T: T={s.T} differs from N*dt={s.N * s.dt}")
        if s.starts:
            if not s.counts or len(s.counts) != len(s.starts):
                raise InvalidInput("sde.counts: one path count per starting point is required")
            if any(c < 1 for c in s.counts):
                raise InvalidInput("sde.counts: every count must be >= 1")
            for j, x in enumerate(s.starts):
                if len(x) != pb.d:
                    raise InvalidInput(f"sde.starts[{j}]: expected {pb.d} coordinates, got {len(x)}")
        else:
            if s.M < 1:
                raise InvalidInput(f"sde.M: must be >= 1, got {s.M}")
            if s.x0 is not None and len(s.x0) != pb.d:
                raise InvalidInput(f"sde.x0: expected {pb.d} coordinates, got {len(s.x0)}")
        if s.regenerate_every < 0:
            raise InvalidInput("sde.regenerate_every: must be >= 0")
        for x in s.start_points(pb.d)[0]:
            if pb.domain.bounded and not pb.domain.interior(x[None])[0]:
                raise InvalidInput(f"sde: starting point {x.tolist()} is not inside the domain")
        n = self.network
        if not n.layers or n.layers[0] != pb.d:
            raise InvalidInput(f"network.layers: first size must equal the problem dimension {pb.d}")
        if n.layers[-1] != 1:
            raise InvalidInput("network.layers: the output size must be 1")
        if len(n.activations) != len(n.layers) - 2:
            raise InvalidInput(f"network.activations: {len(n.layers) - 2} hidden layers need as many tags")
        for j, tag in enumerate(n.activations):
            try:
                parse_activation(tag)
            except InvalidInput as exc:
                raise InvalidInput(f"network.activations[{j}]: {exc}") from None
        if pb.is_eigen and n.eigen is None:
            raise InvalidInput("network.eigen: eigenproblems need an eigenvalue carrier")
        if n.eigen is not None and n.eigen.kind not in ("scalar", "network"):
            raise InvalidInput(f"network.eigen.kind: expected 'scalar' or 'network', got {n.eigen.kind!r}")
        t = self.train
        w = t.weights
        if w.norm_points is not None:
            try:
                w.normalization_points(pb.d)
            except InvalidInput as exc:
                raise InvalidInput(f"train.weights.norm_points: {exc}") from None
        counts = s.start_points(pb.d)[1]
        if t.batch_size is not None and t.batch_size > min(counts):
            raise InvalidInput(f"train.batch_size: {t.batch_size} exceeds the {min(counts)} paths per start")
        if t.batch_size is None:
            if not t.m1 > t.m2 >= 1:
                raise InvalidInput(f"train.m1/m2: need m1 > m2 >= 1, got {t.m1}, {t.m2}")
        span = max(t.k, 1)
        if span > s.N:
            raise InvalidInput(f"train.k: span {span} exceeds N={s.N}")
        if w.alpha_fk > 0 and (pb.feynman_kac is None or not pb.domain.bounded):
            raise InvalidInput("train.weights.alpha_fk: this problem has no Feynman-Kac target")
        if w.drift_in_loss == s.drift_in_paths and pb.coefficients.drift is not None:
            raise InvalidInput("train.weights.drift_in_loss: must be the opposite of sde.drift_in_paths")
        return self


# -- dict <-> dataclass ---------------------------------------------------------------


def _is_dc(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(tp, value, path: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise InvalidInput(f"{path}: value required")
    if _is_dc(tp):
        return from_dict(tp, value, path)
    origin = typing.get_origin(tp)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInput(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise InvalidInput(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise InvalidInput(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise InvalidInput(f"{path}: expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise InvalidInput(f"{path}: expected a list, got {value!r}")
        (item,) = typing.get_args(tp) or (typing.Any,)
        return [_coerce(item, v, f"{path}[{j}]") for j, v in enumerate(value)]
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise InvalidInput(f"{path}: expected {len(args)} values, got {value!r}")
        return tuple(_coerce(a, v, f"{path}[{j}]") for j, (a, v) in enumerate(zip(args, value)))
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise InvalidInput(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise InvalidInput(f"{path or cls.__name__}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    unknown = set(data) - names
    if unknown:
        raise InvalidInput(f"{path + '.' if path else ''}{sorted(unknown)[0]}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise InvalidInput(f"{path + '.' if path else ''}{f.name}: required key missing")
            continue
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path + '.' if path else ''}{f.name}")
    try:
        return cls(**kwargs)
    except InvalidInput as exc:
        raise InvalidInput(f"{path or cls.__name__}: {exc}") from None


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if not f.name.startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def parse_config(data: dict) -> RunConfig:
    return from_dict(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidInput(f"{path}: not valid YAML ({exc})") from None
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


# -- presets ----------------------------------------------------------------------------


def _pbe_train(epochs: int, lr: float = 0.05) -> dict:
    return {
        "epochs": epochs,
        "k": 1,
        "schedule": {"initial": lr},
        "weights": {"alpha_fk": 10.0, "alpha_bdry": 1000.0},
        "batch_size": 1000,
        "n_bdry": 2000,
        "eval": {"kind": "uniform", "n": 10000},
    }


def _fp(d: int, M: int, N: int, epochs: int, layers=None, eigen_kind: str = "network") -> dict:
    x2 = [0.0] * d
    x2[0] = 1.0
    return {
        "name": f"fp-eig-d{d}",
        "problem": {"name": "fokker-planck-eig", "params": {"d": d}},
        "sde": {"M": M, "N": N, "dt": 9.0 / N, "T": 9.0, "seed": 0},
        "network": {
            "layers": layers or [d, 6 * d, 3 * d, 1],
            "activations": ["tanh", "tanh"],
            "seed": 0,
            "eigen": {"kind": eigen_kind, "width": d, "activation": "relu_pow:9"},
        },
        "train": {
            "epochs": epochs,
            "k": 3,
            "schedule": {"initial": 1.0 / 150.0, "decay_factor": 0.5, "decay_every": 500, "extra_halvings": [[7500, 0.25]]},
            "weights": {
                "alpha_normal": 50.0, "fractional": True, "p": 0.375, "q": 1.0, "r": 0.75,
                "c_norm": 30.0, "p_norm": 1, "norm_points": [[0.0] * d, x2], "dt_prefactor": True,
            },
            "m1": 200.0,
            "m2": 25.0,
            "eval": {"kind": "diagonal", "n": 2001, "extent": 2.0},
        },
    }


PRESETS: dict[str, dict] = {
    "pbe-cube-d20": {
        "name": "pbe-cube-d20",
        "problem": {"name": "pbe-cube", "params": {"d": 20}},
        "sde": {"M": 100_000, "N": 900, "dt": 0.01, "T": 9.0, "seed": 0},
        "network": {"layers": [20, 64, 32, 1], "activations": ["tanh", "gelu_tanh"], "seed": 0},
        "train": _pbe_train(2000),
    },
    "pbe-3x0": {
        "name": "pbe-3x0",
        "problem": {"name": "pbe-cube", "params": {"d": 20}},
        "sde": {
            "N": 900, "dt": 0.01, "T": 9.0, "seed": 0,
            "starts": [[l] + [0.0] * 19 for l in (0.1, 0.3, 0.7)],
            "counts": [40_000, 40_000, 40_000],
        },
        "network": {"layers": [20, 64, 32, 1], "activations": ["tanh", "gelu_tanh"], "seed": 0},
        "train": _pbe_train(2000),
    },
    "pbe-ball-d100": {
        "name": "pbe-ball-d100",
        "problem": {"name": "pbe-ball", "params": {"d": 100}},
        "sde": {"M": 100_000, "N": 50, "dt": 0.005, "T": 0.25, "seed": 0},
        "network": {"layers": [100, 128, 32, 1], "activations": ["tanh", "gelu_tanh"], "seed": 0},
        "train": _pbe_train(2000),
    },
    "pbe-sinh-d10": {
        "name": "pbe-sinh-d10",
        "problem": {"name": "pbe-sinh", "params": {"d": 10, "L": 1.0, "alpha": 2.0}},
        "sde": {"M": 1_000_000, "N": 25, "dt": 0.01, "T": 0.25, "seed": 0},
        "network": {"layers": [10, 10, 10, 1], "activations": ["tanh", "gelu_tanh"], "seed": 0},
        "train": {
            "epochs": 3000,
            "k": 1,
            "schedule": {"initial": 0.01, "decay_factor": 0.99, "decay_every": 100},
            "weights": {"alpha_bdry": 1e-4},
            "batch_size": 4000,
            "n_bdry": 2000,
            "eval": {"kind": "uniform", "n": 10000},
        },
    },
    "laplace-eig-d10": {
        "name": "laplace-eig-d10",
        "problem": {"name": "laplace-eig", "params": {"d": 10, "L": 1.0}},
        "sde": {"M": 100_000, "N": 60, "dt": 0.01, "T": 0.6, "seed": 0},
        "network": {
            "layers": [10, 20, 10, 1], "activations": ["gelu_tanh", "gelu_tanh"], "seed": 0,
            "eigen": {"kind": "scalar", "init": 0.0},
        },
        "train": {
            "epochs": 10_000,
            "k": 1,
            "schedule": {"initial": 0.02, "decay_factor": 0.995, "decay_every": 100},
            "weights": {"alpha_bdry": 1000.0, "alpha_normal": 10.0, "alpha_eig": 2.5e-8, "p_norm": 1, "c_norm": 1.0},
            "batch_size": 1000,
            "n_bdry": 2000,
            "eval": {"kind": "uniform", "n": 10000},
        },
    },
    "fp-eig-d5": _fp(5, 9000, 1350, 10_000),
    "fp-eig-d20": _fp(20, 6000, 450, 3000),
    "fp-eig-d200": _fp(200, 24_000, 1300, 10_000),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise InvalidInput(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return parse_config(copy.deepcopy(PRESETS[name]))
