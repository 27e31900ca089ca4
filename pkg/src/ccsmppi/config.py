"""Scenario configuration: schema, YAML round-trip and construction of runtime objects.

A config is a tree of frozen dataclasses holding only plain Python values
(floats, ints, strings, tuples), so equality and hashing are structural and
``load(dump(cfg)) == cfg`` holds exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .controller import CcsMppiConfig, Scenario
from .costs import COST_TAGS, Obstacle, RunningCost
from .dynamics import make_double_integrator
from .halfspace import Track
from .mppi import MppiParams

CONTROLLERS = ("ccsmppi", "tube", "mppi")
NOISE_SCALINGS = ("none", "dt", "dt2")


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


def _matrix(value, n: int, name: str) -> tuple[tuple[float, ...], ...]:
    """Canonical square matrix from a scalar, a diagonal list or a nested list."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(n)
    elif arr.ndim == 1:
        if arr.size != n:
            raise ConfigError(f"{name}: diagonal needs {n} entries, got {arr.size}")
        arr = np.diag(arr)
    if arr.shape != (n, n):
        raise ConfigError(f"{name}: expected a {n}x{n} matrix, got shape {arr.shape}")
    if not np.allclose(arr, arr.T):
        raise ConfigError(f"{name}: matrix must be symmetric")
    return tuple(tuple(float(v) for v in row) for row in arr)


def _vector(value, n: int, name: str) -> tuple[float, ...]:
    arr = np.asarray(value, dtype=float).ravel()
    if arr.size != n:
        raise ConfigError(f"{name}: expected {n} entries, got {arr.size}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class ObstacleSpec:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vector(self.center, 2, "obstacle center"))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ConfigError("obstacle radius must be positive")


@dataclass(frozen=True)
class TrackSpec:
    R_c: float = 2.0
    band: float = 0.125
    v_des: float = 6.0

    def __post_init__(self):
        for name in ("R_c", "band", "v_des"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not 0 < self.band < self.R_c:
            raise ConfigError("track band must lie in (0, R_c)")


@dataclass(frozen=True)
class CostSpec:
    tag: str = "obstacle-goal"
    scale: float = 10.0
    p_des: tuple[float, float] = (2.0, 10.0)

    def __post_init__(self):
        if self.tag not in COST_TAGS:
            raise ConfigError(f"cost.tag must be one of {COST_TAGS}, got {self.tag!r}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "p_des", _vector(self.p_des, 2, "cost.p_des"))


@dataclass(frozen=True)
class MppiSpec:
    T: int = 40
    K: int = 100
    lam: float = 0.1
    nu: float = 0.1
    eps_cov: Any = 0.001
    R: Any = 1.0

    def __post_init__(self):
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "eps_cov", _matrix(self.eps_cov, 2, "mppi.eps_cov"))
        object.__setattr__(self, "R", _matrix(self.R, 2, "mppi.R"))


@dataclass(frozen=True)
class CcsSpec:
    T_cs: int = 20
    Q: Any = (10.0, 10.0, 1.0, 1.0)
    R: Any = 1.0
    p_fail: float = 0.01
    sigma_max: float = 1.0
    backend: str = "clarabel"

    def __post_init__(self):
        object.__setattr__(self, "T_cs", int(self.T_cs))
        object.__setattr__(self, "Q", _matrix(self.Q, 4, "ccs.Q"))
        object.__setattr__(self, "R", _matrix(self.R, 2, "ccs.R"))
        object.__setattr__(self, "p_fail", float(self.p_fail))
        object.__setattr__(self, "sigma_max", float(self.sigma_max))


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one batch of closed-loop runs.

    ``W`` is the per-unit-time noise intensity as tabulated for the
    experiment; ``noise_scaling`` maps it onto a per-step covariance
    (``dt2`` multiplies by ``dt**2``, ``dt`` by ``dt``, ``none`` uses it
    verbatim). ``W_real`` overrides what the simulated plant draws, scaled
    the same way; unset means the plant matches the model.
    """

    name: str = "obstacle"
    kind: str = "obstacle"
    dt: float = 0.05
    T_max: int = 200
    W: Any = (0.0, 0.0, 5.0, 5.0)
    W_real: Any = None
    noise_scaling: str = "dt2"
    x0: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    obstacles: tuple[ObstacleSpec, ...] = ()
    track: TrackSpec | None = None
    cost: CostSpec = field(default_factory=CostSpec)
    controller: str = "ccsmppi"
    tube_reset_threshold: float | None = None
    mppi: MppiSpec = field(default_factory=MppiSpec)
    ccs: CcsSpec = field(default_factory=CcsSpec)
    n_sim: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.kind not in ("obstacle", "track"):
            raise ConfigError(f"kind must be 'obstacle' or 'track', got {self.kind!r}")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.noise_scaling not in NOISE_SCALINGS:
            raise ConfigError(f"noise_scaling must be one of {NOISE_SCALINGS}, got {self.noise_scaling!r}")
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "T_max", int(self.T_max))
        object.__setattr__(self, "n_sim", int(self.n_sim))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "workers", int(self.workers))
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.T_max < 1:
            raise ConfigError("T_max must be >= 1")
        if self.n_sim < 0:
            raise ConfigError("n_sim must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        object.__setattr__(self, "W", _matrix(self.W, 4, "W"))
        if self.W_real is not None:
            object.__setattr__(self, "W_real", _matrix(self.W_real, 4, "W_real"))
        for name in ("W", "W_real"):
            M = getattr(self, name)
            if M is not None and np.linalg.eigvalsh(np.array(M))[0] < -1e-12:
                raise ConfigError(f"{name} must be positive semidefinite")
        object.__setattr__(self, "x0", _vector(self.x0, 4, "x0"))
        object.__setattr__(self, "obstacles", tuple(
            o if isinstance(o, ObstacleSpec) else ObstacleSpec(**_keys(o, ObstacleSpec, "obstacles[]"))
            for o in self.obstacles))
        if self.kind == "track" and self.track is None:
            raise ConfigError("track scenarios need a 'track' section")
        if self.tube_reset_threshold is not None:
            object.__setattr__(self, "tube_reset_threshold", float(self.tube_reset_threshold))
        if self.ccs.T_cs > self.mppi.T:
            raise ConfigError(f"ccs.T_cs={self.ccs.T_cs} exceeds mppi.T={self.mppi.T}")

    # -- runtime objects -------------------------------------------------

    @property
    def noise_factor(self) -> float:
        return {"none": 1.0, "dt": self.dt, "dt2": self.dt**2}[self.noise_scaling]

    def step_covariance(self) -> np.ndarray:
        return self.noise_factor * np.array(self.W)

    def plant_covariance(self) -> np.ndarray:
        W = self.W if self.W_real is None else self.W_real
        return self.noise_factor * np.array(W)

    def build(self) -> tuple[Scenario, CcsMppiConfig]:
        model = make_double_integrator(self.dt, self.T_max, self.step_covariance())
        obstacles = tuple(Obstacle(o.center, o.radius) for o in self.obstacles)
        track = None
        if self.track is not None:
            track = Track(self.track.R_c, self.track.band)
            cost = RunningCost(self.cost.tag, self.cost.scale, self.cost.p_des, obstacles,
                               self.track.R_c, self.track.v_des, self.track.band)
        else:
            cost = RunningCost(self.cost.tag, self.cost.scale, self.cost.p_des, obstacles)
        scenario = Scenario(model, cost, np.array(self.x0), self.T_max, obstacles, track,
                            self.plant_covariance())
        mp = self.mppi
        params = MppiParams(mp.T, mp.K, mp.lam, mp.nu, np.array(mp.eps_cov), np.array(mp.R))
        cc = self.ccs
        config = CcsMppiConfig(self.T_max, cc.T_cs, params, np.array(cc.Q), np.array(cc.R),
                               cc.p_fail, cc.sigma_max, cc.backend)
        return scenario, config

    def controller_options(self) -> dict:
        if self.controller == "tube":
            return {"reset_threshold": self.tube_reset_threshold}
        return {}

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None, width=100)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        data = _keys(data, cls, "config")
        nested = {"cost": CostSpec, "mppi": MppiSpec, "ccs": CcsSpec}
        for key, typ in nested.items():
            if key in data and not isinstance(data[key], typ):
                data[key] = typ(**_keys(data[key] or {}, typ, key))
        if data.get("track") is not None and not isinstance(data["track"], TrackSpec):
            data["track"] = TrackSpec(**_keys(data["track"], TrackSpec, "track"))
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        return cls.from_dict(data or {})


def _keys(data, typ, where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    return dict(data)


def _plain(obj):
    """Tuples to lists, recursively, for YAML output."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return ScenarioConfig.loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def builtin_scenarios() -> list[str]:
    files = resources.files("ccsmppi").joinpath("scenarios")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def builtin_config(name: str) -> ScenarioConfig:
    """One of the shipped scenario files, by stem (e.g. ``"track_exp2"``)."""
    path = resources.files("ccsmppi").joinpath("scenarios", f"{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"no built-in scenario {name!r}; available: {builtin_scenarios()}")
    return ScenarioConfig.loads(path.read_text())
