"""Experiment configuration: JSON on disk, dataclasses in memory.

Every field has an explicit default (see ``tiltsde config default``).
Validation errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from ..errors import ConfigError
from ..grids import SpatialGrid
from ..problem import CATALOG, FineTuneProblem, build_problem, default_grid
from ..reward_fdiv import _REWARDS

SWEEP_AXES = ("alpha", "gamma", "divergence", "epsilon")
DIVERGENCES = ("kl", "forward-kl", "gamma")


@dataclass
class ModelConfig:
    kind: str = "vp"
    horizon: float = 5.0
    beta_min: float = 1.0
    beta_max: float = 1.0
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    noise: str = "standard"
    data: dict = field(default_factory=lambda: copy.deepcopy(CATALOG["bimodal-kl"]["model"]["data"]))


@dataclass
class RewardConfig:
    name: str = "gaussian-bump"
    params: dict = field(default_factory=lambda: copy.deepcopy(CATALOG["bimodal-kl"]["reward"]["params"]))


@dataclass
class DivergenceConfig:
    name: str = "kl"
    gamma: Optional[float] = None


@dataclass
class GridConfig:
    lower: Optional[list] = None
    upper: Optional[list] = None
    shape: Optional[list] = None


@dataclass
class SimulationConfig:
    n_paths: int = 100_000
    n_steps: int = 512
    seed: int = 0
    check_paths: int = 20_000


@dataclass
class SweepConfig:
    alpha: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    gamma: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    divergence: list = field(default_factory=lambda: ["kl", "forward-kl"])
    epsilon: list = field(default_factory=lambda: [0.0, 0.25, 0.5])
    record_runtime: bool = False


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    alpha: float = 1.0
    epsilon: float = 0.0
    grid: GridConfig = field(default_factory=GridConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    outputs: str = "runs/default"
    name: str = "default"

    # construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        cfg = _fill(cls, data, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_instance(cls, name: str, **overrides) -> "ExperimentConfig":
        spec = copy.deepcopy(CATALOG[name])
        cfg = cls(
            model=_fill(ModelConfig, spec["model"], "model"),
            reward=_fill(RewardConfig, spec["reward"], "reward"),
            divergence=_fill(DivergenceConfig, spec["divergence"], "divergence"),
            alpha=spec["alpha"],
            name=name,
            outputs=f"runs/{name}",
        )
        for key, value in overrides.items():
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(str(path), str(exc)) from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)

    # checks ----------------------------------------------------------------

    def validate(self) -> None:
        m = self.model
        if m.kind not in ("vp", "ve"):
            raise ConfigError("model.kind", f"must be 'vp' or 've', got {m.kind!r}")
        if not _positive(m.horizon):
            raise ConfigError("model.horizon", "must be positive")
        if m.noise not in ("standard", "exact"):
            raise ConfigError("model.noise", "must be 'standard' or 'exact'")
        for key in ("weights", "means", "variances"):
            if key not in m.data:
                raise ConfigError(f"model.data.{key}", "missing")
        if self.reward.name not in _REWARDS:
            raise ConfigError("reward.name", f"unknown reward {self.reward.name!r}; choose from {sorted(_REWARDS)}")
        if self.divergence.name not in DIVERGENCES:
            raise ConfigError("divergence.name", f"must be one of {list(DIVERGENCES)}")
        if self.divergence.name == "gamma":
            g = self.divergence.gamma
            if g is None or not 0 < g <= 1:
                raise ConfigError("divergence.gamma", "must lie in (0, 1] for the gamma divergence")
        if not _positive(self.alpha):
            raise ConfigError("alpha", "must be positive")
        if not (isinstance(self.epsilon, (int, float)) and self.epsilon >= 0):
            raise ConfigError("epsilon", "must be nonnegative")
        s = self.simulation
        for key in ("n_paths", "n_steps", "check_paths"):
            value = getattr(s, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"simulation.{key}", f"must be a positive integer, got {value!r}")
        if not isinstance(s.seed, int) or not 0 <= s.seed < 2**64:
            raise ConfigError("simulation.seed", "must be an unsigned 64-bit integer")
        g = self.grid
        given = [v is not None for v in (g.lower, g.upper, g.shape)]
        if any(given) and not all(given):
            raise ConfigError("grid", "lower, upper and shape must be given together")
        try:
            self.problem(validate_only=True)
        except ConfigError:
            raise
        except Exception as exc:  # surfaced with the best field path available
            raise ConfigError(_guess_path(exc), str(exc)) from None

    # bridges ---------------------------------------------------------------

    def spatial_grid(self, dim: int) -> SpatialGrid:
        g = self.grid
        if g.lower is None:
            return default_grid(dim)
        grid = SpatialGrid(tuple(g.lower), tuple(g.upper), tuple(g.shape))
        if grid.dim != dim:
            raise ConfigError("grid", f"grid has dimension {grid.dim}, model has {dim}")
        return grid

    def problem(self, validate_only: bool = False) -> FineTuneProblem:
        model = asdict(self.model)
        div = asdict(self.divergence)
        p = build_problem(model, asdict(self.reward), div, self.alpha, self.epsilon, None,
                          self.simulation.n_steps, self.name)
        p.grid = self.spatial_grid(p.dim)
        if not validate_only:
            _ = p.r_target
        return p


def _positive(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def _guess_path(exc) -> str:
    text = str(exc).lower()
    for key, path in (("mixture", "model.data"), ("variances", "model.data"), ("weights", "model.data"),
                      ("reward", "reward.params"), ("grid", "grid"), ("beta", "model"), ("sigma", "model")):
        if key in text:
            return path
    return "<root>"


_NESTED = {
    "model": ModelConfig,
    "reward": RewardConfig,
    "divergence": DivergenceConfig,
    "grid": GridConfig,
    "simulation": SimulationConfig,
    "sweep": SweepConfig,
}


def _fill(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _NESTED.get(f.name) if cls is ExperimentConfig else None
        path = f"{prefix}.{f.name}" if prefix else f.name
        kwargs[f.name] = _fill(sub, value, path) if sub is not None else copy.deepcopy(value)
    return cls(**kwargs)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()
