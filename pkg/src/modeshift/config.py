"""Run configuration: nested dataclasses with JSON loading and validation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import InvalidInputError


@dataclass(frozen=True)
class FixtureSettings:
    n_zones: int = 12
    n_wage_groups: int = 4
    beta: float = 0.71
    sigma: float = 0.38
    cor_tfs: float = 0.31
    cor_fs: float = 0.58


@dataclass(frozen=True)
class SurrogateSettings:
    samples: int = 50_000
    oracle_draws: int = 20_000
    epochs: int = 100
    learning_rate: float = 5e-4
    batch_size: int = 256
    optimizer: str = "adam"
    val_points: int = 1_000
    val_draws: int = 100_000
    gate_mean_abs_err: float = 0.01
    gate_max_abs_err: float = 0.05


@dataclass(frozen=True)
class InferenceSettings:
    grid: str = "10x10x10x10"
    ln_mu_beta: float = -math.log(3.0) / 2.0
    sd_beta: float = math.log(3.0) / 2.0
    ln_mu_sigma: float = math.log(math.log(2.0))
    sd_sigma: float = abs(math.log(math.log(2.0)))
    smoothing: bool = False
    pooling: str = "mixture"
    oracle_draws: int = 20_000


@dataclass(frozen=True)
class ImpactSettings:
    n_reps: int = 1_000
    scale: float = 1.0
    posterior_mass: float = 1.0
    miles_per_gallon: float = 20.0
    co2_kg_per_gallon: float = 8.0
    transit_fare: float = 2.75
    sfhv_occupancy: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run's outputs besides the input files."""

    seed: int = 0
    fixture: FixtureSettings = field(default_factory=FixtureSettings)
    surrogate: SurrogateSettings = field(default_factory=SurrogateSettings)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    impact: ImpactSettings = field(default_factory=ImpactSettings)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, section: str | None = None, **values) -> "RunConfig":
        """Copy with non-None ``values`` replaced (in ``section`` if given)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section is None:
            return replace(self, **values)
        return replace(self, **{section: replace(getattr(self, section), **values)})

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidInputError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config file {p} is not valid JSON: {exc}") from None
        return cls.from_dict(data)


SECTIONS = {"fixture": FixtureSettings, "surrogate": SurrogateSettings,
            "inference": InferenceSettings, "impact": ImpactSettings}


def _build(cls, data, where: str):
    if not isinstance(data, Mapping):
        raise InvalidInputError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidInputError(f"{where}: unknown keys {unknown}")
    kw = {}
    for name, value in data.items():
        if cls is RunConfig and name in SECTIONS:
            kw[name] = _build(SECTIONS[name], value, f"{where}.{name}")
        else:
            kw[name] = _coerce(value, getattr(cls(), name), f"{where}.{name}")
    return cls(**kw)


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidInputError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidInputError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise InvalidInputError(f"{where}: expected a string")
    return value


def validate(cfg: RunConfig) -> None:
    def positive(section, *names):
        for n in names:
            v = getattr(section, n)
            if not v > 0:
                raise InvalidInputError(f"{type(section).__name__}.{n} must be > 0, got {v}")

    positive(cfg.fixture, "n_zones", "n_wage_groups", "beta")
    if cfg.fixture.n_zones < 2:
        raise InvalidInputError("fixture.n_zones must be >= 2")
    positive(cfg.surrogate, "samples", "oracle_draws", "epochs", "learning_rate", "batch_size",
             "val_points", "val_draws", "gate_mean_abs_err", "gate_max_abs_err")
    if cfg.surrogate.optimizer not in ("adam", "momentum"):
        raise InvalidInputError("surrogate.optimizer must be 'adam' or 'momentum'")
    positive(cfg.inference, "sd_beta", "sd_sigma", "oracle_draws")
    if cfg.inference.pooling not in ("mixture", "split"):
        raise InvalidInputError("inference.pooling must be 'mixture' or 'split'")
    positive(cfg.impact, "n_reps", "scale", "posterior_mass", "miles_per_gallon",
             "co2_kg_per_gallon", "transit_fare", "sfhv_occupancy")
    if cfg.impact.posterior_mass > 1:
        raise InvalidInputError("impact.posterior_mass must be <= 1")
    if cfg.seed < 0:
        raise InvalidInputError("seed must be >= 0")
