"""Synthetic random-effects datasets with known generating parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import StrEnum

import numpy as np
import pandas as pd
from scipy import special

from .const import STREAM_SIMULATE
from .engine import make_rng
from .exceptions import ConfigError
from .family import BERNOULLI, BINOMIAL, POISSON, Family, FamilyKind
from .matcalc import FloatArray
from .model import Dataset

DEFAULT_SUBJECTS = 500
DEFAULT_OBSERVATIONS = 7
DEFAULT_SIGMA = 1.5
DEFAULT_TRIALS = 20
COHORT_SUBJECTS = 1500
COHORT_VISITS = 6


class Covariate(StrEnum):
    """How the single slope covariate xᵢⱼ is generated."""

    TIME = "time"  # (j − 4)/10
    COIN = "coin"  # Bernoulli(0.5)


class Scenario(StrEnum):
    POISSON_I = "poisson1"
    POISSON_II = "poisson2"
    BERNOULLI_I = "bernoulli1"
    BERNOULLI_II = "bernoulli2"
    BINOMIAL_I = "binomial1"
    BINOMIAL_II = "binomial2"
    COHORT = "cohort"


@dataclass(frozen=True, kw_only=True)
class SimulationSpec:
    """Random-intercept model yᵢⱼ ~ family(xᵢⱼᵀβ + bᵢ) with bᵢ ~ N(0, σ²)."""

    family: Family
    beta: tuple[float, ...]
    sigma: float = DEFAULT_SIGMA
    n: int = DEFAULT_SUBJECTS
    n_obs: int = DEFAULT_OBSERVATIONS
    covariate: Covariate = Covariate.TIME
    trials: int = 1
    cohort: bool = False

    def __post_init__(self) -> None:
        if self.n < 1 or self.n_obs < 1:
            raise ConfigError("subject and observation counts must be positive")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        expected = 5 if self.cohort else 2
        if len(self.beta) != expected:
            raise ConfigError(f"beta must have {expected} entries")
        if self.trials < 1 or (self.family.kind is not FamilyKind.BINOMIAL and self.trials != 1):
            raise ConfigError("only the binomial family takes more than one trial")

    @classmethod
    def from_scenario(cls, scenario: Scenario | str, *, n: int | None = None) -> SimulationSpec:
        scenario = Scenario(scenario)
        spec = SCENARIOS[scenario]
        return spec if n is None else replace(spec, n=n)

    @property
    def fixed_names(self) -> tuple[str, ...]:
        if self.cohort:
            return ("intercept", "age", "bmi", "htn", "visit")
        return ("intercept", "x")


SCENARIOS: dict[Scenario, SimulationSpec] = {
    Scenario.POISSON_I: SimulationSpec(family=POISSON, beta=(-2.5, -2.0)),
    Scenario.POISSON_II: SimulationSpec(family=POISSON, beta=(1.5, 0.5)),
    Scenario.BERNOULLI_I: SimulationSpec(family=BERNOULLI, beta=(-2.5, 4.5), covariate=Covariate.COIN),
    Scenario.BERNOULLI_II: SimulationSpec(family=BERNOULLI, beta=(0.0, 1.0)),
    Scenario.BINOMIAL_I: SimulationSpec(
        family=BINOMIAL, beta=(-2.5, 4.5), covariate=Covariate.COIN, trials=DEFAULT_TRIALS
    ),
    Scenario.BINOMIAL_II: SimulationSpec(family=BINOMIAL, beta=(0.0, 1.0), trials=DEFAULT_TRIALS),
    Scenario.COHORT: SimulationSpec(
        family=BERNOULLI,
        beta=(-0.75, 0.5, 0.2, -0.35, 0.2),
        sigma=1.9,
        n=COHORT_SUBJECTS,
        n_obs=COHORT_VISITS,
        cohort=True,
    ),
}


@dataclass(frozen=True, eq=False)
class Truth:
    """Generating parameters and the drawn random effects."""

    beta: FloatArray
    sigma: float
    b: FloatArray = field(repr=False)
    names: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, object]:
        return {
            "beta": dict(zip(self.names, (float(v) for v in self.beta), strict=True)),
            "sigma": self.sigma,
            "b": [float(v) for v in self.b],
        }


def _standardize(values: FloatArray) -> FloatArray:
    return np.asarray((values - values.mean()) / values.std())


def _design(spec: SimulationSpec, rng: np.random.Generator) -> FloatArray:
    """Fixed-effect design of shape (n, n_obs, p), intercept first."""
    shape = (spec.n, spec.n_obs)
    ones = np.ones(shape)
    if spec.cohort:
        visit = np.broadcast_to(np.linspace(-1.0, 1.0, spec.n_obs), shape)
        age = np.broadcast_to(_standardize(rng.normal(67.0, 7.0, spec.n))[:, None], shape)
        bmi = _standardize(rng.normal(28.5, 5.5, spec.n)[:, None] + rng.normal(0.0, 1.0, shape))
        htn = (rng.random(shape) < 0.8).astype(np.float64)
        return np.stack([ones, age, bmi, htn, visit], axis=-1)
    if spec.covariate is Covariate.COIN:
        x = (rng.random(shape) < 0.5).astype(np.float64)
    else:
        x = np.broadcast_to((np.arange(1, spec.n_obs + 1) - 4.0) / 10.0, shape)
    return np.stack([ones, x], axis=-1)


def simulate_dataset(spec: SimulationSpec, seed: int) -> tuple[Dataset, Truth]:
    """Draw a dataset deterministically from (spec, seed)."""
    rng = make_rng(seed, STREAM_SIMULATE)
    beta = np.asarray(spec.beta, dtype=np.float64)
    x = _design(spec, rng)
    b = rng.normal(0.0, spec.sigma, spec.n)
    eta = x @ beta + b[:, None]
    match spec.family.kind:
        case FamilyKind.POISSON:
            y = rng.poisson(np.exp(eta)).astype(np.float64)
        case _:
            y = rng.binomial(spec.trials, special.expit(eta)).astype(np.float64)
    trials = np.full(y.shape, float(spec.trials))
    ones = np.ones((spec.n_obs, 1))
    data = Dataset.from_groups(
        spec.family,
        list(y),
        list(x),
        [ones] * spec.n,
        trials=list(trials),
        fixed_names=spec.fixed_names,
        random_names=("intercept",),
    )
    return data, Truth(beta=beta, sigma=spec.sigma, b=b, names=spec.fixed_names)


def to_frame(data: Dataset) -> pd.DataFrame:
    """Long-format table with one row per observation, as read by the CLI."""
    observed = data.mask > 0
    subjects = np.repeat(np.asarray(data.subject_ids, dtype=object), data.sizes)
    frame = pd.DataFrame({"subject": subjects, "y": data.y[observed], "m": data.trials[observed]})
    for k, name in enumerate(data.fixed_names):
        if name != "intercept":
            frame[name] = data.x[observed][:, k]
    return frame
