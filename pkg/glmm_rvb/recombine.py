"""Divide and recombine: fit subject shards independently, then combine global posteriors.

Each shard's q(θ_G) is Gaussian. Multiplying the shard posteriors counts the
prior V times, so V − 1 copies of the (Gaussian) prior are divided out.
"""

from __future__ import annotations

import asyncio
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .const import LOGGER, STREAM_PARTITION, STREAM_SHARD
from .engine import FitConfig, FitResult, fit, make_rng
from .exceptions import DivergedError, InvalidV, NotPositiveDefinite, NumericalError, PriorConfigError, error_text
from .matcalc import FloatArray, IntArray, spd_inverse
from .model import Dataset, NormalPrior


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    """N(mean, cov) over θ_G."""

    mean: FloatArray
    cov: FloatArray

    @property
    def precision(self) -> FloatArray:
        try:
            return spd_inverse(self.cov)[0]
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite("factor covariance is not positive definite") from err

    @classmethod
    def from_fit(cls, result: FitResult) -> GaussianFactor:
        """Global marginal N(μ_G, C_G C_Gᵀ) of a fitted state."""
        return cls(mean=result.state.global_mean().copy(), cov=result.state.global_cov())

    @classmethod
    def from_prior(cls, prior: NormalPrior) -> GaussianFactor:
        return cls(mean=prior.mean, cov=prior.cov)


@dataclass(frozen=True, eq=False)
class Shard:
    """A subset of subjects, its data view and (once fitted) its result."""

    index: int
    subjects: IntArray
    data: Dataset
    result: FitResult | None = None


@dataclass(frozen=True, eq=False)
class ShardedResult:
    """Combined global posterior plus the per-shard fits."""

    combined: GaussianFactor
    shards: tuple[Shard, ...]

    @property
    def shard_elbos(self) -> tuple[float, ...]:
        return tuple(s.result.elbo for s in self.shards if s.result is not None)


def partition(data: Dataset, v: int, seed: int = 0) -> list[Shard]:
    """Random balanced partition of the subjects into v shards."""
    if not 1 <= v <= data.n:
        raise InvalidV(f"shard count {v} must lie in 1..{data.n}")
    order = make_rng(seed, STREAM_PARTITION).permutation(data.n)
    shards = []
    for index, subjects in enumerate(np.array_split(order, v)):
        subjects = np.sort(subjects)
        shards.append(Shard(index=index, subjects=subjects, data=data.subset(subjects)))
    return shards


def combine(factors: Sequence[GaussianFactor], prior: GaussianFactor) -> GaussianFactor:
    """Precision-weighted product of the factors with V − 1 copies of the prior divided out.

    Σ = (Σᵥ Σᵥ⁻¹ − (V−1)Σ₀⁻¹)⁻¹ and μ = Σ(Σᵥ Σᵥ⁻¹μᵥ − (V−1)Σ₀⁻¹μ₀).
    """
    if not factors:
        raise InvalidV("at least one factor is required")
    if len(factors) == 1:
        return factors[0]
    overcount = len(factors) - 1
    prior_precision = prior.precision
    precision = -overcount * prior_precision
    shift = -overcount * prior_precision @ prior.mean
    for factor in factors:
        factor_precision = factor.precision
        precision = precision + factor_precision
        shift = shift + factor_precision @ factor.mean
    try:
        cov, _ = spd_inverse(precision)
    except NotPositiveDefinite as err:
        raise NotPositiveDefinite("combined precision is not positive definite") from err
    return GaussianFactor(mean=cov @ shift, cov=cov)


def shard_seed(seed: int, index: int) -> int:
    """Seed for shard `index`, independent of scheduling."""
    return int(make_rng(seed, STREAM_SHARD, index).integers(0, 2**31 - 1))


def _fit_shard(shard: Shard, prior: NormalPrior, config: FitConfig) -> Shard:
    shard_config = replace(config, seed=shard_seed(config.seed, shard.index))
    LOGGER.info("Fitting shard %d with %d subjects", shard.index, shard.data.n)
    try:
        result = fit(shard.data, prior, shard_config)
    except NumericalError as err:
        raise DivergedError(f"shard {shard.index} failed: {error_text(err)}") from err
    return replace(shard, result=result)


async def async_fit_sharded(data: Dataset, prior: NormalPrior, config: FitConfig, v: int) -> ShardedResult:
    """Fit v shards concurrently in worker threads and combine their global factors."""
    if prior.g != data.g:
        raise PriorConfigError(f"normal prior has dimension {prior.g}, model needs {data.g}")
    shards = partition(data, v, config.seed)
    if v == 1:
        fitted = [replace(shards[0], result=fit(shards[0].data, prior, config))]
    else:
        fitted = list(await asyncio.gather(*(asyncio.to_thread(_fit_shard, s, prior, config) for s in shards)))
    factors = [GaussianFactor.from_fit(s.result) for s in fitted if s.result is not None]
    combined = combine(factors, GaussianFactor.from_prior(prior))
    LOGGER.info("Combined %d shard posteriors", len(factors))
    return ShardedResult(combined=combined, shards=tuple(fitted))


def fit_sharded(data: Dataset, prior: NormalPrior, config: FitConfig, v: int) -> ShardedResult:
    return asyncio.run(async_fit_sharded(data, prior, config, v))
