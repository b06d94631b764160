"""Diagnostics for a fit."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

from .engine import FitConfig, FitResult
from .model import Dataset
from .posterior import PosteriorSummary
from .recombine import ShardedResult


@dataclass(frozen=True)
class RunDiagnostics:
    """Convergence and bookkeeping of one optimization run."""

    iterations: int
    converged: bool
    elbo: float
    elbo_sd: float
    retries: int
    trace_windows: int
    wall_time: float

    @classmethod
    def from_fit(cls, fit: FitResult) -> RunDiagnostics:
        return cls(
            iterations=fit.iterations,
            converged=fit.converged,
            elbo=fit.elbo,
            elbo_sd=fit.elbo_sd,
            retries=fit.retries,
            trace_windows=len(fit.trace),
            wall_time=fit.wall_time,
        )


@dataclass(frozen=True)
class ShardDiagnostics:
    index: int
    subjects: int
    run: RunDiagnostics
    rejected_draws: int | None = None


def _dimensions(data: Dataset) -> dict[str, int]:
    return {"n": data.n, "p": data.p, "r": data.r, "g": data.g, "d": data.d, "observations": sum(data.sizes)}


def fit_diagnostics(
    data: Dataset,
    config: FitConfig,
    fit: FitResult | ShardedResult,
    summaries: tuple[PosteriorSummary, ...] = (),
) -> dict[str, Any]:
    """Return a JSON-serializable diagnostics mapping.

    `summaries` holds one posterior summary for a plain fit, or one per shard.
    """
    rejected = [s.rejected for s in summaries]
    diagnostics: dict[str, Any] = {
        "family": data.family.name,
        "dimensions": _dimensions(data),
        "config": asdict(config),
        "posterior_draws": summaries[0].draws if summaries else 0,
    }
    if isinstance(fit, FitResult):
        diagnostics["run"] = asdict(RunDiagnostics.from_fit(fit))
        diagnostics["rejected_draws"] = rejected[0] if rejected else None
        return diagnostics
    shards = [
        ShardDiagnostics(
            index=shard.index,
            subjects=int(shard.subjects.size),
            run=RunDiagnostics.from_fit(shard.result),
            rejected_draws=rejected[shard.index] if shard.index < len(rejected) else None,
        )
        for shard in fit.shards
        if shard.result is not None
    ]
    diagnostics["shards"] = [asdict(shard) for shard in shards]
    diagnostics["shard_elbos"] = list(fit.shard_elbos)
    return diagnostics
