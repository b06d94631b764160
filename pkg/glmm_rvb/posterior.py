"""Posterior summaries by simulation from the fitted variational density.

Random effects are not Gaussian a posteriori under q: each draw of θ_G
rebuilds the transforms, and bᵢ = Lᵢb̃ᵢ + λᵢ is formed per draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .const import DEFAULT_POSTERIOR_CHUNK, DEFAULT_POSTERIOR_DRAWS, LOGGER, REJECTION_WARN_FRACTION, STREAM_POSTERIOR
from .engine import FitResult, VariationalState, make_rng
from .exceptions import DivergedError, NumericalError, ZeroSd, error_text
from .matcalc import FloatArray, from_log_diag, half_indices, tri_inverse
from .model import Dataset, GlobalParams
from .reparam import TransformMethod, build_transforms

MAX_DRAW_ATTEMPTS = 100


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Draws of θ_G, b̃ and b; rejected counts pathological θ_G draws."""

    theta_g: FloatArray
    b_tilde: FloatArray
    b: FloatArray
    rejected: int = 0


@dataclass
class _Moments:
    total: FloatArray | float = 0.0
    square: FloatArray | float = 0.0
    count: int = 0

    def add(self, values: FloatArray) -> None:
        self.total = self.total + values.sum(axis=0)
        self.square = self.square + (values * values).sum(axis=0)
        self.count += values.shape[0]

    def mean_sd(self) -> tuple[FloatArray, FloatArray]:
        mean = np.asarray(self.total) / self.count
        var = np.asarray(self.square) / self.count - mean * mean
        if self.count > 1:
            var = var * self.count / (self.count - 1)
        return mean, np.sqrt(np.maximum(var, 0.0))


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Means and sds of global parameters (with derived scales) and random effects."""

    names: tuple[str, ...]
    means: FloatArray
    sds: FloatArray
    b_mean: FloatArray
    b_sd: FloatArray
    b_tilde_mean: FloatArray
    b_tilde_sd: FloatArray
    draws: int
    rejected: int = 0

    def value(self, name: str) -> tuple[float, float]:
        k = self.names.index(name)
        return float(self.means[k]), float(self.sds[k])

    def rows(self) -> list[tuple[str, float, float]]:
        return [(name, float(m), float(s)) for name, m, s in zip(self.names, self.means, self.sds, strict=True)]


def omega_names(r: int) -> tuple[str, ...]:
    if r == 1:
        return ("omega",)
    rows, cols = half_indices(r)
    return tuple(f"omega{i + 1}{j + 1}" for i, j in zip(rows, cols, strict=True))


def scale_names(r: int) -> tuple[str, ...]:
    """Names of derived scale parameters: σ for r = 1, otherwise σₖ and ρₖₗ."""
    if r == 1:
        return ("sigma",)
    sigmas = tuple(f"sigma{k + 1}" for k in range(r))
    if r == 2:
        return (*sigmas, "rho")
    pairs = tuple(f"rho{k + 1}{m + 1}" for k in range(r) for m in range(k + 1, r))
    return sigmas + pairs


def derive_scales(omega: FloatArray, r: int) -> FloatArray:
    """Per-draw (σₖ…, ρₖₗ…) of Ω⁻¹ for ω draws of shape (k, r(r+1)/2)."""
    w_inv = tri_inverse(from_log_diag(np.atleast_2d(omega), r))
    cov = np.swapaxes(w_inv, -1, -2) @ w_inv
    sigma = np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
    if r == 1:
        return np.asarray(sigma)
    upper_k, upper_l = np.triu_indices(r, 1)
    rho = cov[:, upper_k, upper_l] / (sigma[:, upper_k] * sigma[:, upper_l])
    return np.concatenate([sigma, rho], axis=1)


def recompose_covariance(sigmas: FloatArray, rhos: FloatArray) -> FloatArray:
    """Ω⁻¹ from σ's and correlations ordered as in scale_names."""
    r = sigmas.size
    corr = np.eye(r)
    upper_k, upper_l = np.triu_indices(r, 1)
    corr[upper_k, upper_l] = rhos
    corr[upper_l, upper_k] = rhos
    return np.asarray(corr * np.outer(sigmas, sigmas))


def _draw_one(
    data: Dataset,
    state: VariationalState,
    method: TransformMethod,
    rng: np.random.Generator,
) -> tuple[FloatArray, FloatArray, FloatArray]:
    s = rng.standard_normal(state.d)
    theta = state.apply(s)
    b_tilde, theta_g = state.split(theta)
    gp = GlobalParams.from_vector(theta_g, data.p)
    transforms = build_transforms(data, gp, method)
    return theta_g, b_tilde, transforms.invert(b_tilde)


def simulate_b(
    data: Dataset,
    fit: FitResult | VariationalState,
    method: TransformMethod | None = None,
    n_draws: int = DEFAULT_POSTERIOR_DRAWS,
    *,
    seed: int = 0,
    start: int = 0,
) -> PosteriorDraws:
    """Draw θ_G and b̃ from q, rebuild the transforms and map b̃ to b.

    Draw k uses a generator keyed by (seed, k + start), so chunks of draws
    can be generated independently.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    state = fit.state if isinstance(fit, FitResult) else fit
    if method is None:
        if not isinstance(fit, FitResult):
            raise ValueError("method is required when simulating from a bare state")
        method = fit.method
    theta_g = np.empty((n_draws, state.g))
    b_tilde = np.empty((n_draws, state.n, state.r))
    b = np.empty((n_draws, state.n, state.r))
    rejected = 0
    for k in range(n_draws):
        for attempt in range(MAX_DRAW_ATTEMPTS):
            rng = make_rng(seed, STREAM_POSTERIOR, start + k, attempt)
            try:
                theta_g[k], b_tilde[k], b[k] = _draw_one(data, state, method, rng)
                break
            except NumericalError as err:
                rejected += 1
                LOGGER.debug("Posterior draw %d rejected: %s", start + k, error_text(err))
        else:
            raise DivergedError(f"posterior draw {start + k} failed {MAX_DRAW_ATTEMPTS} times")
    return PosteriorDraws(theta_g=theta_g, b_tilde=b_tilde, b=b, rejected=rejected)


def summarize_posterior(
    data: Dataset,
    fit: FitResult,
    n_draws: int = DEFAULT_POSTERIOR_DRAWS,
    *,
    seed: int | None = None,
    chunk: int = DEFAULT_POSTERIOR_CHUNK,
) -> PosteriorSummary:
    """Simulate in chunks and summarize global parameters, derived scales and random effects."""
    seed = fit.config.seed if seed is None else seed
    glob, scales, local, local_tilde = _Moments(), _Moments(), _Moments(), _Moments()
    rejected = 0
    for start in range(0, n_draws, chunk):
        draws = simulate_b(data, fit, fit.method, min(chunk, n_draws - start), seed=seed, start=start)
        rejected += draws.rejected
        glob.add(draws.theta_g)
        scales.add(derive_scales(draws.theta_g[:, data.p :], data.r))
        local.add(draws.b)
        local_tilde.add(draws.b_tilde)
    if rejected > REJECTION_WARN_FRACTION * n_draws:
        LOGGER.warning("Rejected %d of %d posterior draws as numerically invalid", rejected, n_draws)
    glob_mean, glob_sd = glob.mean_sd()
    scale_mean, scale_sd = scales.mean_sd()
    b_mean, b_sd = local.mean_sd()
    bt_mean, bt_sd = local_tilde.mean_sd()
    return PosteriorSummary(
        names=(*data.fixed_names, *omega_names(data.r), *scale_names(data.r)),
        means=np.concatenate([glob_mean, scale_mean]),
        sds=np.concatenate([glob_sd, scale_sd]),
        b_mean=b_mean,
        b_sd=b_sd,
        b_tilde_mean=bt_mean,
        b_tilde_sd=bt_sd,
        draws=n_draws,
        rejected=rejected,
    )


def compare_metrics(
    va_means: FloatArray, va_sds: FloatArray, ref_means: FloatArray, ref_sds: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """r₁ = (mean_va − mean_ref)/sd_va and r₂ = sd_ref/sd_va, elementwise."""
    va_sds = np.asarray(va_sds, dtype=np.float64)
    if np.any(~(va_sds > 0.0)):
        raise ZeroSd("variational standard deviations must be positive")
    r1 = (np.asarray(va_means, dtype=np.float64) - np.asarray(ref_means, dtype=np.float64)) / va_sds
    r2 = np.asarray(ref_sds, dtype=np.float64) / va_sds
    return r1, r2


def summarize_factor(
    mean: FloatArray,
    cov: FloatArray,
    fixed_names: tuple[str, ...],
    r: int,
    n_draws: int = DEFAULT_POSTERIOR_DRAWS,
    *,
    seed: int = 0,
) -> PosteriorSummary:
    """Summary of a Gaussian q(θ_G), with derived scales simulated from its ω marginal."""
    p = len(fixed_names)
    sds = np.sqrt(np.diag(cov))
    chol = np.linalg.cholesky(cov[p:, p:])
    rng = make_rng(seed, STREAM_POSTERIOR)
    omega = mean[p:] + rng.standard_normal((n_draws, mean.size - p)) @ chol.T
    scales = _Moments()
    scales.add(derive_scales(omega, r))
    scale_mean, scale_sd = scales.mean_sd()
    empty = np.zeros((0, r))
    return PosteriorSummary(
        names=(*fixed_names, *omega_names(r), *scale_names(r)),
        means=np.concatenate([mean, scale_mean]),
        sds=np.concatenate([sds, scale_sd]),
        b_mean=empty,
        b_sd=empty,
        b_tilde_mean=empty,
        b_tilde_sd=empty,
        draws=n_draws,
    )
