"""Tests for posterior simulation and summaries."""

from __future__ import annotations

import math

import numpy as np
import pytest

from glmm_rvb.engine import FitConfig, FitResult, VariationalState
from glmm_rvb.exceptions import ZeroSd
from glmm_rvb.family import GAUSSIAN_UNIT, POISSON
from glmm_rvb.matcalc import from_log_diag
from glmm_rvb.model import Dataset, GlobalParams
from glmm_rvb.posterior import (
    compare_metrics,
    derive_scales,
    omega_names,
    recompose_covariance,
    scale_names,
    simulate_b,
    summarize_factor,
    summarize_posterior,
)
from glmm_rvb.reparam import TransformMethod, build_transforms

from .conftest import make_dataset

TINY = 1e-9


def _state(data: Dataset, mu: np.ndarray, *, local_scale: float = 1.0, global_scale: float = TINY) -> VariationalState:
    return VariationalState(
        mu=mu,
        c_local=local_scale * np.broadcast_to(np.eye(data.r), (data.n, data.r, data.r)).copy(),
        c_global=global_scale * np.eye(data.g),
    )


def _fit_result(state: VariationalState, method: TransformMethod) -> FitResult:
    return FitResult(
        state=state,
        trace=(),
        iterations=0,
        wall_time=0.0,
        elbo=0.0,
        elbo_sd=0.0,
        converged=True,
        method=method,
        config=FitConfig(method=method, seed=3),
    )


def test_derive_scales_random_intercept() -> None:
    sigma = derive_scales(np.array([[-0.64]]), 1)
    assert sigma.shape == (1, 1)
    assert float(sigma[0, 0]) == pytest.approx(math.exp(0.64))
    assert float(sigma[0, 0]) == pytest.approx(1.90, abs=5e-3)


def test_derive_scales_recompose(rng: np.random.Generator) -> None:
    omega = rng.normal(0.0, 0.4, (4, 3))
    scales = derive_scales(omega, 2)
    for k in range(4):
        w = from_log_diag(omega[k], 2)
        expected = np.linalg.inv(w @ w.T)
        np.testing.assert_allclose(recompose_covariance(scales[k, :2], scales[k, 2:]), expected, rtol=1e-12)
    assert np.all(np.abs(scales[:, 2]) < 1.0)


def test_names() -> None:
    assert omega_names(1) == ("omega",)
    assert omega_names(2) == ("omega11", "omega21", "omega22")
    assert scale_names(1) == ("sigma",)
    assert scale_names(2) == ("sigma1", "sigma2", "rho")
    assert scale_names(3) == ("sigma1", "sigma2", "sigma3", "rho12", "rho13", "rho23")


@pytest.mark.parametrize(
    ("va_mean", "va_sd", "ref_mean", "ref_sd", "r1", "r2"),
    [
        (1.0, 2.0, 0.0, 1.0, 0.5, 0.5),
        (0.0, 1.0, 0.0, 1.0, 0.0, 1.0),
        (-1.0, 0.5, 1.0, 2.0, -4.0, 4.0),
    ],
)
def test_compare_metrics(va_mean: float, va_sd: float, ref_mean: float, ref_sd: float, r1: float, r2: float) -> None:
    first, second = compare_metrics(np.array([va_mean]), np.array([va_sd]), np.array([ref_mean]), np.array([ref_sd]))
    assert float(first[0]) == pytest.approx(r1)
    assert float(second[0]) == pytest.approx(r2)


def test_compare_metrics_rejects_zero_sd() -> None:
    with pytest.raises(ZeroSd):
        compare_metrics(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2), np.ones(2))


@pytest.mark.parametrize("method", list(TransformMethod))
def test_degenerate_density_maps_mean(method: TransformMethod) -> None:
    data = make_dataset(POISSON, n=3, r=2, seed=4)
    mu = np.random.default_rng(5).normal(0.0, 0.3, data.d)
    state = _state(data, mu, local_scale=TINY)
    draws = simulate_b(data, state, method, 5, seed=1)
    b_tilde, theta_g = state.split(mu)
    transforms = build_transforms(data, GlobalParams.from_vector(theta_g, data.p), method)
    expected = transforms.invert(b_tilde)
    for k in range(5):
        np.testing.assert_allclose(draws.b[k], expected, atol=1e-6)
    assert draws.rejected == 0


def test_gaussian_random_effects_follow_conditional() -> None:
    y = [0.2, 1.4, 0.9]
    data = Dataset.from_groups(GAUSSIAN_UNIT, [y], [np.ones((3, 1))], [np.ones((3, 1))])
    mu = np.array([0.0, 0.3, 0.0])
    draws = simulate_b(data, _state(data, mu), TransformMethod.APPROACH1, 4000, seed=7)
    # y − β ~ N(b, 1) with Ω = 1: Λ = 1/4 and λ = Λ·Σ(y − β)
    cov = 0.25
    lam = cov * float(np.sum(np.asarray(y) - 0.3))
    samples = draws.b[:, 0, 0]
    assert abs(samples.mean() - lam) < 4 * math.sqrt(cov / samples.size)
    assert abs(samples.std(ddof=1) - math.sqrt(cov)) < 4 * math.sqrt(cov / (2 * samples.size))


def test_simulate_b_needs_method_for_bare_state() -> None:
    data = make_dataset(POISSON, n=2, seed=1)
    with pytest.raises(ValueError, match="method"):
        simulate_b(data, _state(data, np.zeros(data.d)), n_draws=2)


def test_simulate_b_chunks_are_independent() -> None:
    data = make_dataset(POISSON, n=2, seed=1)
    fit = _fit_result(_state(data, np.zeros(data.d), global_scale=0.2), TransformMethod.APPROACH2)
    whole = simulate_b(data, fit, n_draws=6, seed=2)
    tail = simulate_b(data, fit, n_draws=2, seed=2, start=4)
    np.testing.assert_array_equal(whole.b[4:], tail.b)


def test_summarize_posterior_layout() -> None:
    data = make_dataset(POISSON, n=3, r=2, seed=6)
    fit = _fit_result(_state(data, np.zeros(data.d), global_scale=0.1), TransformMethod.APPROACH2)
    summary = summarize_posterior(data, fit, 40, chunk=15)
    assert summary.names == ("beta0", "beta1", "omega11", "omega21", "omega22", "sigma1", "sigma2", "rho")
    assert summary.means.shape == summary.sds.shape == (8,)
    assert summary.b_mean.shape == summary.b_tilde_sd.shape == (3, 2)
    assert summary.draws == 40
    assert [row[0] for row in summary.rows()] == list(summary.names)


def test_summarize_posterior_chunking_does_not_change_draws() -> None:
    data = make_dataset(POISSON, n=3, seed=6)
    fit = _fit_result(_state(data, np.zeros(data.d), global_scale=0.1), TransformMethod.APPROACH1)
    first = summarize_posterior(data, fit, 30, chunk=7)
    second = summarize_posterior(data, fit, 30, chunk=30)
    np.testing.assert_allclose(first.means, second.means, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(first.b_sd, second.b_sd, rtol=1e-10, atol=1e-12)


def test_summarize_factor() -> None:
    mean = np.array([0.5, -1.0, 0.2])
    cov = np.diag([0.04, 0.09, 0.01])
    summary = summarize_factor(mean, cov, ("intercept", "x"), 1, 20_000, seed=4)
    assert summary.names == ("intercept", "x", "omega", "sigma")
    np.testing.assert_array_equal(summary.means[:3], mean)
    np.testing.assert_allclose(summary.sds[:3], [0.2, 0.3, 0.1])
    sigma_mean, _ = summary.value("sigma")
    # σ = e^(−ω) with ω ~ N(0.2, 0.1²) is log-normal
    assert sigma_mean == pytest.approx(math.exp(-0.2 + 0.005), rel=5e-3)
    assert summary.b_mean.shape == (0, 1)
