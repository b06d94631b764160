"""Full fits on the bundled and simulated datasets, checked against reference posterior summaries."""

from __future__ import annotations

import numpy as np
import pytest

from glmm_rvb.datasets import load_epilepsy, load_seeds
from glmm_rvb.engine import Estimator, FitConfig, FitResult, draw_sample, estimator, fit, make_rng
from glmm_rvb.exceptions import NumericalError
from glmm_rvb.gradients import value_and_grad
from glmm_rvb.model import Dataset, default_prior, split_theta
from glmm_rvb.posterior import PosteriorSummary, summarize_posterior
from glmm_rvb.reparam import TransformMethod
from glmm_rvb.simulate import Scenario, SimulationSpec, simulate_dataset

pytestmark = pytest.mark.slow

DRAWS = 10_000
SEEDS_REFERENCE = {
    "intercept": (-0.39, 0.18),
    "seed": (-0.36, 0.23),
    "extract": (1.03, 0.22),
    "sigma": (0.35, 0.11),
}

Fits = dict[TransformMethod, list[tuple[FitResult, PosteriorSummary]]]


def _fit(data: Dataset, method: TransformMethod, seed: int = 1, **kwargs: int) -> tuple[FitResult, PosteriorSummary]:
    result = fit(data, default_prior(data), FitConfig(method=method, seed=seed, **kwargs))
    return result, summarize_posterior(data, result, DRAWS)


def _check(summary: PosteriorSummary, expected: dict[str, tuple[float, float]]) -> None:
    for name, (mean, tol) in expected.items():
        assert summary.value(name)[0] == pytest.approx(mean, abs=tol), name


def _check_normalized(summary: PosteriorSummary) -> None:
    assert np.median(np.abs(summary.b_tilde_mean)) < 0.25
    assert 0.75 <= np.median(summary.b_tilde_sd) <= 1.15


@pytest.fixture(scope="module")
def seeds_fits() -> Fits:
    data = load_seeds()
    return {method: [_fit(data, method, seed) for seed in range(1, 6)] for method in TransformMethod}


@pytest.mark.parametrize("method", list(TransformMethod))
def test_seeds_matches_reference_over_runs(seeds_fits: Fits, method: TransformMethod) -> None:
    runs = seeds_fits[method]
    for name, (mean, sd) in SEEDS_REFERENCE.items():
        values = np.array([summary.value(name) for _, summary in runs])
        assert values[:, 0].mean() == pytest.approx(mean, abs=0.04), name
        assert values[:, 1].mean() == pytest.approx(sd, abs=0.03), name
    for result, _ in runs:
        assert result.converged
        assert result.trace[0] < result.trace[-1]
    _check_normalized(runs[0][1])


def test_seeds_methods_reach_the_same_bound(seeds_fits: Fits) -> None:
    first = np.mean([result.elbo for result, _ in seeds_fits[TransformMethod.APPROACH1]])
    second = np.mean([result.elbo for result, _ in seeds_fits[TransformMethod.APPROACH2]])
    assert abs(first - second) < 0.5


@pytest.mark.parametrize("method", list(TransformMethod))
def test_score_corrected_estimator_reduces_mean_variance(seeds_fits: Fits, method: TransformMethod) -> None:
    data = load_seeds()
    prior = default_prior(data)
    state = seeds_fits[method][0][0].state
    rng = make_rng(3, 0)
    samples: dict[Estimator, list[np.ndarray]] = {Estimator.L1: [], Estimator.L2: []}
    for _ in range(DRAWS):
        s, theta = draw_sample(state, rng)
        b_tilde, gp = split_theta(theta, data.n, data.r, data.p)
        try:
            _, grad = value_and_grad(data, gp, b_tilde, method, prior)
        except NumericalError:
            continue
        if not grad.finite:
            continue
        for which, values in samples.items():
            values.append(estimator(state, s, grad.vector(), which)[0])
    plain = np.var(np.asarray(samples[Estimator.L1]), axis=0)
    corrected = np.var(np.asarray(samples[Estimator.L2]), axis=0)
    assert len(samples[Estimator.L1]) > 0.99 * DRAWS
    assert np.all(corrected <= 0.2 * plain)


def test_epilepsy_random_intercept() -> None:
    data = load_epilepsy(1)
    result, summary = _fit(data, TransformMethod.APPROACH2)
    expected = {
        "intercept": (0.27, 0.27),
        "lbase4": (0.88, 0.13),
        "trt": (-0.94, 0.41),
        "lbase4_trt": (0.34, 0.21),
        "lage": (0.47, 0.36),
        "v4": (-0.16, 0.05),
        "sigma": (0.53, 0.06),
    }
    for name, (mean, sd) in expected.items():
        assert summary.value(name)[0] == pytest.approx(mean, abs=0.05), name
        assert summary.value(name)[1] == pytest.approx(sd, abs=0.03), name
    assert result.converged
    assert result.trace[0] < result.trace[-1]
    _check_normalized(summary)


def test_epilepsy_random_slope() -> None:
    data = load_epilepsy(2)
    result, summary = _fit(data, TransformMethod.APPROACH2)
    _check(
        summary,
        {
            "intercept": (0.21, 0.1),
            "lbase4": (0.89, 0.06),
            "trt": (-0.94, 0.15),
            "lbase4_trt": (0.34, 0.08),
            "lage": (0.48, 0.15),
            "visit_code": (-0.28, 0.08),
            "sigma1": (0.52, 0.05),
            "sigma2": (0.77, 0.05),
            "rho": (0.01, 0.05),
        },
    )
    assert result.converged
    assert result.trace[0] < result.trace[-1]


def test_poisson_simulation_recovers_truth() -> None:
    data, truth = simulate_dataset(SimulationSpec.from_scenario(Scenario.POISSON_II), seed=0)
    assert (data.n, int(data.sizes[0])) == (500, 7)
    target = {"intercept": truth.beta[0], "x": truth.beta[1], "sigma": truth.sigma}
    elbos = []
    for method in TransformMethod:
        result, summary = _fit(data, method, elbo_draws=5000)
        assert result.converged
        for name, value in target.items():
            mean, sd = summary.value(name)
            assert abs(mean - value) < 3.0 * sd, (method, name)
        elbos.append(result.elbo)
    assert abs(elbos[0] - elbos[1]) < 1.0


def test_bernoulli_simulation_second_method_not_worse() -> None:
    data, _ = simulate_dataset(SimulationSpec.from_scenario(Scenario.BERNOULLI_I), seed=0)
    first = fit(data, default_prior(data), FitConfig(method=TransformMethod.APPROACH1, seed=1, elbo_draws=5000))
    second = fit(data, default_prior(data), FitConfig(method=TransformMethod.APPROACH2, seed=1, elbo_draws=5000))
    assert second.elbo >= first.elbo - 0.1
