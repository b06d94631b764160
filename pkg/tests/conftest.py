"""Shared builders for glmm_rvb tests."""

from __future__ import annotations

from collections.abc import Callable
import math

import numpy as np
import pytest
from scipy import special

from glmm_rvb.family import BERNOULLI, BINOMIAL, GAUSSIAN_UNIT, POISSON, Family, FamilyKind
from glmm_rvb.model import Dataset, GlobalParams, NormalPrior, Priors, log_joint

FD_STEP = 1e-5
BINOMIAL_TRIALS = 10
FAMILIES = {
    "poisson": POISSON,
    "binomial": BINOMIAL,
    "bernoulli": BERNOULLI,
    "gaussian_unit": GAUSSIAN_UNIT,
}
HERMITE_NODES = 40


def _responses(family: Family, eta: np.ndarray, trials: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    match family.kind:
        case FamilyKind.POISSON:
            return rng.poisson(np.exp(eta)).astype(np.float64)
        case FamilyKind.GAUSSIAN_UNIT:
            return eta + rng.standard_normal(eta.shape)
    return rng.binomial(trials.astype(np.int64), special.expit(eta)).astype(np.float64)


def make_dataset(
    family: Family,
    *,
    n: int = 4,
    size: int = 5,
    p: int = 2,
    r: int = 1,
    seed: int = 0,
) -> Dataset:
    """Random dataset with an intercept in X and Z and standard normal covariates."""
    rng = np.random.default_rng(seed)
    trials_value = BINOMIAL_TRIALS if family.kind is FamilyKind.BINOMIAL else 1
    ys, xs, zs, trials = [], [], [], []
    for i in range(n):
        size_i = size + (i % 2)
        x = np.column_stack([np.ones(size_i), rng.normal(0.0, 0.5, (size_i, p - 1))])
        z = np.column_stack([np.ones(size_i), rng.normal(0.0, 0.5, (size_i, r - 1))])
        m = np.full(size_i, float(trials_value))
        eta = x @ np.full(p, 0.2) + z @ rng.normal(0.0, 0.5, r)
        ys.append(_responses(family, eta, m, rng))
        xs.append(x)
        zs.append(z)
        trials.append(m)
    return Dataset.from_groups(family, ys, xs, zs, trials=trials)


def random_params(data: Dataset, seed: int = 0) -> tuple[GlobalParams, np.ndarray]:
    """β, ω ~ N(0, 0.3²) and b̃ ~ N(0, I)."""
    rng = np.random.default_rng(seed)
    gp = GlobalParams(beta=rng.normal(0.0, 0.3, data.p), omega=rng.normal(0.0, 0.3, data.g2))
    return gp, rng.standard_normal((data.n, data.r))


def unit_priors(r: int) -> Priors:
    return Priors(nu=float(r + 1), scale=np.eye(r), sigma_beta2=100.0)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for k in range(x.size):
        up = x.copy()
        down = x.copy()
        up[k] += step
        down[k] -= step
        grad[k] = (fn(up) - fn(down)) / (2.0 * step)
    return grad


def assert_gradient_close(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-5) -> None:
    error = np.max(np.abs(analytic - numeric) / (1.0 + np.abs(analytic)))
    assert error < tol, f"max relative error {error:.3g}"


def _conditional_evidence(data: Dataset, prior: NormalPrior, omega: float) -> float:
    """log ∫ exp(log_joint) d(b, β) at fixed scalar ω for the unit-variance Gaussian family."""
    n, p = data.n, data.p
    k = n + p
    gp = GlobalParams(beta=np.zeros(p), omega=np.array([omega]))
    design_rows, responses = [], []
    for i in range(n):
        for j in range(data.sizes[i]):
            row = np.zeros(k)
            row[i] = data.z[i, j, 0]
            row[n:] = data.x[i, j]
            design_rows.append(row)
            responses.append(data.y[i, j])
    design = np.asarray(design_rows)
    precision = design.T @ design
    precision[:n, :n] += gp.precision[0, 0] * np.eye(n)
    precision[n:, n:] += prior.precision[:p, :p]
    shift = design.T @ np.asarray(responses)
    base = log_joint(data, gp, np.zeros((n, 1)), prior)
    _, log_det = np.linalg.slogdet(precision)
    quadratic = 0.5 * shift @ np.linalg.solve(precision, shift)
    return float(base + quadratic + 0.5 * k * math.log(2 * math.pi) - 0.5 * log_det)


def gaussian_log_evidence(data: Dataset, prior: NormalPrior) -> float:
    """Exact log ∫ exp(ℓ) dθ − (d/2)·log 2π for a random-intercept unit-variance Gaussian model.

    β is integrated analytically; the scalar ω by Gauss-Hermite quadrature
    around its prior. The −(d/2)·log 2π offset matches the lower-bound
    convention, which drops the Gaussian normalizing constant from log q.
    """
    assert data.r == 1 and np.allclose(prior.mean[: data.p], 0.0)
    centre = float(prior.mean[data.p])
    spread = math.sqrt(float(prior.cov[data.p, data.p])) * math.sqrt(2.0)
    nodes, weights = np.polynomial.hermite.hermgauss(HERMITE_NODES)
    values = np.array([_conditional_evidence(data, prior, centre + spread * t) + t * t for t in nodes])
    log_z = math.log(spread) + float(special.logsumexp(values, b=weights))
    return log_z - 0.5 * data.d * math.log(2 * math.pi)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)
