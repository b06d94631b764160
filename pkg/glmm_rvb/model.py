"""GLMM definition: data, global parameters, priors and log joint densities."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
import math
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .const import (
    DEFAULT_NORMAL_PRIOR_SD,
    DEFAULT_SIGMA_BETA2,
    IRLS_MAX_HALVINGS,
    IRLS_MAX_ITER,
    IRLS_TOL,
    LOGGER,
)
from .exceptions import DataError, IrlsDiverged, NotPositiveDefinite, OverflowGuard, PriorConfigError, RankDeficient
from .family import Family, FamilyKind
from .matcalc import (
    FloatArray,
    cholesky,
    diag_positions,
    dweight,
    from_log_diag,
    half_length,
    halfvec,
    log_diag_sum,
    order_from_half,
    spd_inverse,
    to_log_diag,
)

if TYPE_CHECKING:
    from .reparam import LocalTransforms


@dataclass(frozen=True, eq=False)
class Dataset:
    """Grouped observations, padded to a common length per subject.

    Arrays are indexed (subject, observation[, column]); `mask` is 1 for
    real observations and 0 for padding. Padded rows have zero designs.
    """

    family: Family
    y: FloatArray
    x: FloatArray
    z: FloatArray
    trials: FloatArray
    mask: FloatArray
    subject_ids: tuple[str, ...]
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]

    @classmethod
    def from_groups(
        cls,
        family: Family,
        ys: Sequence[Sequence[float] | FloatArray],
        xs: Sequence[FloatArray],
        zs: Sequence[FloatArray],
        *,
        trials: Sequence[Sequence[float] | FloatArray] | None = None,
        subject_ids: Sequence[str] | None = None,
        fixed_names: Sequence[str] | None = None,
        random_names: Sequence[str] | None = None,
    ) -> Dataset:
        """Build a dataset from per-subject arrays."""
        n = len(ys)
        if len(xs) != n or len(zs) != n or (trials is not None and len(trials) != n):
            raise DataError("per-subject sequences differ in length")
        if n == 0:
            raise DataError("dataset has no subjects; use Dataset.empty")
        p = np.asarray(xs[0]).reshape(len(ys[0]), -1).shape[1]
        r = np.asarray(zs[0]).reshape(len(ys[0]), -1).shape[1]
        sizes = [len(y_i) for y_i in ys]
        if min(sizes) < 1:
            raise DataError("every subject needs at least one observation")
        nmax = max(sizes)
        data = cls._allocate(family, n, nmax, p, r, subject_ids, fixed_names, random_names)
        for i, size in enumerate(sizes):
            x_i = np.asarray(xs[i], dtype=np.float64).reshape(size, -1)
            z_i = np.asarray(zs[i], dtype=np.float64).reshape(size, -1)
            if x_i.shape[1] != p or z_i.shape[1] != r:
                raise DataError(f"subject {data.subject_ids[i]} has inconsistent design columns")
            data.y[i, :size] = np.asarray(ys[i], dtype=np.float64)
            data.x[i, :size] = x_i
            data.z[i, :size] = z_i
            data.mask[i, :size] = 1.0
            if trials is not None:
                data.trials[i, :size] = np.asarray(trials[i], dtype=np.float64)
        data.validate()
        return data

    @classmethod
    def empty(cls, family: Family, p: int, r: int) -> Dataset:
        """Dataset with no subjects; only priors contribute to the joint."""
        return cls._allocate(family, 0, 0, p, r, None, None, None)

    @classmethod
    def _allocate(
        cls,
        family: Family,
        n: int,
        nmax: int,
        p: int,
        r: int,
        subject_ids: Sequence[str] | None,
        fixed_names: Sequence[str] | None,
        random_names: Sequence[str] | None,
    ) -> Dataset:
        ids = tuple(subject_ids) if subject_ids is not None else tuple(str(i + 1) for i in range(n))
        if len(ids) != n:
            raise DataError("subject id count does not match subject count")
        fixed = tuple(fixed_names) if fixed_names is not None else tuple(f"beta{k}" for k in range(p))
        random = tuple(random_names) if random_names is not None else tuple(f"b{k + 1}" for k in range(r))
        if len(fixed) != p or len(random) != r:
            raise DataError("column names do not match design widths")
        return cls(
            family=family,
            y=np.zeros((n, nmax)),
            x=np.zeros((n, nmax, p)),
            z=np.zeros((n, nmax, r)),
            trials=np.ones((n, nmax)),
            mask=np.zeros((n, nmax)),
            subject_ids=ids,
            fixed_names=fixed,
            random_names=random,
        )

    def validate(self) -> None:
        """Check shapes, finiteness and response support."""
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.z))):
            raise DataError("design matrices contain non-finite entries")
        observed = self.mask > 0
        if self.n and np.any(observed.sum(axis=1) < 1):
            raise DataError("every subject needs at least one observation")
        self.family.validate(self.y[observed], self.trials[observed])

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[2])

    @property
    def r(self) -> int:
        return int(self.z.shape[2])

    @property
    def g2(self) -> int:
        return half_length(self.r)

    @property
    def g(self) -> int:
        return self.p + self.g2

    @property
    def d(self) -> int:
        return self.n * self.r + self.g

    @cached_property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.mask.sum(axis=1))

    @cached_property
    def eta_hat(self) -> FloatArray:
        """Regularized natural-parameter estimates, zero on padding."""
        values = self.family.eta_hat_reg(np.where(self.mask > 0, self.y, 0.0), self.trials)
        return np.asarray(values * self.mask)

    def subset(self, indices: Sequence[int] | FloatArray) -> Dataset:
        """Dataset restricted to the given subjects, in the given order."""
        idx = np.asarray(indices, dtype=np.intp)
        nmax = max((self.sizes[i] for i in idx), default=0)
        return Dataset(
            family=self.family,
            y=self.y[idx, :nmax].copy(),
            x=self.x[idx, :nmax].copy(),
            z=self.z[idx, :nmax].copy(),
            trials=self.trials[idx, :nmax].copy(),
            mask=self.mask[idx, :nmax].copy(),
            subject_ids=tuple(self.subject_ids[i] for i in idx),
            fixed_names=self.fixed_names,
            random_names=self.random_names,
        )

    def pooled(self) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
        """Return observed (y, X, Z, trials) stacked over subjects."""
        observed = self.mask > 0
        return self.y[observed], self.x[observed], self.z[observed], self.trials[observed]


@dataclass(frozen=True, eq=False)
class GlobalParams:
    """Fixed effects β and ω, the log-diagonal half-vector of W with Ω = WWᵀ."""

    beta: FloatArray
    omega: FloatArray

    @classmethod
    def from_vector(cls, theta_g: FloatArray, p: int) -> GlobalParams:
        theta_g = np.asarray(theta_g, dtype=np.float64)
        return cls(beta=theta_g[:p].copy(), omega=theta_g[p:].copy())

    @classmethod
    def from_precision(cls, beta: FloatArray | Sequence[float], precision: FloatArray) -> GlobalParams:
        """Parameters whose Ω equals the given precision matrix."""
        return cls(beta=np.asarray(beta, dtype=np.float64), omega=to_log_diag(cholesky(np.atleast_2d(precision))))

    @property
    def p(self) -> int:
        return int(self.beta.size)

    @cached_property
    def r(self) -> int:
        return order_from_half(self.omega.size)

    @cached_property
    def w(self) -> FloatArray:
        return from_log_diag(self.omega, self.r)

    @cached_property
    def precision(self) -> FloatArray:
        return np.asarray(self.w @ self.w.T)

    @cached_property
    def log_det_precision(self) -> float:
        return float(2.0 * log_diag_sum(self.w))

    def vector(self) -> FloatArray:
        return np.concatenate([self.beta, self.omega])


class GlobalPrior(Protocol):
    """Prior density on θ_G = (β, ω)."""

    def log_density(self, gp: GlobalParams) -> float: ...

    def grad(self, gp: GlobalParams) -> tuple[FloatArray, FloatArray]: ...


@dataclass(frozen=True, eq=False)
class Priors:
    """N(0, σβ² I) on β and a Wishart W(ν, S) on Ω, pulled back to ω.

    For r = 1 this is Gamma(ν/2, S⁻¹/2) on σ⁻².
    """

    nu: float
    scale: FloatArray
    sigma_beta2: float = DEFAULT_SIGMA_BETA2
    scale_inv: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        scale = np.atleast_2d(np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "scale", scale)
        if self.sigma_beta2 <= 0:
            raise PriorConfigError("sigma_beta2 must be positive")
        if not self.nu > self.r - 1:
            raise PriorConfigError(f"Wishart degrees of freedom {self.nu} must exceed r - 1 = {self.r - 1}")
        try:
            inverse, _ = spd_inverse(scale)
        except NotPositiveDefinite as err:
            raise PriorConfigError("Wishart scale must be positive definite") from err
        object.__setattr__(self, "scale_inv", inverse)

    @property
    def r(self) -> int:
        return int(self.scale.shape[0])

    @property
    def gamma_shape(self) -> float:
        return self.nu / 2.0

    @property
    def gamma_rate(self) -> float:
        """Rate of the Gamma prior on σ⁻² (r = 1 only)."""
        if self.r != 1:
            raise PriorConfigError("a Gamma rate is only defined for r = 1")
        return float(self.scale_inv[0, 0] / 2.0)

    def log_density(self, gp: GlobalParams) -> float:
        return float(-gp.beta @ gp.beta / (2.0 * self.sigma_beta2)) + log_p_omega(gp, self)

    def grad(self, gp: GlobalParams) -> tuple[FloatArray, FloatArray]:
        return -gp.beta / self.sigma_beta2, prior_grad_omega(gp, self)


@dataclass(frozen=True, eq=False)
class NormalPrior:
    """Gaussian prior N(mean, cov) directly on θ_G = (β, ω)."""

    mean: FloatArray
    cov: FloatArray
    precision: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise PriorConfigError("normal prior covariance does not match its mean")
        try:
            precision, _ = spd_inverse(cov)
        except NotPositiveDefinite as err:
            raise PriorConfigError("normal prior covariance must be positive definite") from err
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "precision", precision)

    @classmethod
    def diagonal(cls, mean: FloatArray | Sequence[float], sd: FloatArray | Sequence[float]) -> NormalPrior:
        sd = np.asarray(sd, dtype=np.float64)
        if np.any(sd <= 0):
            raise PriorConfigError("normal prior sds must be positive")
        return cls(mean=np.asarray(mean, dtype=np.float64), cov=np.diag(sd**2))

    @classmethod
    def default(
        cls,
        p: int,
        r: int,
        *,
        sigma_beta2: float = DEFAULT_SIGMA_BETA2,
        omega_sd: float = DEFAULT_NORMAL_PRIOR_SD,
    ) -> NormalPrior:
        """Zero-mean prior with sd σβ on β and omega_sd on every ω coordinate."""
        sd = np.concatenate([np.full(p, math.sqrt(sigma_beta2)), np.full(half_length(r), omega_sd)])
        return cls.diagonal(np.zeros(sd.size), sd)

    @property
    def g(self) -> int:
        return int(self.mean.size)

    def log_density(self, gp: GlobalParams) -> float:
        diff = gp.vector() - self.mean
        return float(-0.5 * diff @ self.precision @ diff)

    def grad(self, gp: GlobalParams) -> tuple[FloatArray, FloatArray]:
        full = -self.precision @ (gp.vector() - self.mean)
        return full[: gp.p], full[gp.p :]


def omega_jacobian_weights(r: int) -> FloatArray:
    """u with uᵢ = r − i + 2 (1-based i): log-Jacobian weights of ω ↦ v(Ω)."""
    return np.arange(r + 1, 1, -1, dtype=np.float64)


def log_p_omega(gp: GlobalParams, pr: Priors) -> float:
    """Wishart log density of Ω transformed to ω, without its normalizing constant."""
    r = gp.r
    log_w_diag = gp.omega[diag_positions(r)]
    return float(
        0.5 * (pr.nu - r - 1.0) * gp.log_det_precision
        - 0.5 * np.sum(pr.scale_inv * gp.precision)
        + r * math.log(2.0)
        + omega_jacobian_weights(r) @ log_w_diag
    )


def prior_grad_omega(gp: GlobalParams, pr: Priors) -> FloatArray:
    """Gradient of log_p_omega in ω."""
    r = gp.r
    w = gp.w
    w_inv_t = np.linalg.inv(w).T
    raw = halfvec((pr.nu - r - 1.0) * w_inv_t - pr.scale_inv @ w)
    out = dweight(w) * raw
    out[diag_positions(r)] += omega_jacobian_weights(r)
    return out


def subject_grad_omega(gp: GlobalParams, b: FloatArray) -> FloatArray:
    """Per-subject D^W v(W⁻ᵀ − bᵢbᵢᵀW) for b of shape (n, r)."""
    w = gp.w
    w_inv_t = np.linalg.inv(w).T
    outer = np.einsum("ik,il->ikl", b, b)
    raw = halfvec(w_inv_t[None] - outer @ w)
    return np.asarray(dweight(w)[None] * raw)


def linear_predictor(data: Dataset, beta: FloatArray, b: FloatArray) -> FloatArray:
    """η = Xβ + Zb per subject and observation."""
    return np.asarray(np.einsum("ijp,p->ij", data.x, beta) + np.einsum("ijr,ir->ij", data.z, b))


def log_joint(data: Dataset, gp: GlobalParams, b: FloatArray, prior: GlobalPrior) -> float:
    """log p(y, θ) up to additive constants."""
    b = np.asarray(b, dtype=np.float64).reshape(data.n, data.r)
    eta = linear_predictor(data, gp.beta, b)
    loglik = float(np.sum(data.mask * data.family.loglik(data.y, eta, data.trials)))
    quad = float(np.einsum("ik,kl,il->", b, gp.precision, b))
    return loglik - 0.5 * quad + 0.5 * data.n * gp.log_det_precision + prior.log_density(gp)


def log_joint_reparam(
    data: Dataset,
    gp: GlobalParams,
    b_tilde: FloatArray,
    transforms: LocalTransforms,
    prior: GlobalPrior,
) -> float:
    """log p(y, θ̃) = log p(y, θ) + Σᵢ log|Lᵢ| at bᵢ = Lᵢb̃ᵢ + λᵢ."""
    b = transforms.invert(np.asarray(b_tilde, dtype=np.float64).reshape(data.n, data.r))
    return log_joint(data, gp, b, prior) + float(np.sum(log_diag_sum(transforms.chol)))


def split_theta(theta: FloatArray, n: int, r: int, p: int) -> tuple[FloatArray, GlobalParams]:
    """Split θ̃ = (b̃₁, …, b̃ₙ, β, ω) into local blocks and global parameters."""
    theta = np.asarray(theta, dtype=np.float64)
    local = theta[: n * r].reshape(n, r)
    return local, GlobalParams.from_vector(theta[n * r :], p)


def join_theta(b_tilde: FloatArray, gp: GlobalParams) -> FloatArray:
    return np.concatenate([np.asarray(b_tilde, dtype=np.float64).reshape(-1), gp.vector()])


def _intercept_column(x: FloatArray) -> int | None:
    for k in range(x.shape[1]):
        if np.all(x[:, k] == 1.0):
            return k
    return None


def _deviance(family: Family, y: FloatArray, eta: FloatArray, trials: FloatArray) -> float:
    return float(-2.0 * np.sum(family.loglik(y, eta, trials)))


def fit_pooled_glm(data: Dataset) -> FloatArray:
    """Fit the GLM with all random effects at zero by iteratively reweighted least squares."""
    y, x, _, trials = data.pooled()
    if y.size == 0 or np.linalg.matrix_rank(x) < data.p:
        raise RankDeficient("fixed-effect design does not have full column rank")
    family = data.family
    beta = np.zeros(data.p)
    intercept = _intercept_column(x)
    if intercept is not None and family.kind is FamilyKind.POISSON:
        beta[intercept] = math.log(float(np.mean(y)) + 0.5)
    deviance = _deviance(family, y, x @ beta, trials)
    for iteration in range(1, IRLS_MAX_ITER + 1):
        eta = x @ beta
        mean, weight, _ = family.derivatives(eta, trials)
        working = eta + (y - mean) / weight
        root = np.sqrt(weight)
        target, *_ = np.linalg.lstsq(x * root[:, None], working * root, rcond=None)
        step = target - beta
        for _ in range(IRLS_MAX_HALVINGS + 1):
            candidate = beta + step
            try:
                new_deviance = _deviance(family, y, x @ candidate, trials)
            except OverflowGuard:
                new_deviance = math.inf
            if new_deviance <= deviance + 1e-12 * (1.0 + abs(deviance)):
                break
            LOGGER.warning("IRLS iteration %d: deviance rose to %.6g, halving step", iteration, new_deviance)
            step = step / 2.0
        else:
            raise IrlsDiverged(f"IRLS step halving failed at iteration {iteration}")
        change = abs(new_deviance - deviance) / (abs(new_deviance) + 0.1)
        beta, deviance = candidate, new_deviance
        LOGGER.debug("IRLS iteration %d: deviance %.10g", iteration, deviance)
        if change < IRLS_TOL:
            return beta
    raise IrlsDiverged(f"IRLS did not converge in {IRLS_MAX_ITER} iterations")


def default_prior(data: Dataset, *, sigma_beta2: float = DEFAULT_SIGMA_BETA2) -> Priors:
    """Default conjugate Wishart prior built from the pooled GLM fit."""
    beta = fit_pooled_glm(data)
    _, x, z, trials = data.pooled()
    weight = data.family.h2(x @ beta, trials)
    info = np.einsum("jk,j,jl->kl", z, weight, z) / data.n
    rho = float(data.r if data.r == 1 else data.r + 1)
    return Priors(nu=rho, scale=info / rho, sigma_beta2=sigma_beta2)
