"""Per-subject affine transforms b̃ᵢ = Lᵢ⁻¹(bᵢ − λᵢ).

Approach 1 expands the likelihood about the regularized natural-parameter
estimates; approach 2 expands it about the conditional mode of bᵢ, found by
Newton-Raphson with step halving. Both work on all subjects at once.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from .const import (
    LOGGER,
    NEWTON_GRAD_TOL,
    NEWTON_MAX_HALVINGS,
    NEWTON_MAX_ITER,
    NEWTON_MIN_INCREASE,
    NR_RIDGE,
    NR_SINGULAR_COND,
    POISSON_ETA_MAX,
)
from .exceptions import ModeSearchFailed
from .family import FamilyKind
from .matcalc import FloatArray, IntArray, cholesky, solve_lower, spd_inverse
from .model import Dataset, GlobalParams


class TransformMethod(StrEnum):
    """How the Gaussian approximation of p(bᵢ | θ_G, yᵢ) is built."""

    APPROACH1 = "a1"
    APPROACH2 = "a2"


@dataclass(frozen=True, eq=False)
class LocalTransforms:
    """Transforms for a stack of subjects.

    `eta_base` is the linear predictor at which the curvature H was taken:
    the regularized estimates for approach 1, Xβ + Zb̂ for approach 2.
    """

    method: TransformMethod
    lam: FloatArray
    cov: FloatArray
    chol: FloatArray
    eta_base: FloatArray

    def __len__(self) -> int:
        return int(self.lam.shape[0])

    def subject(self, i: int) -> LocalTransforms:
        return LocalTransforms(
            method=self.method,
            lam=self.lam[i : i + 1],
            cov=self.cov[i : i + 1],
            chol=self.chol[i : i + 1],
            eta_base=self.eta_base[i : i + 1],
        )

    def apply(self, b: FloatArray) -> FloatArray:
        """b̃ = L⁻¹(b − λ)."""
        return solve_lower(self.chol, np.asarray(b, dtype=np.float64) - self.lam)

    def invert(self, b_tilde: FloatArray) -> FloatArray:
        """b = Lb̃ + λ."""
        return np.asarray(np.einsum("ikl,il->ik", self.chol, b_tilde) + self.lam)


@dataclass(frozen=True, eq=False)
class ModeSearch:
    """Outcome of the conditional-mode search."""

    b_hat: FloatArray
    iterations: int
    objective_path: tuple[FloatArray, ...]


def _restrict(data: Dataset, subjects: Sequence[int] | None) -> Dataset:
    return data if subjects is None else data.subset(subjects)


def _fixed_part(data: Dataset, gp: GlobalParams) -> FloatArray:
    return np.asarray(np.einsum("ijp,p->ij", data.x, gp.beta))


def _assemble(
    method: TransformMethod,
    data: Dataset,
    gp: GlobalParams,
    lam: FloatArray | None,
    rhs: FloatArray | None,
    weights: FloatArray,
    eta_base: FloatArray,
) -> LocalTransforms:
    precision = gp.precision[None] + np.einsum("ijk,ij,ijl->ikl", data.z, weights, data.z)
    cov, _ = spd_inverse(precision)
    chol = cholesky(cov)
    if lam is None:
        assert rhs is not None
        lam = np.asarray(np.einsum("ikl,il->ik", cov, rhs))
    return LocalTransforms(method=method, lam=lam, cov=cov, chol=chol, eta_base=eta_base)


def transform_a1(
    data: Dataset,
    gp: GlobalParams,
    subjects: Sequence[int] | None = None,
    *,
    eta_hat: FloatArray | None = None,
) -> LocalTransforms:
    """Transforms from a second-order expansion about the regularized estimates η̂.

    `eta_hat` overrides the cached estimates, for studying limits of η̂.
    """
    data = _restrict(data, subjects)
    base = data.eta_hat if eta_hat is None else np.asarray(eta_hat, dtype=np.float64) * data.mask
    h1, h2, _ = data.family.derivatives(base, data.trials)
    weights = data.mask * h2
    working = data.mask * (data.y - h1 + h2 * (base - _fixed_part(data, gp)))
    rhs = np.einsum("ijk,ij->ik", data.z, working)
    return _assemble(TransformMethod.APPROACH1, data, gp, None, rhs, weights, base)


def nr_init(data: Dataset, gp: GlobalParams, subjects: Sequence[int] | None = None) -> FloatArray:
    """Least-squares start (ZᵀZ)⁻¹Zᵀ(η̂ − Xβ); zero for subjects with fewer observations than r."""
    data = _restrict(data, subjects)
    if data.n == 0:
        return np.zeros((0, data.r))
    target = data.mask * (data.eta_hat - _fixed_part(data, gp))
    gram = np.einsum("ijk,ijl->ikl", data.z, data.z)
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.linalg.cond(gram)
    singular = ~np.isfinite(condition) | (condition > NR_SINGULAR_COND)
    gram = gram + np.where(singular[:, None, None], NR_RIDGE * np.eye(data.r), 0.0)
    start = np.linalg.solve(gram, np.einsum("ijk,ij->ik", data.z, target)[..., None])[..., 0]
    start[np.asarray(data.sizes) < data.r] = 0.0
    return np.asarray(start)


def _objective(data: Dataset, rows: IntArray, xb: FloatArray, b: FloatArray, omega: FloatArray) -> FloatArray:
    """Σⱼ loglik − ½bᵀΩb per subject; −inf where the Poisson guard would trip."""
    eta = xb[rows] + np.einsum("ijk,ik->ij", data.z[rows], b)
    mask = data.mask[rows]
    overflow = np.zeros(rows.size, dtype=bool)
    if data.family.kind is FamilyKind.POISSON:
        overflow = np.any((eta > POISSON_ETA_MAX) & (mask > 0), axis=1)
        eta = np.minimum(eta, POISSON_ETA_MAX)
    loglik = np.sum(mask * data.family.loglik(data.y[rows], eta, data.trials[rows]), axis=1)
    value = loglik - 0.5 * np.einsum("ik,kl,il->i", b, omega, b)
    return np.asarray(np.where(overflow | ~np.isfinite(value), -np.inf, value))


def _score(
    data: Dataset, rows: IntArray, xb: FloatArray, b: FloatArray, omega: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Gradient Zᵀ(y − g(η)) − Ωb and masked curvature weights at b."""
    eta = xb[rows] + np.einsum("ijk,ik->ij", data.z[rows], b)
    mask = data.mask[rows]
    h1, h2, _ = data.family.derivatives(eta * mask, data.trials[rows])
    grad = np.einsum("ijk,ij->ik", data.z[rows], mask * (data.y[rows] - h1)) - b @ omega
    return np.asarray(grad), np.asarray(mask * h2)


def _stationary(grad: FloatArray, b: FloatArray, omega: FloatArray) -> FloatArray:
    scale = 1.0 + np.max(np.abs(b @ omega), axis=1, initial=0.0)
    return np.asarray(np.max(np.abs(grad), axis=1, initial=0.0) < NEWTON_GRAD_TOL * scale)


def conditional_mode(data: Dataset, gp: GlobalParams, start: FloatArray | None = None) -> ModeSearch:
    """Maximize log p(bᵢ | θ_G, yᵢ) for every subject.

    Steps are halved until the objective does not decrease. Once an accepted
    step gains less than NEWTON_MIN_INCREASE the objective is flat to round-off,
    and a step is also accepted when it shrinks the gradient.
    """
    omega = gp.precision
    xb = _fixed_part(data, gp)
    every = np.arange(data.n)
    b = np.array(nr_init(data, gp) if start is None else start, dtype=np.float64)
    value = _objective(data, every, xb, b, omega)
    restart = ~np.isfinite(value)
    if np.any(restart):
        b[restart] = 0.0
        value = _objective(data, every, xb, b, omega)
    path = [value.copy()]
    polishing = np.zeros(data.n, dtype=bool)
    for iteration in range(NEWTON_MAX_ITER + 1):
        grad, weights = _score(data, every, xb, b, omega)
        active = np.flatnonzero(~_stationary(grad, b, omega))
        if active.size == 0:
            LOGGER.debug("Conditional mode found for %d subjects in %d iterations", data.n, iteration)
            return ModeSearch(b_hat=b, iterations=iteration, objective_path=tuple(path))
        if iteration == NEWTON_MAX_ITER:
            break
        precision = omega[None] + np.einsum("ijk,ij,ijl->ikl", data.z[active], weights[active], data.z[active])
        step = np.linalg.solve(precision, grad[active][..., None])[..., 0]
        current_b, current_value = b[active], value[active]
        current_norm = np.max(np.abs(grad[active]), axis=1)
        scale = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        for _ in range(NEWTON_MAX_HALVINGS + 1):
            candidate = current_b + scale[:, None] * step
            cand_value = _objective(data, active, xb, candidate, omega)
            ok = cand_value >= current_value - 1e-10 * (1.0 + np.abs(current_value))
            if np.any(polishing[active] & ~ok):
                finite = np.isfinite(cand_value)
                cand_grad, _ = _score(data, active, xb, np.where(finite[:, None], candidate, current_b), omega)
                ok |= polishing[active] & finite & (np.max(np.abs(cand_grad), axis=1) < current_norm)
            newly = ok & ~accepted
            b[active[newly]] = candidate[newly]
            value[active[newly]] = cand_value[newly]
            accepted |= newly
            if accepted.all():
                break
            scale = np.where(accepted, scale, scale / 2.0)
        if not accepted.all():
            raise ModeSearchFailed([int(i) for i in active[~accepted]])
        polishing[active] |= (value[active] - current_value) < NEWTON_MIN_INCREASE
        path.append(value.copy())
    raise ModeSearchFailed([int(i) for i in active])


def transform_a2(
    data: Dataset,
    gp: GlobalParams,
    subjects: Sequence[int] | None = None,
) -> LocalTransforms:
    """Transforms from a second-order expansion about the conditional mode b̂ᵢ."""
    data = _restrict(data, subjects)
    b_hat = conditional_mode(data, gp).b_hat
    eta = data.mask * (_fixed_part(data, gp) + np.einsum("ijk,ik->ij", data.z, b_hat))
    weights = data.mask * data.family.h2(eta, data.trials)
    return _assemble(TransformMethod.APPROACH2, data, gp, b_hat, None, weights, eta)


def build_transforms(
    data: Dataset,
    gp: GlobalParams,
    method: TransformMethod,
    subjects: Sequence[int] | None = None,
) -> LocalTransforms:
    if method is TransformMethod.APPROACH1:
        return transform_a1(data, gp, subjects)
    return transform_a2(data, gp, subjects)
