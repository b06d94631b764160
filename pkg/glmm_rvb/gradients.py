"""Analytic gradient of the reparametrized log joint ℓ(θ̃).

Local blocks are Lᵢᵀaᵢ. Global blocks account for the dependence of the
transforms (λᵢ, Λᵢ, Lᵢ) on θ_G; approach 2 adds the implicit dependence of
the conditional mode b̂ᵢ through the third derivative of h.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .matcalc import FloatArray, dg, dweight, halfvec, log_diag_sum
from .model import Dataset, GlobalParams, GlobalPrior, linear_predictor
from .reparam import LocalTransforms, TransformMethod, build_transforms


@dataclass(frozen=True, eq=False)
class JointGradient:
    """∇ℓ(θ̃) split as (b̃₁, …, b̃ₙ), β, ω."""

    local: FloatArray
    beta: FloatArray
    omega: FloatArray

    def vector(self) -> FloatArray:
        return np.concatenate([self.local.reshape(-1), self.beta, self.omega])

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector())))


@dataclass(frozen=True, eq=False)
class _SubjectTerms:
    b: FloatArray
    eta: FloatArray
    residual: FloatArray
    a: FloatArray


def _terms(data: Dataset, gp: GlobalParams, b: FloatArray) -> _SubjectTerms:
    eta = linear_predictor(data, gp.beta, b)
    residual = data.mask * (data.y - data.family.h1(eta, data.trials))
    a = np.einsum("ijk,ij->ik", data.z, residual) - b @ gp.precision
    return _SubjectTerms(b=b, eta=eta, residual=residual, a=np.asarray(a))


def a_vec(data: Dataset, gp: GlobalParams, b: FloatArray, subjects: Sequence[int] | None = None) -> FloatArray:
    """aᵢ = Zᵢᵀ(yᵢ − g(ηᵢ)) − Ωbᵢ for each subject."""
    if subjects is not None:
        data = data.subset(subjects)
    return _terms(data, gp, np.asarray(b, dtype=np.float64).reshape(data.n, data.r)).a


def grad_local(transforms: LocalTransforms, a: FloatArray) -> FloatArray:
    """∇_b̃ᵢ ℓ = Lᵢᵀaᵢ."""
    return np.asarray(np.einsum("ikj,ik->ij", transforms.chol, a))


def btilde_mat(transforms: LocalTransforms, a: FloatArray, b_tilde: FloatArray) -> FloatArray:
    """B̃ᵢ = lower(Bᵢ) + lower(Bᵢ)ᵀ − dg(Bᵢ) with Bᵢ = Lᵢᵀaᵢb̃ᵢᵀ."""
    outer = np.einsum("ik,il->ikl", grad_local(transforms, a), b_tilde)
    lower = np.tril(outer)
    return np.asarray(lower + np.swapaxes(lower, -1, -2) - dg(outer))


def _global_gradient(
    data: Dataset,
    gp: GlobalParams,
    transforms: LocalTransforms,
    terms: _SubjectTerms,
    b_tilde: FloatArray,
    prior: GlobalPrior,
    *,
    a_eff: FloatArray,
    alpha: FloatArray,
    weights: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    cov, chol, lam = transforms.cov, transforms.chol, transforms.lam
    cov_a = np.einsum("ikl,il->ik", cov, a_eff)
    shifted = terms.residual - weights * np.einsum("ijk,ik->ij", data.z, cov_a) - alpha
    grad_beta = np.einsum("ijp,ij->p", data.x, shifted)

    spread = np.einsum("ikm,imn,iln->kl", chol, btilde_mat(transforms, terms.a, b_tilde), chol)
    cross = np.einsum("ik,il->kl", cov_a, lam)
    total = np.einsum("ik,il->kl", terms.b, terms.b) + cross + cross.T + cov.sum(axis=0) + spread
    w = gp.w
    raw = data.n * np.linalg.inv(w).T - total @ w
    grad_omega = dweight(w) * halfvec(raw)

    prior_beta, prior_omega = prior.grad(gp)
    return np.asarray(grad_beta + prior_beta), np.asarray(grad_omega + prior_omega)


def _resolve_b_tilde(data: Dataset, b_tilde: FloatArray) -> FloatArray:
    return np.asarray(b_tilde, dtype=np.float64).reshape(data.n, data.r)


def _global_a1(
    data: Dataset,
    gp: GlobalParams,
    transforms: LocalTransforms,
    terms: _SubjectTerms,
    b_tilde: FloatArray,
    prior: GlobalPrior,
) -> tuple[FloatArray, FloatArray]:
    weights = data.mask * data.family.h2(transforms.eta_base, data.trials)
    return _global_gradient(
        data, gp, transforms, terms, b_tilde, prior, a_eff=terms.a, alpha=np.zeros_like(weights), weights=weights
    )


def _global_a2(
    data: Dataset,
    gp: GlobalParams,
    transforms: LocalTransforms,
    terms: _SubjectTerms,
    b_tilde: FloatArray,
    prior: GlobalPrior,
) -> tuple[FloatArray, FloatArray]:
    _, h2, h3 = data.family.derivatives(transforms.eta_base, data.trials)
    spread = transforms.cov + np.einsum(
        "ikm,imn,iln->ikl", transforms.chol, btilde_mat(transforms, terms.a, b_tilde), transforms.chol
    )
    alpha = 0.5 * data.mask * h3 * np.einsum("ijk,ikl,ijl->ij", data.z, spread, data.z)
    a_eff = terms.a - np.einsum("ijk,ij->ik", data.z, alpha)
    return _global_gradient(
        data, gp, transforms, terms, b_tilde, prior, a_eff=a_eff, alpha=alpha, weights=data.mask * h2
    )


def grad_global_a1(
    data: Dataset,
    gp: GlobalParams,
    transforms: LocalTransforms,
    b_tilde: FloatArray,
    prior: GlobalPrior,
) -> tuple[FloatArray, FloatArray]:
    """(∇_β ℓ, ∇_ω ℓ) for transforms built by approach 1 at the same θ_G."""
    b_tilde = _resolve_b_tilde(data, b_tilde)
    return _global_a1(data, gp, transforms, _terms(data, gp, transforms.invert(b_tilde)), b_tilde, prior)


def grad_global_a2(
    data: Dataset,
    gp: GlobalParams,
    transforms: LocalTransforms,
    b_tilde: FloatArray,
    prior: GlobalPrior,
) -> tuple[FloatArray, FloatArray]:
    """(∇_β ℓ, ∇_ω ℓ) for transforms built by approach 2 at the same θ_G."""
    b_tilde = _resolve_b_tilde(data, b_tilde)
    return _global_a2(data, gp, transforms, _terms(data, gp, transforms.invert(b_tilde)), b_tilde, prior)


def value_and_grad(
    data: Dataset,
    gp: GlobalParams,
    b_tilde: FloatArray,
    method: TransformMethod,
    prior: GlobalPrior,
) -> tuple[float, JointGradient]:
    """Return ℓ(θ̃) and ∇ℓ(θ̃), rebuilding the transforms from θ_G."""
    b_tilde = _resolve_b_tilde(data, b_tilde)
    transforms = build_transforms(data, gp, method)
    terms = _terms(data, gp, transforms.invert(b_tilde))
    global_fn = _global_a1 if method is TransformMethod.APPROACH1 else _global_a2
    grad_beta, grad_omega = global_fn(data, gp, transforms, terms, b_tilde, prior)
    value = (
        float(np.sum(data.mask * data.family.loglik(data.y, terms.eta, data.trials)))
        - 0.5 * float(np.einsum("ik,kl,il->", terms.b, gp.precision, terms.b))
        + 0.5 * data.n * gp.log_det_precision
        + prior.log_density(gp)
        + float(np.sum(log_diag_sum(transforms.chol)))
    )
    return value, JointGradient(local=grad_local(transforms, terms.a), beta=grad_beta, omega=grad_omega)


def grad_full(
    data: Dataset,
    gp: GlobalParams,
    b_tilde: FloatArray,
    method: TransformMethod,
    prior: GlobalPrior,
) -> JointGradient:
    """∇ℓ(θ̃) in the order of θ̃."""
    return value_and_grad(data, gp, b_tilde, method, prior)[1]
