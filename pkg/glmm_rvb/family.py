"""One-parameter exponential families with canonical links."""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum
import math

import numpy as np
from scipy import special

from .const import POISSON_ETA_MAX
from .exceptions import DomainError, InvalidResponse, OverflowGuard
from .matcalc import FloatArray

type ArrayLike = FloatArray | float


class FamilyKind(StrEnum):
    """Supported response families."""

    POISSON = "poisson"
    BINOMIAL = "binomial"
    BERNOULLI = "bernoulli"
    GAUSSIAN_UNIT = "gaussian_unit"


def digamma(x: ArrayLike) -> FloatArray:
    """Digamma function on x > 0."""
    values = np.asarray(x, dtype=np.float64)
    if np.any(~(values > 0.0)):
        raise DomainError("digamma is only defined here for x > 0")
    return np.asarray(special.digamma(values), dtype=np.float64)


@dataclass(frozen=True)
class Family:
    """Response family; trial counts travel with the data, not the family."""

    kind: FamilyKind

    @classmethod
    def from_name(cls, name: str) -> Family:
        return cls(FamilyKind(name))

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def internal(self) -> bool:
        """True for the unit-variance Gaussian used by exactness checks."""
        return self.kind is FamilyKind.GAUSSIAN_UNIT

    @property
    def uses_trials(self) -> bool:
        return self.kind in (FamilyKind.BINOMIAL, FamilyKind.BERNOULLI)

    def _guard(self, eta: FloatArray) -> None:
        if self.kind is FamilyKind.POISSON and np.any(eta > POISSON_ETA_MAX):
            raise OverflowGuard(f"Poisson natural parameter above {POISSON_ETA_MAX:g}: {float(np.max(eta)):.6g}")

    def h(self, eta: ArrayLike, trials: ArrayLike = 1.0) -> FloatArray:
        """Log-partition h(η)."""
        eta = np.asarray(eta, dtype=np.float64)
        self._guard(eta)
        match self.kind:
            case FamilyKind.POISSON:
                return np.exp(eta)
            case FamilyKind.BINOMIAL | FamilyKind.BERNOULLI:
                return np.asarray(trials, dtype=np.float64) * np.logaddexp(0.0, eta)
            case FamilyKind.GAUSSIAN_UNIT:
                return 0.5 * eta * eta

    def derivatives(self, eta: ArrayLike, trials: ArrayLike = 1.0) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Return (h′, h″, h‴) at η."""
        eta = np.asarray(eta, dtype=np.float64)
        self._guard(eta)
        match self.kind:
            case FamilyKind.POISSON:
                mean = np.exp(eta)
                return mean, mean.copy(), mean.copy()
            case FamilyKind.BINOMIAL | FamilyKind.BERNOULLI:
                m = np.asarray(trials, dtype=np.float64)
                prob = special.expit(eta)
                comp = special.expit(-eta)
                var = prob * comp
                return m * prob, m * var, m * var * (comp - prob)
            case FamilyKind.GAUSSIAN_UNIT:
                return eta.copy(), np.ones_like(eta), np.zeros_like(eta)

    def h1(self, eta: ArrayLike, trials: ArrayLike = 1.0) -> FloatArray:
        return self.derivatives(eta, trials)[0]

    def h2(self, eta: ArrayLike, trials: ArrayLike = 1.0) -> FloatArray:
        return self.derivatives(eta, trials)[1]

    def h3(self, eta: ArrayLike, trials: ArrayLike = 1.0) -> FloatArray:
        return self.derivatives(eta, trials)[2]

    def loglik(self, y: ArrayLike, eta: ArrayLike, trials: ArrayLike = 1.0) -> FloatArray:
        """yη − h(η), without terms that do not depend on η."""
        eta = np.asarray(eta, dtype=np.float64)
        return np.asarray(y, dtype=np.float64) * eta - self.h(eta, trials)

    def eta_hat_ml(self, y: float, trials: float = 1.0) -> float | None:
        """Maximum-likelihood natural parameter of one observation, None when it does not exist."""
        match self.kind:
            case FamilyKind.POISSON:
                return math.log(y) if y > 0 else None
            case FamilyKind.BINOMIAL | FamilyKind.BERNOULLI:
                if 0 < y < trials:
                    return math.log(y / (trials - y))
                return None
            case FamilyKind.GAUSSIAN_UNIT:
                return float(y)

    def eta_hat_reg(self, y: ArrayLike, trials: ArrayLike = 1.0) -> FloatArray:
        """Jeffreys-regularized natural parameter, finite on the support boundary."""
        y = np.asarray(y, dtype=np.float64)
        match self.kind:
            case FamilyKind.POISSON:
                return digamma(y + 0.5)
            case FamilyKind.BINOMIAL | FamilyKind.BERNOULLI:
                m = np.asarray(trials, dtype=np.float64)
                return digamma(y + 0.5) - digamma(m - y + 0.5)
            case FamilyKind.GAUSSIAN_UNIT:
                return y.copy()

    def invalid_responses(self, y: FloatArray, trials: FloatArray) -> FloatArray:
        """Return a boolean mask of observations outside the family's support."""
        finite = np.isfinite(y)
        match self.kind:
            case FamilyKind.POISSON:
                bad = ~finite | (y < 0) | (y != np.round(y))
            case FamilyKind.BINOMIAL | FamilyKind.BERNOULLI:
                bad_trials = ~np.isfinite(trials) | (trials < 1) | (trials != np.round(trials))
                if self.kind is FamilyKind.BERNOULLI:
                    bad_trials |= trials != 1
                bad = ~finite | bad_trials | (y < 0) | (y > trials) | (y != np.round(y))
            case FamilyKind.GAUSSIAN_UNIT:
                bad = ~finite
        return np.asarray(bad)

    def validate(self, y: FloatArray, trials: FloatArray) -> None:
        bad = self.invalid_responses(y, trials)
        if np.any(bad):
            first = int(np.flatnonzero(bad.reshape(-1))[0])
            raise InvalidResponse(self.name, detail=f"observation {first}")


POISSON = Family(FamilyKind.POISSON)
BINOMIAL = Family(FamilyKind.BINOMIAL)
BERNOULLI = Family(FamilyKind.BERNOULLI)
GAUSSIAN_UNIT = Family(FamilyKind.GAUSSIAN_UNIT)
