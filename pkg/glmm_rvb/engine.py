"""Stochastic variational optimizer for the reparametrized model.

q(θ̃) is Gaussian with a block-diagonal Cholesky factor C: one r×r block per
subject and one g×g block for θ_G. The mean and the log-diagonal factor C*
are updated by Adam from reparametrization-trick gradient estimates, and
optimization stops once the trend of windowed lower-bound means turns down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
from time import perf_counter

import numpy as np

from .const import (
    DEFAULT_ADAM_ALPHA,
    DEFAULT_ADAM_BETA1,
    DEFAULT_ADAM_BETA2,
    DEFAULT_ADAM_EPS,
    DEFAULT_ELBO_DRAWS,
    DEFAULT_FAILURE_THRESHOLD,
    DEFAULT_GLOBAL_INIT_SCALE,
    DEFAULT_MAX_ITER,
    DEFAULT_MAX_RETRIES,
    DEFAULT_SAMPLES,
    DEFAULT_TAU,
    DEFAULT_WINDOW,
    LOGGER,
    STREAM_ELBO,
    STREAM_STEP,
)
from .exceptions import ConfigError, DivergedError, NumericalError, error_text
from .gradients import value_and_grad
from .matcalc import (
    FloatArray,
    diag_positions,
    dweight,
    from_log_diag,
    half_length,
    halfvec,
    log_diag_sum,
    solve_lower,
    to_log_diag,
)
from .model import Dataset, GlobalPrior, log_joint_reparam, split_theta
from .reparam import TransformMethod, build_transforms


class Estimator(StrEnum):
    """Unbiased gradient estimators of the lower bound."""

    L1 = "l1"
    L2 = "l2"
    L3 = "l3"


def make_rng(seed: int, stream: int, *counters: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, counters)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, *counters])))


@dataclass(frozen=True, kw_only=True)
class FitConfig:
    """Settings for one variational fit."""

    method: TransformMethod = TransformMethod.APPROACH2
    seed: int = 0
    max_iter: int = DEFAULT_MAX_ITER
    window: int = DEFAULT_WINDOW
    tau: int = DEFAULT_TAU
    alpha: float = DEFAULT_ADAM_ALPHA
    beta1: float = DEFAULT_ADAM_BETA1
    beta2: float = DEFAULT_ADAM_BETA2
    eps: float = DEFAULT_ADAM_EPS
    estimator: Estimator = Estimator.L2
    n_samples: int = DEFAULT_SAMPLES
    elbo_draws: int = DEFAULT_ELBO_DRAWS
    max_retries: int = DEFAULT_MAX_RETRIES
    failure_threshold: int = DEFAULT_FAILURE_THRESHOLD

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.max_iter < 1 or self.window < 1 or self.n_samples < 1 or self.elbo_draws < 1:
            raise ConfigError("iteration, window, sample and draw counts must be positive")
        if self.tau < 2:
            raise ConfigError("tau must be at least 2")
        if self.alpha <= 0 or self.eps <= 0:
            raise ConfigError("Adam step size and epsilon must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam decay rates must lie in [0, 1)")
        if self.max_retries < 0 or self.failure_threshold < 1:
            raise ConfigError("retry limits must be non-negative")


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Mean μ (length d = nr + g) and block-diagonal lower-triangular factor C."""

    mu: FloatArray
    c_local: FloatArray
    c_global: FloatArray

    @classmethod
    def initial(cls, n: int, r: int, g: int, global_scale: float = DEFAULT_GLOBAL_INIT_SCALE) -> VariationalState:
        """μ = 0 and C = blockdiag(I_nr, global_scale·I_g)."""
        return cls(
            mu=np.zeros(n * r + g),
            c_local=np.broadcast_to(np.eye(r), (n, r, r)).copy(),
            c_global=global_scale * np.eye(g),
        )

    @property
    def n(self) -> int:
        return int(self.c_local.shape[0])

    @property
    def r(self) -> int:
        return int(self.c_local.shape[1])

    @property
    def g(self) -> int:
        return int(self.c_global.shape[0])

    @property
    def d(self) -> int:
        return int(self.mu.size)

    def split(self, x: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Split a length-d vector into (n, r) local blocks and the global block."""
        cut = self.n * self.r
        return x[:cut].reshape(self.n, self.r), x[cut:]

    def join(self, local: FloatArray, glob: FloatArray) -> FloatArray:
        return np.concatenate([local.reshape(-1), glob])

    def apply(self, s: FloatArray) -> FloatArray:
        """θ̃ = Cs + μ."""
        s_local, s_global = self.split(s)
        return self.mu + self.join(np.einsum("ikl,il->ik", self.c_local, s_local), self.c_global @ s_global)

    def solve(self, x: FloatArray) -> FloatArray:
        """C⁻¹x."""
        x_local, x_global = self.split(x)
        return self.join(solve_lower(self.c_local, x_local), solve_lower(self.c_global, x_global))

    def solve_transposed(self, x: FloatArray) -> FloatArray:
        """C⁻ᵀx."""
        x_local, x_global = self.split(x)
        return self.join(
            solve_lower(self.c_local, x_local, trans=True), solve_lower(self.c_global, x_global, trans=True)
        )

    @property
    def log_det(self) -> float:
        return float(np.sum(log_diag_sum(self.c_local)) + log_diag_sum(self.c_global))

    def packed(self) -> FloatArray:
        """(μ, v(C*) of each local block, v(C*) of the global block)."""
        return np.concatenate([self.mu, to_log_diag(self.c_local).reshape(-1), to_log_diag(self.c_global)])

    @classmethod
    def from_packed(cls, vector: FloatArray, n: int, r: int, g: int) -> VariationalState:
        d = n * r + g
        local_len = n * half_length(r)
        expected = d + local_len + half_length(g)
        if vector.size != expected:
            raise ValueError(f"packed state has length {vector.size}, expected {expected}")
        return cls(
            mu=vector[:d].copy(),
            c_local=from_log_diag(vector[d : d + local_len].reshape(n, half_length(r)), r),
            c_global=from_log_diag(vector[d + local_len :], g),
        )

    def local_means(self) -> FloatArray:
        return self.split(self.mu)[0]

    def local_covs(self) -> FloatArray:
        return np.asarray(self.c_local @ np.swapaxes(self.c_local, -1, -2))

    def global_mean(self) -> FloatArray:
        return self.split(self.mu)[1]

    def global_cov(self) -> FloatArray:
        return np.asarray(self.c_global @ self.c_global.T)


@dataclass
class AdamState:
    """Adam moment accumulators over the packed variational parameters."""

    m: FloatArray
    v: FloatArray
    t: int = 0
    alpha: float = DEFAULT_ADAM_ALPHA
    beta1: float = DEFAULT_ADAM_BETA1
    beta2: float = DEFAULT_ADAM_BETA2
    eps: float = DEFAULT_ADAM_EPS

    @classmethod
    def zeros(cls, size: int, config: FitConfig) -> AdamState:
        return cls(
            m=np.zeros(size),
            v=np.zeros(size),
            alpha=config.alpha,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
        )

    def ascent(self, grad: FloatArray) -> FloatArray:
        """Record a gradient and return the bias-corrected ascent step."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return np.asarray(self.alpha * m_hat / (np.sqrt(v_hat) + self.eps))


@dataclass
class TraceWindow:
    """Windowed means of the per-iteration lower-bound estimates."""

    size: int = DEFAULT_WINDOW
    tau: int = DEFAULT_TAU
    means: list[float] = field(default_factory=list)
    _total: float = 0.0
    _count: int = 0

    def add(self, value: float) -> bool:
        """Accumulate one estimate; True when it completes a window."""
        self._total += value
        self._count += 1
        if self._count < self.size:
            return False
        self.means.append(self._total / self._count)
        self._total, self._count = 0.0, 0
        return True


@dataclass(frozen=True, eq=False)
class StepResult:
    state: VariationalState
    elbo: float
    retries: int


@dataclass(frozen=True, eq=False)
class FitResult:
    """Final variational state and optimization record."""

    state: VariationalState
    trace: tuple[float, ...]
    iterations: int
    wall_time: float
    elbo: float
    elbo_sd: float
    converged: bool
    method: TransformMethod
    config: FitConfig
    retries: int = 0


def should_stop(trace: TraceWindow) -> bool:
    """True once the least-squares slope over the last τ window means is negative."""
    recent = trace.means[-trace.tau :]
    if len(recent) < 2:
        return False
    slope = np.polyfit(np.arange(len(recent), dtype=np.float64), np.asarray(recent), 1)[0]
    return bool(slope < 0.0)


def draw_sample(state: VariationalState, rng: np.random.Generator) -> tuple[FloatArray, FloatArray]:
    """Return (s, θ̃ = Cs + μ) with s ~ N(0, I_d)."""
    s = rng.standard_normal(state.d)
    return s, state.apply(s)


def log_q(state: VariationalState, theta: FloatArray) -> float:
    """log q(θ̃) without the −(d/2)·log 2π constant."""
    z = state.solve(np.asarray(theta, dtype=np.float64) - state.mu)
    return -state.log_det - 0.5 * float(z @ z)


def _inverse_transposed_half(state: VariationalState) -> tuple[FloatArray, FloatArray]:
    """v(C⁻ᵀ) per block: 1/Cⱼⱼ at diagonal positions, zero elsewhere."""
    local = np.zeros((state.n, half_length(state.r)))
    local[:, diag_positions(state.r)] = 1.0 / np.diagonal(state.c_local, axis1=1, axis2=2)
    glob = np.zeros(half_length(state.g))
    glob[diag_positions(state.g)] = 1.0 / np.diag(state.c_global)
    return local, glob


def estimator(
    state: VariationalState, s: FloatArray, grad: FloatArray, which: Estimator
) -> tuple[FloatArray, FloatArray]:
    """Return (ĝ_μ, ĝ_v(C)) with the C-part packed block by block."""
    s_local, s_global = state.split(s)
    score = state.solve_transposed(s)
    match which:
        case Estimator.L1:
            g_mu = grad
            direction = grad
        case Estimator.L2:
            g_mu = grad + score
            direction = g_mu
        case Estimator.L3:
            g_mu = grad - score
            direction = g_mu
    dir_local, dir_global = state.split(direction)
    g_local = halfvec(np.einsum("ik,il->ikl", dir_local, s_local))
    g_global = halfvec(np.outer(dir_global, s_global))
    if which is not Estimator.L2:
        inv_local, inv_global = _inverse_transposed_half(state)
        g_local = g_local + inv_local
        g_global = g_global + inv_global
    return np.asarray(g_mu), np.concatenate([g_local.reshape(-1), g_global])


def apply_gradient(
    state: VariationalState, adam: AdamState, g_mu: FloatArray, g_vc: FloatArray
) -> VariationalState:
    """Chain-rule the C-gradient to C*, take one Adam step and rebuild the state."""
    scale = np.concatenate([dweight(state.c_local).reshape(-1), dweight(state.c_global)])
    gradient = np.concatenate([g_mu, scale * g_vc])
    packed = state.packed() + adam.ascent(gradient)
    if not np.all(np.isfinite(packed)):
        raise DivergedError("variational parameters are no longer finite")
    return VariationalState.from_packed(packed, state.n, state.r, state.g)


def step(
    state: VariationalState,
    adam: AdamState,
    data: Dataset,
    prior: GlobalPrior,
    config: FitConfig,
    t: int,
) -> StepResult:
    """One iteration: sample, estimate gradients, update; returns the pre-update ELBO sample."""
    last_error: NumericalError | None = None
    for attempt in range(config.max_retries + 1):
        rng = make_rng(config.seed, STREAM_STEP, t, attempt)
        try:
            g_mu = np.zeros(state.d)
            g_vc = np.zeros(state.n * half_length(state.r) + half_length(state.g))
            elbo = 0.0
            for _ in range(config.n_samples):
                s, theta = draw_sample(state, rng)
                b_tilde, gp = split_theta(theta, state.n, state.r, data.p)
                value, grad = value_and_grad(data, gp, b_tilde, config.method, prior)
                if not (grad.finite and np.isfinite(value)):
                    raise NumericalError("non-finite log joint or gradient")
                mu_part, c_part = estimator(state, s, grad.vector(), config.estimator)
                g_mu += mu_part
                g_vc += c_part
                elbo += value - log_q(state, theta)
        except DivergedError:
            raise
        except NumericalError as err:
            last_error = err
            LOGGER.debug("Iteration %d attempt %d failed: %s", t, attempt + 1, error_text(err))
            continue
        k = float(config.n_samples)
        updated = apply_gradient(state, adam, g_mu / k, g_vc / k)
        return StepResult(state=updated, elbo=elbo / k, retries=attempt)
    raise DivergedError(
        f"iteration {t} failed {config.max_retries + 1} times: {error_text(last_error or NumericalError())}"
    )


def log_joint_tilde(
    data: Dataset, theta: FloatArray, method: TransformMethod, prior: GlobalPrior
) -> float:
    """ℓ(θ̃) for a full parameter vector."""
    b_tilde, gp = split_theta(theta, data.n, data.r, data.p)
    return log_joint_reparam(data, gp, b_tilde, build_transforms(data, gp, method), prior)


def estimate_elbo(
    state: VariationalState,
    data: Dataset,
    prior: GlobalPrior,
    method: TransformMethod,
    *,
    draws: int = DEFAULT_ELBO_DRAWS,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte Carlo lower bound at a fixed state: (mean, standard error)."""
    rng = make_rng(seed, STREAM_ELBO)
    samples: list[float] = []
    failures = 0
    while len(samples) < draws:
        _, theta = draw_sample(state, rng)
        try:
            samples.append(log_joint_tilde(data, theta, method, prior) - log_q(state, theta))
        except NumericalError as err:
            failures += 1
            LOGGER.debug("Lower-bound draw rejected: %s", error_text(err))
            if failures > draws:
                raise DivergedError("too many failed lower-bound draws") from err
    values = np.asarray(samples)
    stderr = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), stderr


def fit(
    data: Dataset,
    prior: GlobalPrior,
    config: FitConfig | None = None,
    *,
    initial: VariationalState | None = None,
) -> FitResult:
    """Run stochastic gradient ascent on the lower bound until the stopping rule fires."""
    config = config or FitConfig()
    start = perf_counter()
    state = initial or VariationalState.initial(data.n, data.r, data.g)
    if state.d != data.d:
        raise ConfigError(f"initial state has dimension {state.d}, dataset needs {data.d}")
    adam = AdamState.zeros(state.packed().size, config)
    trace = TraceWindow(size=config.window, tau=config.tau)
    LOGGER.info(
        "Fitting %s model (n=%d, p=%d, r=%d) with %s, seed %d",
        data.family.name,
        data.n,
        data.p,
        data.r,
        config.method.value,
        config.seed,
    )
    converged = False
    retries = 0
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        result = step(state, adam, data, prior, config, iteration)
        state = result.state
        if result.retries:
            retries += result.retries
            log = LOGGER.error if retries >= config.failure_threshold else LOGGER.warning
            log("Iteration %d needed %d fresh draws (total %d)", iteration, result.retries, retries)
        if trace.add(result.elbo):
            LOGGER.debug("Window %d: mean lower bound %.6f", len(trace.means), trace.means[-1])
            if should_stop(trace):
                converged = True
                break
    if not converged:
        LOGGER.warning("Stopped at the iteration limit (%d) before the lower bound levelled off", config.max_iter)
    elbo, elbo_sd = estimate_elbo(state, data, prior, config.method, draws=config.elbo_draws, seed=config.seed)
    wall_time = perf_counter() - start
    LOGGER.info("Fit finished after %d iterations in %.1f s, lower bound %.4f", iteration, wall_time, elbo)
    return FitResult(
        state=state,
        trace=tuple(trace.means),
        iterations=iteration,
        wall_time=wall_time,
        elbo=elbo,
        elbo_sd=elbo_sd,
        converged=converged,
        method=config.method,
        config=config,
        retries=retries,
    )
