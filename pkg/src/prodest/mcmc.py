"""Pseudo-marginal random-walk Metropolis and its tuning helpers.

The chain targets a posterior while only ever touching an unbiased,
non-negative likelihood estimate: the estimate made at the accepted
parameter value is stored on the chain state and never recomputed, which
is what keeps the invariant law exactly the posterior.  Estimators plug
in as ``log_like_fn(theta, rng) -> float`` with ``-inf`` encoding an
estimate of exactly zero; a deterministic function recovers ordinary
random-walk Metropolis.

Tuning follows standard practice: a pilot chain feeds an empirical
covariance scaled by 2.38 / sqrt(dim) (the squared variant is available
as an option), and the particle count is doubled from one particle per
observation until the estimator's relative variance at a reference
parameter drops to a target of about 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .estimators import DimensionError
from .models import PriorSpec, log_likelihood_estimator
from .rng import make_stream

__all__ = [
    "ChainState",
    "ProposalSpec",
    "ChainConfig",
    "ChainOutput",
    "EstimatorFailure",
    "InitializationError",
    "ParticleCountError",
    "acceptance_probability",
    "pseudo_marginal_step",
    "run_chain",
    "initial_proposal",
    "tune_proposal",
    "replicate_log_estimates",
    "relative_variance_of_logs",
    "relative_variance",
    "tune_particle_count",
    "ess_batch_means",
]


class EstimatorFailure(RuntimeError):
    """A likelihood estimate came back NaN; the chain cannot continue."""


class InitializationError(RuntimeError):
    """No usable starting state was found within the retry budget."""


class ParticleCountError(RuntimeError):
    """Doubling the particle count hit the ceiling before reaching the target."""


@dataclass(frozen=True)
class ChainState:
    """Current parameter with its stored log prior and log likelihood estimate."""

    theta: np.ndarray
    log_like: float
    log_prior: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 1:
            raise DimensionError(f"theta must be a vector, got shape {theta.shape}")
        theta = theta.copy()
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        for name in ("log_like", "log_prior"):
            value = float(getattr(self, name))
            if math.isnan(value) or value == math.inf:
                raise ValueError(f"{name} must be in [-inf, inf), got {value!r}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class ProposalSpec:
    """Gaussian random-walk increment law, stored with its Cholesky factor.

    ``jitter`` records the diagonal inflation applied when the requested
    covariance was not positive definite; it is 0.0 when no fallback was
    needed.
    """

    covariance: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        covariance = np.asarray(self.covariance, dtype=float)
        chol = np.asarray(self.chol, dtype=float)
        if covariance.shape != chol.shape or covariance.ndim != 2:
            raise DimensionError("covariance and chol must be matching square matrices")
        covariance = covariance.copy()
        chol = chol.copy()
        covariance.flags.writeable = False
        chol.flags.writeable = False
        object.__setattr__(self, "covariance", covariance)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @classmethod
    def from_covariance(cls, covariance, jitter_scale: float = 1e-8) -> "ProposalSpec":
        """Factor a covariance, adding recorded diagonal jitter if needed.

        The matrix must be symmetric to 1e-12; it is symmetrized before
        factoring.  When the Cholesky factorization fails, a jitter of
        ``jitter_scale * trace / dim`` (or ``jitter_scale`` itself for a
        zero matrix) is added to the diagonal and recorded.
        """
        covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        if covariance.shape[0] != covariance.shape[1]:
            raise DimensionError(f"covariance must be square, got {covariance.shape}")
        if np.abs(covariance - covariance.T).max() > 1e-12:
            raise ValueError("covariance is not symmetric within 1e-12")
        covariance = (covariance + covariance.T) / 2.0
        dim = covariance.shape[0]
        try:
            return cls(covariance, np.linalg.cholesky(covariance), 0.0)
        except np.linalg.LinAlgError:
            trace = float(np.trace(covariance))
            jitter = jitter_scale * (trace / dim if trace > 0 else 1.0)
            inflated = covariance + jitter * np.eye(dim)
            return cls(inflated, np.linalg.cholesky(inflated), jitter)


@dataclass
class ChainConfig:
    """Everything needed to run one pseudo-marginal chain.

    ``estimator`` is an estimator kind name (resolved through the model
    bridge with ``n_particles`` fresh latents per evaluation) or a
    callable ``(theta, rng) -> float`` returning a log likelihood
    estimate directly.
    """

    model: object
    data: np.ndarray
    prior: PriorSpec
    proposal: ProposalSpec
    length: int
    seed: int
    estimator: str | Callable = "recycle"
    n_particles: int | None = None
    burn_in: float = 0.5
    theta_init: np.ndarray | None = None
    max_init_tries: int = 100
    stream_id: int = 0

    def __post_init__(self):
        self.length = int(self.length)
        if self.length < 1:
            raise ValueError(f"chain length must be >= 1, got {self.length}")
        if not 0.0 <= float(self.burn_in) < 1.0:
            raise ValueError(f"burn_in fraction must lie in [0, 1), got {self.burn_in}")
        if self.proposal.dim != self.prior.dim:
            raise DimensionError(
                f"proposal dimension {self.proposal.dim} != prior dimension {self.prior.dim}"
            )
        if isinstance(self.estimator, str) and self.n_particles is None:
            raise ValueError("an estimator kind needs n_particles")


@dataclass(frozen=True)
class ChainOutput:
    """Recorded trajectory of one chain.

    ``samples`` holds the state after each step (the initial state is not
    recorded), ``ess`` is the per-coordinate batch-means effective sample
    size over the full recorded trace, and ``final_state`` allows a
    follow-up chain to continue where this one stopped.
    """

    samples: np.ndarray
    log_like_trace: np.ndarray
    accepted: np.ndarray
    acceptance_rate: float
    ess: np.ndarray
    final_state: ChainState


def acceptance_probability(log_ratio: float) -> float:
    """min(1, exp(log_ratio)), safe against overflow."""
    if math.isnan(log_ratio):
        raise ValueError("acceptance ratio is NaN")
    return 1.0 if log_ratio >= 0 else math.exp(log_ratio)


def pseudo_marginal_step(
    state: ChainState,
    proposal: ProposalSpec,
    log_prior_fn: Callable,
    log_like_fn: Callable,
    rng: np.random.Generator,
) -> tuple[ChainState, bool]:
    """One random-walk step against the estimated posterior.

    A candidate outside the prior support is rejected before any
    likelihood estimate is spent.  On rejection the stored estimate of
    the current state is kept as is.
    """
    increment = proposal.chol @ rng.standard_normal(proposal.dim)
    candidate = state.theta + increment
    candidate_log_prior = log_prior_fn(candidate)
    if candidate_log_prior == -math.inf:
        return state, False
    candidate_log_like = float(log_like_fn(candidate, rng))
    if math.isnan(candidate_log_like):
        raise EstimatorFailure(f"likelihood estimate is NaN at theta={candidate!r}")
    log_ratio = (candidate_log_like + candidate_log_prior) - (
        state.log_like + state.log_prior
    )
    if rng.random() < acceptance_probability(log_ratio):
        return ChainState(candidate, candidate_log_like, candidate_log_prior), True
    return state, False


def _resolve_estimator(config: ChainConfig) -> Callable:
    if callable(config.estimator):
        return config.estimator
    return log_likelihood_estimator(
        config.model, config.data, config.estimator, config.n_particles
    )


def _initial_state(
    config: ChainConfig, log_like_fn: Callable, rng: np.random.Generator
) -> ChainState:
    supplied = config.theta_init is not None
    if supplied:
        theta = np.asarray(config.theta_init, dtype=float)
        log_prior_value = config.prior.log_density(theta)
        if log_prior_value == -math.inf:
            raise InitializationError(
                f"the supplied initial theta {theta!r} has zero prior density"
            )
    for _ in range(int(config.max_init_tries)):
        if not supplied:
            theta = config.prior.sample(rng)
            log_prior_value = config.prior.log_density(theta)
        log_like_value = float(log_like_fn(theta, rng))
        if math.isnan(log_like_value):
            raise EstimatorFailure(f"likelihood estimate is NaN at theta={theta!r}")
        if log_like_value > -math.inf:
            return ChainState(theta, log_like_value, log_prior_value)
    raise InitializationError(
        f"likelihood estimate was zero for {config.max_init_tries} initialization attempts"
    )


def run_chain(config: ChainConfig) -> ChainOutput:
    """Run one pseudo-marginal chain as configured.

    The generator is derived from (seed, stream_id), so a config reruns
    to an identical trajectory.  States are recorded after every step;
    burn-in is left to downstream consumers.
    """
    rng = make_stream(config.seed, config.stream_id)
    log_like_fn = _resolve_estimator(config)
    log_prior_fn = config.prior.log_density
    state = _initial_state(config, log_like_fn, rng)
    length, dim = config.length, config.prior.dim
    samples = np.empty((length, dim))
    log_like_trace = np.empty(length)
    accepted = np.zeros(length, dtype=bool)
    for t in range(length):
        state, was_accepted = pseudo_marginal_step(
            state, config.proposal, log_prior_fn, log_like_fn, rng
        )
        samples[t] = state.theta
        log_like_trace[t] = state.log_like
        accepted[t] = was_accepted
    if length >= 4:
        ess = np.array([ess_batch_means(samples[:, j]) for j in range(dim)])
    else:
        ess = np.full(dim, float(length))
    return ChainOutput(
        samples=samples,
        log_like_trace=log_like_trace,
        accepted=accepted,
        acceptance_rate=float(accepted.mean()),
        ess=ess,
        final_state=state,
    )


def initial_proposal(theta, rel_step: float = 0.05) -> ProposalSpec:
    """Diagonal pilot proposal scaled to the magnitude of each coordinate."""
    theta = np.asarray(theta, dtype=float)
    scales = rel_step * (1.0 + np.abs(theta))
    return ProposalSpec.from_covariance(np.diag(scales**2))


def tune_proposal(
    pilot,
    burn_in: float = 0.5,
    literal_scaling: bool = True,
    jitter_scale: float = 1e-8,
) -> ProposalSpec:
    """Empirical-covariance proposal from pilot samples.

    ``pilot`` is a ChainOutput or a plain (length, dim) sample array; the
    first ``burn_in`` fraction is dropped.  The covariance is scaled by
    2.38 / sqrt(dim), or by the more common 2.38**2 / dim when
    ``literal_scaling`` is off.  Degenerate pilots fall through to the
    recorded jitter path rather than failing.
    """
    samples = np.atleast_2d(np.asarray(getattr(pilot, "samples", pilot), dtype=float))
    if not 0.0 <= float(burn_in) < 1.0:
        raise ValueError(f"burn_in fraction must lie in [0, 1), got {burn_in}")
    kept = samples[int(len(samples) * burn_in):]
    length, dim = kept.shape
    if length < dim + 1:
        raise ValueError(
            f"need at least dim + 1 = {dim + 1} post-burn-in pilot samples, got {length}"
        )
    sample_cov = np.atleast_2d(np.cov(kept, rowvar=False))
    factor = 2.38 / math.sqrt(dim) if literal_scaling else 2.38**2 / dim
    return ProposalSpec.from_covariance(factor * sample_cov, jitter_scale)


def replicate_log_estimates(
    estimate_fn: Callable, n_replicates: int, rng: np.random.Generator
) -> np.ndarray:
    """Sequential independent replicates of ``estimate_fn(rng)``."""
    n_replicates = int(n_replicates)
    if n_replicates < 1:
        raise ValueError(f"need at least one replicate, got {n_replicates}")
    return np.array([float(estimate_fn(rng)) for _ in range(n_replicates)])


def relative_variance_of_logs(log_estimates) -> float:
    """Empirical relative variance from log-scale replicates.

    Max-shifts before exponentiating, so only ratios of the replicates
    matter.  All-zero replicates give +inf.
    """
    log_estimates = np.asarray(log_estimates, dtype=float)
    if log_estimates.size < 2:
        raise ValueError("need at least two replicates")
    if np.isnan(log_estimates).any():
        raise ValueError("log estimates contain NaN")
    shift = log_estimates.max()
    if shift == -math.inf:
        return math.inf
    scaled = np.exp(log_estimates - shift)
    first = scaled.mean()
    second = (scaled**2).mean()
    return float(second / first**2 - 1.0)


def relative_variance(
    estimate_fn: Callable, n_replicates: int, rng: np.random.Generator
) -> float:
    """Relative variance of a log-scale estimator over fresh replicates."""
    return relative_variance_of_logs(
        replicate_log_estimates(estimate_fn, n_replicates, rng)
    )


def tune_particle_count(
    model,
    data,
    theta,
    kind: str,
    target: float,
    n_replicates: int,
    rng: np.random.Generator,
    max_particles: int = 10_000_000,
    probes: list | None = None,
) -> int:
    """Double the particle count until the relative variance reaches the target.

    Starts at one particle per observation and doubles, so the simple
    estimator always sees a multiple of the observation count.  Each
    probe measures the relative variance at the reference ``theta`` from
    ``n_replicates`` fresh replicates; (count, measurement) pairs are
    appended to ``probes`` when a list is supplied.  Raises
    ``ParticleCountError`` when the next doubling would pass
    ``max_particles``.
    """
    if not target > 0:
        raise ValueError(f"target relative variance must be positive, got {target}")
    n_particles = max(int(np.asarray(data).size), 1)
    while True:
        estimate_fn = log_likelihood_estimator(model, data, kind, n_particles)
        measured = relative_variance(
            lambda r: estimate_fn(theta, r), n_replicates, rng
        )
        if probes is not None:
            probes.append((n_particles, measured))
        if measured <= target:
            return n_particles
        if 2 * n_particles > max_particles:
            raise ParticleCountError(
                f"relative variance {measured:.3g} at {n_particles} particles still "
                f"exceeds {target} and doubling would pass the ceiling {max_particles}"
            )
        n_particles *= 2


def ess_batch_means(series) -> float:
    """Effective sample size by non-overlapping batch means.

    Uses batch length floor(sqrt(T)) over the trailing whole batches.
    The estimate is clamped to (0, T]; a constant series returns T by
    convention.  Needs at least 4 points.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 1 or series.size < 4:
        raise DimensionError("need a 1-d series with at least 4 points")
    length = series.size
    overall_var = series.var(ddof=1)
    if overall_var == 0.0:
        return float(length)
    batch_len = int(math.sqrt(length))
    n_batches = length // batch_len
    trailing = series[length - n_batches * batch_len:]
    batch_means = trailing.reshape(n_batches, batch_len).mean(axis=1)
    long_run_var = batch_len * batch_means.var(ddof=1)
    if long_run_var <= 0.0:
        return float(length)
    return float(min(length, length * overall_var / long_run_var))
