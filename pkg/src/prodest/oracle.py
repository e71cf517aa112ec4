"""Exact moment computations for finite-support problems.

Everything here works on a finitely supported latent law and a matrix of
non-negative potential values, in plain linear-scale arithmetic, by
exhaustive enumeration.  These routines are deliberately independent of
the log-space Monte Carlo estimators so the two can be checked against
each other.

Second moments are reported on the relative scale, i.e.
``E[(estimate / target)**2]``, so a perfect estimator scores 1 and the
relative variance is the reported value minus 1.

The moment identities used:

* simple (block) estimator: ``prod_p (1 + c_p / block_size)`` where
  ``c_p`` is the relative variance of factor p under a single draw;
* ordered-selection (permanent) estimator: the average of the moment
  product over all injective factor-to-column assignments;
* recycled estimator: the average of the same moment product over
  independent assignments where factor p points uniformly at a column
  index in [p, n_particles).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .estimators import DimensionError, EnumerationLimitError

__all__ = [
    "DiscreteMeasure",
    "DiscretePotentialSet",
    "DiscreteLVM",
    "MomentReport",
    "ZeroMeanPotentialError",
    "mean_product",
    "moment_product",
    "factor_relative_variances",
    "second_moment_simple_exact",
    "second_moment_perm_exact",
    "second_moment_recycle_exact",
    "independent_second_moment",
    "identical_potential_bound",
    "estimator_distribution_exact",
    "recycle_conditional_moments",
    "moment_report",
    "observation_marginal",
    "induced_potentials",
    "expected_factor_relvar",
    "latent_expected_second_moment",
    "latent_expected_second_moment_simple",
]

DEFAULT_ORACLE_CAP = 10_000_000

_PROB_TOL = 1e-12


class ZeroMeanPotentialError(ValueError):
    """A potential has zero mean, so it cannot be normalized."""


@dataclass(frozen=True)
class DiscreteMeasure:
    """A finitely supported probability measure.

    ``support`` holds opaque labels (used only for display and for
    mapping sampled indices back to values); all arithmetic is indexed.
    """

    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        support = tuple(self.support)
        if probs.ndim != 1 or probs.size != len(support):
            raise DimensionError(
                f"support of size {len(support)} with probs shape {probs.shape}"
            )
        if probs.size == 0:
            raise DimensionError("measure needs at least one support point")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > _PROB_TOL:
            raise ValueError("probs must be non-negative and sum to 1")
        probs = probs.copy()
        probs.flags.writeable = False
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @property
    def n_points(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class DiscretePotentialSet:
    """Non-negative potential values tabulated on a common support.

    ``values[p, x]`` is factor p evaluated at support point x.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1:
            raise DimensionError(f"values must be (n_factors, n_points), got {values.shape}")
        if np.isnan(values).any() or np.isinf(values).any():
            raise ValueError("potential values must be finite")
        if (values < 0).any():
            raise ValueError("potential values must be non-negative")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_factors(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DiscreteLVM:
    """Finite latent-variable model: latent law plus an emission kernel.

    ``kernel[x, y]`` is the probability of observing y from latent state
    x; rows are distributions.  The observation marginal must be strictly
    positive so per-observation potentials can always be normalized.
    """

    latent_probs: np.ndarray
    kernel: np.ndarray

    def __post_init__(self):
        latent_probs = np.asarray(self.latent_probs, dtype=float)
        kernel = np.asarray(self.kernel, dtype=float)
        if latent_probs.ndim != 1 or kernel.ndim != 2 or kernel.shape[0] != latent_probs.size:
            raise DimensionError(
                f"latent_probs {latent_probs.shape} and kernel {kernel.shape} do not align"
            )
        if (latent_probs < 0).any() or abs(latent_probs.sum() - 1.0) > _PROB_TOL:
            raise ValueError("latent_probs must be non-negative and sum to 1")
        if (kernel < 0).any() or np.abs(kernel.sum(axis=1) - 1.0).max() > _PROB_TOL:
            raise ValueError("kernel rows must be distributions")
        if (latent_probs @ kernel <= 0).any():
            raise ValueError("observation marginal must be strictly positive")
        latent_probs = latent_probs.copy()
        kernel = kernel.copy()
        latent_probs.flags.writeable = False
        kernel.flags.writeable = False
        object.__setattr__(self, "latent_probs", latent_probs)
        object.__setattr__(self, "kernel", kernel)

    @property
    def n_latent(self) -> int:
        return self.latent_probs.size

    @property
    def n_observations(self) -> int:
        return self.kernel.shape[1]

    @property
    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(tuple(range(self.n_latent)), self.latent_probs)


@dataclass(frozen=True)
class MomentReport:
    """Exact target and relative second moments for one problem size."""

    n_factors: int
    n_particles: int
    block_size: int | None
    mean_product: float
    second_moment_simple: float | None
    second_moment_perm: float
    second_moment_recycle: float
    factor_relvars: tuple[float, ...]

    def __post_init__(self):
        seconds = [self.second_moment_perm, self.second_moment_recycle]
        if self.second_moment_simple is not None:
            seconds.append(self.second_moment_simple)
        if min(seconds) < 1.0 - 1e-9:
            raise ValueError(f"relative second moments must be >= 1, got {seconds}")
        if self.second_moment_perm > self.second_moment_recycle * (1 + 1e-9):
            raise ValueError("ordered-selection moment cannot exceed the recycled one")


def _check_pair(measure: DiscreteMeasure, potentials: DiscretePotentialSet):
    if potentials.values.shape[1] != measure.n_points:
        raise DimensionError(
            f"potentials tabulated on {potentials.values.shape[1]} points, "
            f"measure has {measure.n_points}"
        )
    return measure.probs, potentials.values


def _normalized(measure: DiscreteMeasure, potentials: DiscretePotentialSet) -> np.ndarray:
    probs, values = _check_pair(measure, potentials)
    means = values @ probs
    zero = np.flatnonzero(means <= 0)
    if zero.size:
        raise ZeroMeanPotentialError(
            f"factor {int(zero[0])} has zero mean under the measure"
        )
    return values / means[:, None]


def mean_product(measure: DiscreteMeasure, potentials: DiscretePotentialSet) -> float:
    """The target: the product over factors of the potential means."""
    probs, values = _check_pair(measure, potentials)
    return float(np.prod(values @ probs))


def factor_relative_variances(
    measure: DiscreteMeasure, potentials: DiscretePotentialSet
) -> np.ndarray:
    """Relative variance of each factor under a single particle.

    Entry p is ``E[Gbar_p**2] - 1`` for the mean-normalized potential
    Gbar_p, i.e. the relative variance of a one-particle estimate of that
    factor alone.
    """
    normalized = _normalized(measure, potentials)
    return (normalized**2) @ measure.probs - 1.0


def moment_product(
    measure: DiscreteMeasure,
    potentials: DiscretePotentialSet,
    assignment: Sequence[int],
    n_particles: int,
) -> float:
    """Product of mixed moments of normalized potentials for one assignment.

    ``assignment[j] = t`` points factor j at target index t in
    [0, n_particles).  Targets below n_factors are factor slots: slot p
    collects Gbar_p times every Gbar_j assigned to it.  Targets at or
    above n_factors are plain particle slots collecting only the assigned
    factors.  Each slot contributes the mean of its product (an empty
    slot contributes 1), and the result is the product over slots.

    Averaging this quantity over an assignment law gives the relative
    second moment of the matching estimator.
    """
    normalized = _normalized(measure, potentials)
    n_factors = potentials.n_factors
    n_particles = int(n_particles)
    if n_particles < n_factors:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
        )
    assignment = np.asarray(assignment, dtype=int)
    if assignment.shape != (n_factors,):
        raise DimensionError(
            f"assignment must have one target per factor, got shape {assignment.shape}"
        )
    if ((assignment < 0) | (assignment >= n_particles)).any():
        raise DimensionError(f"assignment targets must lie in [0, {n_particles})")
    return _moment_product_fast(measure.probs, normalized, assignment, n_particles)


def _moment_product_fast(
    probs: np.ndarray, normalized: np.ndarray, assignment: np.ndarray, n_particles: int
) -> float:
    n_factors = normalized.shape[0]
    total = 1.0
    for p in range(n_factors):
        slot = normalized[p]
        for j in np.flatnonzero(assignment == p):
            slot = slot * normalized[j]
        total *= float(slot @ probs)
    for t in range(n_factors, n_particles):
        hits = np.flatnonzero(assignment == t)
        if hits.size:
            slot = normalized[hits[0]]
            for j in hits[1:]:
                slot = slot * normalized[j]
            total *= float(slot @ probs)
    return total


def second_moment_simple_exact(
    measure: DiscreteMeasure, potentials: DiscretePotentialSet, block_size: int
) -> float:
    """Relative second moment of the block estimator: prod_p (1 + c_p / block_size)."""
    block_size = int(block_size)
    if block_size < 1:
        raise DimensionError(f"block_size must be >= 1, got {block_size}")
    relvars = factor_relative_variances(measure, potentials)
    return float(np.prod(1.0 + relvars / block_size))


def second_moment_perm_exact(
    measure: DiscreteMeasure,
    potentials: DiscretePotentialSet,
    n_particles: int,
    max_terms: int = DEFAULT_ORACLE_CAP,
) -> float:
    """Relative second moment of the ordered-selection estimator.

    Averages the moment product over all injective assignments of the
    n_factors factors to n_particles column indices.
    """
    normalized = _normalized(measure, potentials)
    n_factors = potentials.n_factors
    n_particles = int(n_particles)
    if n_particles < n_factors:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
        )
    n_terms = math.perm(n_particles, n_factors)
    if n_terms > max_terms:
        raise EnumerationLimitError(
            f"enumeration infeasible: {n_terms} injective assignments exceed "
            f"the cap of {max_terms}"
        )
    total = 0.0
    for assignment in itertools.permutations(range(n_particles), n_factors):
        total += _moment_product_fast(
            measure.probs, normalized, np.asarray(assignment), n_particles
        )
    return total / n_terms


def second_moment_recycle_exact(
    measure: DiscreteMeasure,
    potentials: DiscretePotentialSet,
    n_particles: int,
    max_terms: int = DEFAULT_ORACLE_CAP,
) -> float:
    """Relative second moment of the recycled estimator.

    Averages the moment product over independent assignments in which
    factor p points uniformly at a target index in [p, n_particles).
    """
    normalized = _normalized(measure, potentials)
    n_factors = potentials.n_factors
    n_particles = int(n_particles)
    if n_particles < n_factors:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
        )
    ranges = [range(p, n_particles) for p in range(n_factors)]
    n_terms = math.prod(len(r) for r in ranges)
    if n_terms > max_terms:
        raise EnumerationLimitError(
            f"enumeration infeasible: {n_terms} assignments exceed the cap of {max_terms}"
        )
    total = 0.0
    for assignment in itertools.product(*ranges):
        total += _moment_product_fast(
            measure.probs, normalized, np.asarray(assignment), n_particles
        )
    return total / n_terms


def independent_second_moment(factor_relvars: Sequence[float], n_particles: int) -> float:
    """Closed-form recycled second moment when the factors are independent.

    When factor p depends only on a coordinate of the latent value that no
    other factor touches, the relative second moment of the recycled
    estimator collapses to ``prod_p (1 + c_p / (n_particles - p))`` with
    factors indexed from zero.
    """
    relvars = np.asarray(factor_relvars, dtype=float)
    n_particles = int(n_particles)
    if relvars.ndim != 1 or relvars.size < 1:
        raise DimensionError("factor_relvars must be a non-empty vector")
    if n_particles < relvars.size:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {relvars.size}"
        )
    denominators = n_particles - np.arange(relvars.size)
    return float(np.prod(1.0 + relvars / denominators))


def identical_potential_bound(
    single_relvar: float, n_factors: int, n_particles: int
) -> float:
    """Lower bound on the ordered-selection second moment for identical factors.

    With all factors equal and single-draw relative variance c, the
    relative second moment is at least ``(1 + c) ** (n_factors**2 / n_particles)``.
    """
    if single_relvar < 0:
        raise ValueError(f"relative variance cannot be negative, got {single_relvar}")
    n_factors, n_particles = int(n_factors), int(n_particles)
    if not 1 <= n_factors <= n_particles:
        raise DimensionError(
            f"need 1 <= n_factors <= n_particles, got {n_factors}, {n_particles}"
        )
    return float((1.0 + single_relvar) ** (n_factors**2 / n_particles))


def _recycle_moments_given_values(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and second moment of the recycled estimator.

    ``values`` is (n_factors, n_batch, n_particles) of linear-scale
    potentials; the return is a pair of (n_batch,) arrays giving, for
    each batch member, the exact expectation and second moment of the
    recycled estimate over its internal selection randomness.  Walks the
    selection tree depth first, sharing prefix sums across children, with
    the uniform fallback branch applied whenever the remaining potentials
    of the current factor all vanish.
    """
    n_factors, n_batch, n_particles = values.shape
    mean = np.zeros(n_batch)
    second = np.zeros(n_batch)

    def descend(depth: int, avail: list[int], prob: np.ndarray, estimate: np.ndarray):
        if depth == n_factors:
            contrib = prob * estimate
            mean[:] += contrib
            second[:] += contrib * estimate
            return
        row = values[depth]
        remaining = row[:, avail]
        mass = remaining.sum(axis=1)
        positive = mass > 0
        next_estimate = estimate * mass / (n_particles - depth)
        if not next_estimate.any():
            # Every descendant's estimate is zero, so nothing accrues below.
            return
        uniform = 1.0 / (n_particles - depth)
        for slot in range(len(avail)):
            weight = np.where(positive, remaining[:, slot] / np.where(positive, mass, 1.0), uniform)
            next_prob = prob * weight
            if not next_prob.any():
                continue
            descend(depth + 1, avail[:slot] + avail[slot + 1 :], next_prob, next_estimate)

    descend(0, list(range(n_particles)), np.ones(n_batch), np.ones(n_batch))
    return mean, second


def recycle_conditional_moments(values: np.ndarray) -> tuple[float, float]:
    """Exact mean and second moment of the recycled estimator for one fixed matrix.

    ``values`` is an (n_factors, n_particles) matrix of linear-scale
    potentials; the expectation runs only over the estimator's internal
    column selections.  The conditional mean always equals the
    ordered-selection average for the same matrix.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {values.shape}")
    if (values < 0).any() or np.isnan(values).any() or np.isinf(values).any():
        raise ValueError("potential values must be finite and non-negative")
    n_factors, n_particles = values.shape
    if n_particles < n_factors:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
        )
    mean, second = _recycle_moments_given_values(values[:, None, :])
    return float(mean[0]), float(second[0])


def _perm_average_given_values(values: np.ndarray) -> np.ndarray:
    """Ordered-selection average per batch member; values is (n_factors, n_batch, n_particles)."""
    n_factors, n_batch, n_particles = values.shape
    total = np.zeros(n_batch)

    def descend(depth: int, avail: list[int], product: np.ndarray):
        if depth == n_factors:
            total[:] += product
            return
        row = values[depth]
        for slot, column in enumerate(avail):
            next_product = product * row[:, column]
            if not next_product.any():
                continue
            descend(depth + 1, avail[:slot] + avail[slot + 1 :], next_product)

    descend(0, list(range(n_particles)), np.ones(n_batch))
    return total / math.perm(n_particles, n_factors)


def estimator_distribution_exact(
    measure: DiscreteMeasure,
    potentials: DiscretePotentialSet,
    n_particles: int,
    kind: str,
    block_size: int | None = None,
    max_terms: int = DEFAULT_ORACLE_CAP,
) -> tuple[float, float]:
    """Exact raw mean and second moment of an estimator on a finite problem.

    Enumerates every assignment of support points to the n_particles
    slots, weights each by its probability, and evaluates the requested
    estimator's conditional law in closed form.  ``kind`` is one of
    ``simple``, ``biased``, ``perm`` or ``recycle``; ``simple`` requires
    ``block_size``.  This brute-force route shares nothing with the
    moment-product identities, so agreement between the two is a real
    cross-check.
    """
    probs, values = _check_pair(measure, potentials)
    n_factors = potentials.n_factors
    n_particles = int(n_particles)
    if n_particles < n_factors:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
        )
    n_points = measure.n_points
    n_assignments = n_points**n_particles
    if kind in ("perm", "recycle"):
        n_terms = n_assignments * math.perm(n_particles, n_factors)
    else:
        n_terms = n_assignments
    if n_terms > max_terms:
        raise EnumerationLimitError(
            f"enumeration infeasible: {n_terms} terms exceed the cap of {max_terms}"
        )
    assignments = np.array(
        list(itertools.product(range(n_points), repeat=n_particles)), dtype=np.intp
    )
    weights = probs[assignments].prod(axis=1)
    tabulated = values[:, assignments]  # (n_factors, n_assignments, n_particles)

    if kind == "simple":
        if block_size is None:
            raise DimensionError("the simple estimator needs a block_size")
        block_size = int(block_size)
        if n_particles != n_factors * block_size:
            raise DimensionError(
                f"simple estimator needs n_particles == n_factors * block_size, "
                f"got {n_particles} != {n_factors} * {block_size}"
            )
        blocks = [
            tabulated[p, :, p * block_size : (p + 1) * block_size].mean(axis=1)
            for p in range(n_factors)
        ]
        conditional = np.prod(blocks, axis=0)
        return float(weights @ conditional), float(weights @ conditional**2)
    if kind == "biased":
        conditional = np.prod(tabulated.mean(axis=2), axis=0)
        return float(weights @ conditional), float(weights @ conditional**2)
    if kind == "perm":
        conditional = _perm_average_given_values(tabulated)
        return float(weights @ conditional), float(weights @ conditional**2)
    if kind == "recycle":
        cond_mean, cond_second = _recycle_moments_given_values(tabulated)
        return float(weights @ cond_mean), float(weights @ cond_second)
    raise ValueError(f"unknown estimator kind {kind!r}")


def moment_report(
    measure: DiscreteMeasure,
    potentials: DiscretePotentialSet,
    n_particles: int,
    block_size: int | None = None,
    max_terms: int = DEFAULT_ORACLE_CAP,
) -> MomentReport:
    """Bundle the exact target and relative second moments for one problem size."""
    simple = None
    if block_size is not None:
        if potentials.n_factors * int(block_size) != int(n_particles):
            raise DimensionError(
                "block_size must satisfy n_particles == n_factors * block_size"
            )
        simple = second_moment_simple_exact(measure, potentials, block_size)
    return MomentReport(
        n_factors=potentials.n_factors,
        n_particles=int(n_particles),
        block_size=None if block_size is None else int(block_size),
        mean_product=mean_product(measure, potentials),
        second_moment_simple=simple,
        second_moment_perm=second_moment_perm_exact(
            measure, potentials, n_particles, max_terms
        ),
        second_moment_recycle=second_moment_recycle_exact(
            measure, potentials, n_particles, max_terms
        ),
        factor_relvars=tuple(
            float(c) for c in factor_relative_variances(measure, potentials)
        ),
    )


def observation_marginal(lvm: DiscreteLVM) -> np.ndarray:
    """Marginal law of a single observation under the model."""
    return lvm.latent_probs @ lvm.kernel


def induced_potentials(lvm: DiscreteLVM, observations: Sequence[int]) -> DiscretePotentialSet:
    """Potentials induced by conditioning on a vector of observations.

    Factor p is the emission likelihood ``kernel[., observations[p]]`` as
    a function of the latent state; its mean under the latent law is the
    observation marginal at that point.
    """
    obs = np.asarray(observations, dtype=int)
    if obs.ndim != 1 or obs.size < 1:
        raise DimensionError("observations must be a non-empty index vector")
    if ((obs < 0) | (obs >= lvm.n_observations)).any():
        raise DimensionError(
            f"observation indices must lie in [0, {lvm.n_observations})"
        )
    return DiscretePotentialSet(lvm.kernel[:, obs].T)


def expected_factor_relvar(lvm: DiscreteLVM) -> float:
    """Average over observations of the induced factor's relative variance.

    This is the constant governing the observation-averaged second-moment
    identity: with observations drawn from the marginal, the expected
    relative second moment of the recycled estimator equals
    ``prod_p (1 + C / (n_particles - p))`` for this C.
    """
    marginal = observation_marginal(lvm)
    second = (lvm.latent_probs[:, None] * lvm.kernel**2 / marginal[None, :]).sum()
    return float(second - 1.0)


def latent_expected_second_moment(
    lvm: DiscreteLVM,
    n_obs: int,
    n_particles: int,
    max_terms: int = DEFAULT_ORACLE_CAP,
) -> tuple[float, float, float]:
    """Observation-averaged recycled second moment, both routes.

    Returns ``(enumerated, closed_form, expected_relvar)``: the exhaustive
    average over observation vectors of the exact recycled second moment,
    the closed form ``prod_p (1 + C / (n_particles - p))``, and C itself.
    The first two agree exactly; computing both keeps the identity an
    actual check rather than a definition.
    """
    n_obs, n_particles = int(n_obs), int(n_particles)
    if n_obs < 1:
        raise DimensionError("need at least one observation")
    if n_particles < n_obs:
        raise DimensionError(
            f"need n_particles >= n_obs, got {n_particles} < {n_obs}"
        )
    n_vectors = lvm.n_observations**n_obs
    lattice = math.prod(range(n_particles - n_obs + 1, n_particles + 1))
    if n_vectors * lattice > max_terms:
        raise EnumerationLimitError(
            f"enumeration infeasible: {n_vectors} observation vectors times "
            f"{lattice} assignments exceed the cap of {max_terms}"
        )
    marginal = observation_marginal(lvm)
    measure = lvm.measure
    enumerated = 0.0
    for obs in itertools.product(range(lvm.n_observations), repeat=n_obs):
        weight = float(np.prod(marginal[list(obs)]))
        potentials = induced_potentials(lvm, obs)
        enumerated += weight * second_moment_recycle_exact(
            measure, potentials, n_particles, max_terms
        )
    constant = expected_factor_relvar(lvm)
    denominators = n_particles - np.arange(n_obs)
    closed_form = float(np.prod(1.0 + constant / denominators))
    return enumerated, closed_form, constant


def latent_expected_second_moment_simple(
    lvm: DiscreteLVM, n_obs: int, block_size: int
) -> float:
    """Observation-averaged second moment of the block estimator, closed form.

    Equals ``(1 + C / block_size) ** n_obs`` because the induced factors
    are exchangeable across observations and the block estimator's second
    moment is a product of per-factor terms.
    """
    n_obs, block_size = int(n_obs), int(block_size)
    if n_obs < 1 or block_size < 1:
        raise DimensionError("n_obs and block_size must be >= 1")
    return float((1.0 + expected_factor_relvar(lvm) / block_size) ** n_obs)
