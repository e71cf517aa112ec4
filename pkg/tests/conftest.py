"""Shared generators and statistical helpers for the test suite."""

import math

import numpy as np
import pytest

from prodest.mcmc import (
    ChainConfig,
    ProposalSpec,
    run_chain,
)
from prodest.models import PriorSpec, TwoStateLatentModel, UniformPrior
from prodest.oracle import DiscreteLVM, DiscreteMeasure, DiscretePotentialSet
from prodest.rng import make_stream


def random_moment_fixture(rng, max_points=4, max_factors=3, max_particles=6,
                          require_block=False):
    """A random finite problem: (measure, potentials, n_particles).

    Sprinkles exact zeros into both the probabilities and the potential
    values while keeping every factor's mean positive.  With
    ``require_block`` the particle count is a multiple of the factor
    count, so the simple estimator is defined too.
    """
    n_points = int(rng.integers(2, max_points + 1))
    n_factors = int(rng.integers(1, max_factors + 1))
    if require_block:
        block = int(rng.integers(1, max_particles // n_factors + 1))
        n_particles = n_factors * block
    else:
        n_particles = int(rng.integers(n_factors, max_particles + 1))
    raw = rng.random(n_points) + 0.05
    if n_points > 2 and rng.random() < 0.25:
        raw[rng.integers(n_points)] = 0.0
    probs = raw / raw.sum()
    values = rng.random((n_factors, n_points)) * 2.0
    values[rng.random((n_factors, n_points)) < 0.3] = 0.0
    anchor = int(np.argmax(probs))
    for p in range(n_factors):
        if values[p] @ probs <= 0:
            values[p, anchor] = rng.random() + 0.1
    measure = DiscreteMeasure(tuple(range(n_points)), probs)
    return measure, DiscretePotentialSet(values), n_particles


def random_disjoint_fixture(rng, max_factors=3, max_particles=6):
    """Factors supported on pairwise disjoint support blocks."""
    n_factors = int(rng.integers(1, max_factors + 1))
    points_per_factor = int(rng.integers(1, 3))
    n_points = n_factors * points_per_factor
    raw = rng.random(n_points) + 0.1
    probs = raw / raw.sum()
    values = np.zeros((n_factors, n_points))
    for p in range(n_factors):
        block = slice(p * points_per_factor, (p + 1) * points_per_factor)
        values[p, block] = rng.random(points_per_factor) + 0.05
    n_particles = int(rng.integers(n_factors, max_particles + 1))
    measure = DiscreteMeasure(tuple(range(n_points)), probs)
    return measure, DiscretePotentialSet(values), n_particles


def random_identical_fixture(rng, max_points=4, max_factors=3, max_particles=6,
                             require_block=False, bounded_third_moment=False):
    """All factors share one potential row.

    With ``bounded_third_moment`` the row is resampled until the
    normalized potential satisfies E[Gbar**3] <= E[Gbar**2]**2 (binary
    rows always do), which is the regime where the recycled estimator is
    guaranteed not to lose to the simple one.
    """
    n_points = int(rng.integers(2, max_points + 1))
    n_factors = int(rng.integers(2, max_factors + 1))
    if require_block:
        block = int(rng.integers(1, max_particles // n_factors + 1))
        n_particles = n_factors * block
    else:
        n_particles = int(rng.integers(n_factors, max_particles + 1))
    raw = rng.random(n_points) + 0.05
    probs = raw / raw.sum()
    while True:
        if bounded_third_moment and rng.random() < 0.5:
            row = (rng.random(n_points) < 0.6).astype(float) * (rng.random() + 0.2)
            if row @ probs <= 0:
                continue
        else:
            row = rng.random(n_points) * 2.0
            row[rng.random(n_points) < 0.3] = 0.0
            if row @ probs <= 0:
                continue
        normalized = row / (row @ probs)
        if not bounded_third_moment:
            break
        if (normalized**3) @ probs <= ((normalized**2) @ probs) ** 2 + 1e-12:
            break
    values = np.tile(row, (n_factors, 1))
    measure = DiscreteMeasure(tuple(range(n_points)), probs)
    return measure, DiscretePotentialSet(values), n_particles


def random_indicator_fixture(rng, max_points=4, max_factors=3, max_particles=6):
    """0/1 potentials with positive means; particle count a block multiple."""
    n_points = int(rng.integers(2, max_points + 1))
    n_factors = int(rng.integers(1, max_factors + 1))
    block = int(rng.integers(1, max_particles // n_factors + 1))
    raw = rng.random(n_points) + 0.05
    probs = raw / raw.sum()
    values = (rng.random((n_factors, n_points)) < 0.5).astype(float)
    for p in range(n_factors):
        if values[p] @ probs <= 0:
            values[p, int(np.argmax(probs))] = 1.0
    measure = DiscreteMeasure(tuple(range(n_points)), probs)
    return measure, DiscretePotentialSet(values), n_factors * block


def random_product_fixture(rng, max_factors=3):
    """Product measure with one potential per coordinate.

    Factor p depends only on coordinate p of the latent tuple, so the
    factors are independent and the recycled second moment has a closed
    form.
    """
    n_factors = int(rng.integers(1, max_factors + 1))
    marg_sizes = [int(rng.integers(2, 4)) for _ in range(n_factors)]
    marginals, coordinate_values = [], []
    for size in marg_sizes:
        raw = rng.random(size) + 0.1
        marginals.append(raw / raw.sum())
        vals = rng.random(size) * 2.0
        vals[rng.random(size) < 0.25] = 0.0
        if vals @ marginals[-1] <= 0:
            vals[int(np.argmax(marginals[-1]))] = rng.random() + 0.1
        coordinate_values.append(vals)
    support = [()]
    probs = np.array([1.0])
    for marginal in marginals:
        support = [point + (i,) for point in support for i in range(marginal.size)]
        probs = np.kron(probs, marginal)
    values = np.zeros((n_factors, len(support)))
    for p in range(n_factors):
        for j, point in enumerate(support):
            values[p, j] = coordinate_values[p][point[p]]
    n_particles = int(rng.integers(n_factors, 7))
    measure = DiscreteMeasure(tuple(support), probs)
    return measure, DiscretePotentialSet(values), n_particles


def random_lvm(rng, max_latent=3, max_symbols=3):
    """A random finite latent model with strictly positive observation marginal."""
    n_latent = int(rng.integers(2, max_latent + 1))
    n_symbols = int(rng.integers(2, max_symbols + 1))
    raw = rng.random(n_latent) + 0.1
    latent_probs = raw / raw.sum()
    while True:
        kernel = rng.random((n_latent, n_symbols)) + 0.01
        kernel[rng.random((n_latent, n_symbols)) < 0.2] = 0.0
        row_sums = kernel.sum(axis=1)
        if (row_sums > 0).all():
            kernel /= row_sums[:, None]
            if (latent_probs @ kernel > 0).all():
                return DiscreteLVM(latent_probs, kernel)


def relvar_and_se(log_estimates):
    """Empirical relative variance and its delta-method standard error."""
    log_estimates = np.asarray(log_estimates, dtype=float)
    shift = log_estimates.max()
    assert shift > -math.inf, "all replicates are zero"
    scaled = np.exp(log_estimates - shift)
    first = scaled.mean()
    second = (scaled**2).mean()
    relvar = second / first**2 - 1.0
    gradient = np.array([-2.0 * second / first**3, 1.0 / first**2])
    moments = np.stack([scaled, scaled**2])
    covariance = np.cov(moments) / log_estimates.size
    return float(relvar), float(math.sqrt(gradient @ covariance @ gradient))


def batch_mean_se(series):
    """Standard error of the mean of a correlated series via batch means."""
    series = np.asarray(series, dtype=float)
    length = series.size
    batch_len = int(math.sqrt(length))
    n_batches = length // batch_len
    trailing = series[length - n_batches * batch_len:]
    batch_means = trailing.reshape(n_batches, batch_len).mean(axis=1)
    return float(math.sqrt(batch_means.var(ddof=1) / n_batches))


def run_grid_toy(seed, length, n_cells=5):
    """Random-walk chain over a piecewise-constant posterior on (0, 1).

    The likelihood is exact and constant within each of ``n_cells`` equal
    prior cells, so the posterior cell probabilities are available by
    direct normalization.  Returns (occupancy, exact, standard errors).
    """
    model = TwoStateLatentModel()
    data = model.simulate(np.array([0.7]), 6, make_stream(seed, 100))
    mids = (np.arange(n_cells) + 0.5) / n_cells
    cell_log_likes = np.array(
        [model.exact_log_likelihood(np.array([mid]), data) for mid in mids]
    )

    def snapped_log_like(theta, rng):
        cell = min(n_cells - 1, int(theta[0] * n_cells))
        return float(cell_log_likes[cell])

    config = ChainConfig(
        model=model,
        data=data,
        prior=PriorSpec((UniformPrior(0.0, 1.0),)),
        proposal=ProposalSpec.from_covariance(np.array([[0.09]])),
        length=length,
        seed=seed,
        estimator=snapped_log_like,
        theta_init=np.array([0.5]),
    )
    output = run_chain(config)
    cells = np.minimum((output.samples[:, 0] * n_cells).astype(int), n_cells - 1)
    occupancy = np.array([(cells == i).mean() for i in range(n_cells)])
    shifted = np.exp(cell_log_likes - cell_log_likes.max())
    exact = shifted / shifted.sum()
    errors = np.array([batch_mean_se((cells == i).astype(float)) for i in range(n_cells)])
    return occupancy, exact, errors
