"""Named finite-support fixtures used by the oracle, the CLI and the tests.

Each fixture is small enough for exhaustive enumeration yet exercises a
distinct regime of the estimators:

``d1``
    Fair two-point measure with disjoint singleton indicators.  The two
    factors can never share a particle, the target is 1/4, and each
    factor has single-draw relative variance 1.
``d3``
    Uniform measure on {0, 1}^2 with coordinate indicators.  The factors
    depend on independent coordinates, so the recycled second moment
    matches the independent-factor closed form.
``d4``
    Two-state latent model with a symmetric 3/4 versus 1/4 emission
    kernel.  Used for the observation-averaged second-moment identity;
    its expected factor relative variance is 1/4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .oracle import DiscreteLVM, DiscreteMeasure, DiscretePotentialSet

__all__ = [
    "Fixture",
    "FIXTURES",
    "get_fixture",
    "disjoint_indicator_fixture",
    "product_coordinate_fixture",
    "two_state_latent_fixture",
    "sample_support_indices",
    "log_potential_values",
    "DiscreteFixtureModel",
]


@dataclass(frozen=True)
class Fixture:
    """A named finite problem: either a (measure, potentials) pair or a latent model."""

    name: str
    kind: str  # "moments" or "latent"
    description: str
    build: Callable[[], Union[tuple[DiscreteMeasure, DiscretePotentialSet], DiscreteLVM]]


def disjoint_indicator_fixture() -> tuple[DiscreteMeasure, DiscretePotentialSet]:
    """Fair coin with indicators of {0} and {1}: disjoint supports, target 1/4."""
    measure = DiscreteMeasure(support=(0, 1), probs=np.array([0.5, 0.5]))
    potentials = DiscretePotentialSet(values=np.array([[1.0, 0.0], [0.0, 1.0]]))
    return measure, potentials


def product_coordinate_fixture() -> tuple[DiscreteMeasure, DiscretePotentialSet]:
    """Uniform law on pairs of bits with one indicator per coordinate."""
    support = ((0, 0), (0, 1), (1, 0), (1, 1))
    measure = DiscreteMeasure(support=support, probs=np.full(4, 0.25))
    first_bit = np.array([0.0, 0.0, 1.0, 1.0])
    second_bit = np.array([0.0, 1.0, 0.0, 1.0])
    potentials = DiscretePotentialSet(values=np.stack([first_bit, second_bit]))
    return measure, potentials


def two_state_latent_fixture() -> DiscreteLVM:
    """Balanced two-state latent law with a symmetric binary emission kernel."""
    return DiscreteLVM(
        latent_probs=np.array([0.5, 0.5]),
        kernel=np.array([[0.75, 0.25], [0.25, 0.75]]),
    )


FIXTURES: dict[str, Fixture] = {
    "d1": Fixture(
        name="d1",
        kind="moments",
        description="fair two-point measure, disjoint singleton indicators",
        build=disjoint_indicator_fixture,
    ),
    "d3": Fixture(
        name="d3",
        kind="moments",
        description="uniform measure on bit pairs, coordinate indicators",
        build=product_coordinate_fixture,
    ),
    "d4": Fixture(
        name="d4",
        kind="latent",
        description="two-state latent model, symmetric 3/4 vs 1/4 emission kernel",
        build=two_state_latent_fixture,
    ),
}


def get_fixture(name: str) -> Fixture:
    try:
        return FIXTURES[name.lower()]
    except KeyError:
        known = ", ".join(sorted(FIXTURES))
        raise KeyError(f"unknown fixture {name!r}; known fixtures: {known}") from None


def sample_support_indices(
    measure: DiscreteMeasure,
    n_particles: int,
    rng: np.random.Generator,
    n_replicates: int | None = None,
) -> np.ndarray:
    """Draw particle support indices from the measure.

    Returns an (n_particles,) index array, or (n_replicates, n_particles)
    when a replicate count is given.
    """
    size = n_particles if n_replicates is None else (n_replicates, n_particles)
    return rng.choice(measure.n_points, size=size, p=measure.probs)


class DiscreteFixtureModel:
    """A fixed (measure, potentials) pair behind the latent-model interface.

    There is nothing to infer: theta is an empty vector and the
    "observations" are factor indices, so factor p's potential row doubles
    as the log potential of observation p.  This lets the estimator bridge
    and the tuning helpers run unchanged on the named fixtures.
    """

    param_names = ()
    theta_dim = 0

    def __init__(self, measure: DiscreteMeasure, potentials: DiscretePotentialSet):
        if potentials.values.shape[1] != measure.n_points:
            raise ValueError(
                f"potentials tabulated on {potentials.values.shape[1]} points, "
                f"measure has {measure.n_points}"
            )
        self.measure = measure
        self.potentials = potentials
        with np.errstate(divide="ignore"):
            self._log_values = np.log(potentials.values)

    @property
    def n_factors(self) -> int:
        return self.potentials.n_factors

    @property
    def factor_indices(self) -> np.ndarray:
        """The data vector: one pseudo-observation per factor."""
        return np.arange(self.n_factors)

    def sample_latent(self, theta, rng: np.random.Generator, size=None):
        return rng.choice(self.measure.n_points, size=size, p=self.measure.probs)

    def log_potentials(self, data) -> list:
        rows = np.asarray(data, dtype=np.intp)
        if rows.ndim != 1 or ((rows < 0) | (rows >= self.n_factors)).any():
            raise ValueError(
                f"fixture observations must be factor indices in [0, {self.n_factors})"
            )
        log_values = self._log_values
        return [
            lambda x, row=int(p): log_values[row, np.asarray(x, dtype=np.intp)]
            for p in rows
        ]


def log_potential_values(
    potentials: DiscretePotentialSet, indices: np.ndarray
) -> np.ndarray:
    """Log potential values at sampled support indices; zeros map to -inf.

    For (n_particles,) indices the result is (n_factors, n_particles); for
    (n_replicates, n_particles) it is (n_replicates, n_factors, n_particles),
    ready for the batched estimators.
    """
    indices = np.asarray(indices, dtype=np.intp)
    with np.errstate(divide="ignore"):
        logs = np.log(potentials.values[:, indices])
    if indices.ndim == 1:
        return logs
    if indices.ndim == 2:
        return np.moveaxis(logs, 0, 1)
    raise ValueError(f"indices must be 1-d or 2-d, got shape {indices.shape}")
