"""Monte Carlo estimators for a product of expectations sharing one particle set.

The target is ``prod_p E[G_p(Z)]`` for potentials ``G_1..G_n`` and a single
latent law.  Every estimator here consumes an (n_factors, n_particles)
matrix of log potential values, one row per factor and one column per
particle, and returns a log estimate.  Matrix entries may be ``-inf``
(a potential vanishing at a particle) but never NaN, and all accumulation
stays in log space so products of many factors neither underflow nor
overflow.

Estimators
----------
``estimate_simple``
    Splits the columns into n_factors consecutive blocks of ``block_size``
    and averages each factor over its own block.  Unbiased.
``estimate_biased``
    Averages every factor over all columns.  Biased for n_factors > 1, but
    each factor sees every particle.
``estimate_perm_exact``
    Averages the product over every ordered selection of distinct columns,
    one per factor (a rescaled matrix permanent).  Unbiased; exact
    enumeration, so only feasible for small problems.
``estimate_recycle``
    Sequential selection scheme that matches ``estimate_perm_exact`` in
    conditional expectation at the cost of n_factors passes: factor p is
    averaged over the columns not yet selected, then one column is drawn
    with probability proportional to that factor's potential and retired.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .logspace import RunningLogSum, masked_log_sum_exp

__all__ = [
    "DEFAULT_ENUMERATION_CAP",
    "DimensionError",
    "EnumerationLimitError",
    "PotentialValueError",
    "ParticleSet",
    "PotentialMatrix",
    "LogEstimate",
    "SelectionTrace",
    "eval_potential_matrix",
    "estimate_simple",
    "estimate_biased",
    "estimate_recycle",
    "estimate_perm_exact",
    "estimate_simple_permuted",
    "average_permuted_simple",
    "sample_next_index",
    "recycle_log_estimates_batch",
]

# Ceiling on exactly enumerated terms; callers may raise it explicitly.
DEFAULT_ENUMERATION_CAP = 10_000_000


class DimensionError(ValueError):
    """Input shapes are incompatible with the requested estimator."""


class EnumerationLimitError(RuntimeError):
    """An exact enumeration would exceed the configured term budget."""


class PotentialValueError(ValueError):
    """A potential evaluation produced NaN or a malformed array."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ParticleSet:
    """Latent draws shared by all factors, with seed provenance.

    ``points`` is one particle per row; latent values may be scalars or
    vectors, so the array is (n_particles,) or (n_particles, dim).
    ``seed`` records the master seed of the stream that produced the
    draws when the caller knows it.
    """

    points: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim not in (1, 2) or pts.shape[0] < 1:
            raise DimensionError(f"points must be a non-empty 1-d or 2-d array, got shape {pts.shape}")
        pts = np.array(pts, copy=True)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PotentialMatrix:
    """(n_factors, n_particles) matrix of log potential values.

    Entries live in [-inf, inf): ``-inf`` encodes a vanishing potential,
    NaN and +inf are rejected.  Requires n_particles >= n_factors so that
    selection without replacement is possible.
    """

    log_values: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.log_values, dtype=float)
        if lv.ndim != 2:
            raise DimensionError(f"log_values must be 2-d, got shape {lv.shape}")
        n_factors, n_particles = lv.shape
        if n_factors < 1:
            raise DimensionError("need at least one factor")
        if n_particles < n_factors:
            raise DimensionError(
                f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
            )
        if np.isnan(lv).any():
            raise PotentialValueError("log potential values contain NaN")
        if np.isposinf(lv).any():
            raise PotentialValueError("log potential values contain +inf")
        object.__setattr__(self, "log_values", _readonly(lv))

    @property
    def n_factors(self) -> int:
        return self.log_values.shape[0]

    @property
    def n_particles(self) -> int:
        return self.log_values.shape[1]


@dataclass(frozen=True)
class LogEstimate:
    """A non-negative estimate stored as its logarithm (-inf means zero)."""

    log_value: float

    def __post_init__(self):
        lv = float(self.log_value)
        if math.isnan(lv) or lv == math.inf:
            raise ValueError(f"log estimate must be in [-inf, inf), got {lv!r}")
        object.__setattr__(self, "log_value", lv)

    @property
    def value(self) -> float:
        """Linear-scale value; may underflow to 0.0 or overflow to inf."""
        return math.exp(self.log_value)


@dataclass(frozen=True)
class SelectionTrace:
    """Columns retired by the recycled estimator, in selection order."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError(f"selection indices must be distinct, got {idx}")
        if any(i < 0 for i in idx):
            raise ValueError(f"selection indices must be non-negative, got {idx}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)


def eval_potential_matrix(
    potentials: Sequence[Callable[[np.ndarray], np.ndarray]],
    particles: ParticleSet,
) -> PotentialMatrix:
    """Evaluate vectorized log potentials on every particle.

    Each callable receives the full ``particles.points`` array and must
    return one log value per particle.  A NaN anywhere is reported with
    the (factor, particle) coordinates that produced it.
    """
    n_particles = particles.n_particles
    rows = []
    for p, potential in enumerate(potentials):
        row = np.asarray(potential(particles.points), dtype=float)
        if row.shape != (n_particles,):
            raise PotentialValueError(
                f"potential {p} returned shape {row.shape}, expected ({n_particles},)"
            )
        bad = np.flatnonzero(np.isnan(row))
        if bad.size:
            raise PotentialValueError(
                f"potential {p} returned NaN at particle {int(bad[0])}"
            )
        rows.append(row)
    if not rows:
        raise DimensionError("need at least one potential")
    return PotentialMatrix(np.stack(rows))


def estimate_simple(matrix: PotentialMatrix, block_size: int) -> LogEstimate:
    """Block estimator: factor p averaged over its own ``block_size`` columns.

    Requires n_particles == n_factors * block_size; factor p owns columns
    [p * block_size, (p + 1) * block_size).
    """
    block_size = int(block_size)
    if block_size < 1:
        raise DimensionError(f"block_size must be >= 1, got {block_size}")
    n_factors, n_particles = matrix.n_factors, matrix.n_particles
    if n_particles != n_factors * block_size:
        raise DimensionError(
            f"simple estimator needs n_particles == n_factors * block_size, "
            f"got {n_particles} != {n_factors} * {block_size}"
        )
    lv = matrix.log_values
    total = 0.0
    log_block = math.log(block_size)
    for p in range(n_factors):
        block = lv[p, p * block_size : (p + 1) * block_size]
        shift = block.max()
        if shift == -np.inf:
            return LogEstimate(-np.inf)
        total += shift + math.log(np.exp(block - shift).sum()) - log_block
    return LogEstimate(total)


def estimate_biased(matrix: PotentialMatrix) -> LogEstimate:
    """Full-average estimator: every factor averaged over every column.

    Its expectation is a product over expected row averages, which differs
    from the target product whenever the same particle enters several
    factors, so this is the (generally biased) reference point.
    """
    lv = matrix.log_values
    log_n = math.log(matrix.n_particles)
    total = 0.0
    for p in range(matrix.n_factors):
        row_sum = masked_log_sum_exp(lv[p], np.ones(matrix.n_particles, dtype=bool))
        if row_sum == -np.inf:
            return LogEstimate(-np.inf)
        total += row_sum - log_n
    return LogEstimate(total)


def _draw_available_index(
    log_row: np.ndarray, available: np.ndarray, rng: np.random.Generator
) -> int:
    """Draw one available column with probability proportional to exp(log_row).

    Falls back to a uniform draw over the available columns when every
    available potential is zero.  Consumes exactly one uniform variate in
    either branch.
    """
    candidates = np.flatnonzero(available)
    if candidates.size == 0:
        raise DimensionError("no available columns to select from")
    vals = log_row[candidates]
    shift = vals.max()
    u = rng.random()
    if shift == -np.inf:
        return int(candidates[min(int(u * candidates.size), candidates.size - 1)])
    weights = np.exp(vals - shift)
    cumulative = np.cumsum(weights)
    j = int(np.searchsorted(cumulative, u * cumulative[-1], side="right"))
    return int(candidates[min(j, candidates.size - 1)])


def sample_next_index(
    log_potentials_row: np.ndarray,
    excluded: Iterable[int],
    rng: np.random.Generator,
) -> int:
    """One selection step: draw a column outside ``excluded``.

    The draw is proportional to the potential over the remaining columns,
    and uniform over them when all remaining potentials vanish.
    """
    log_row = np.asarray(log_potentials_row, dtype=float)
    if log_row.ndim != 1:
        raise DimensionError(f"expected a 1-d row, got shape {log_row.shape}")
    if np.isnan(log_row).any():
        raise PotentialValueError("log potential row contains NaN")
    available = np.ones(log_row.size, dtype=bool)
    for i in excluded:
        i = int(i)
        if not 0 <= i < log_row.size:
            raise DimensionError(f"excluded index {i} out of range [0, {log_row.size})")
        available[i] = False
    if not available.any():
        raise DimensionError("every column is excluded")
    return _draw_available_index(log_row, available, rng)


def estimate_recycle(
    matrix: PotentialMatrix, rng: np.random.Generator
) -> tuple[LogEstimate, SelectionTrace]:
    """Recycled estimator: sequential averages over not-yet-selected columns.

    Starting from the full column set, factor p is averaged over the
    n_particles - p columns still available, the running product is
    updated, and one column is drawn with probability proportional to
    factor p's potential among those available, then retired.  When all
    available potentials for a factor vanish the factor average is zero,
    the estimate is zero from that point on, and the selection falls back
    to a uniform draw so the trace is always complete.

    Returns the log estimate together with the n_factors selected column
    indices in order.  The estimator is unbiased for the target product
    and reproducible given (matrix, generator state).
    """
    lv = matrix.log_values
    n_factors, n_particles = matrix.n_factors, matrix.n_particles
    available = np.ones(n_particles, dtype=bool)
    log_total = 0.0
    picks: list[int] = []
    for p in range(n_factors):
        row = lv[p]
        log_avg = masked_log_sum_exp(row, available) - math.log(n_particles - p)
        log_total += log_avg
        k = _draw_available_index(row, available, rng)
        picks.append(k)
        available[k] = False
    return LogEstimate(log_total), SelectionTrace(tuple(picks))


def recycle_log_estimates_batch(
    log_tensor: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Recycled estimator over a batch: log_tensor is (n_replicates, n_factors, n_particles).

    Returns the (n_replicates,) log estimates.  Distributionally identical
    to calling ``estimate_recycle`` per replicate (one uniform variate per
    selection step), but the variates are interleaved across the batch, so
    the two paths do not reproduce each other draw for draw.
    """
    lt = np.asarray(log_tensor, dtype=float)
    if lt.ndim != 3:
        raise DimensionError(f"expected a 3-d tensor, got shape {lt.shape}")
    if np.isnan(lt).any():
        raise PotentialValueError("log potential tensor contains NaN")
    n_replicates, n_factors, n_particles = lt.shape
    if n_particles < n_factors:
        raise DimensionError(
            f"need n_particles >= n_factors, got {n_particles} < {n_factors}"
        )
    available = np.ones((n_replicates, n_particles), dtype=bool)
    log_total = np.zeros(n_replicates)
    row_ids = np.arange(n_replicates)
    for p in range(n_factors):
        row = lt[:, p, :]
        masked = np.where(available, row, -np.inf)
        shift = masked.max(axis=1)
        finite = shift > -np.inf
        weights = np.zeros_like(masked)
        with np.errstate(invalid="ignore"):
            # Rows whose available potentials all vanish would shift by -inf;
            # they are masked out of the exp and handled by the uniform branch.
            np.exp(masked - shift[:, None], out=weights, where=finite[:, None])
        mass = weights.sum(axis=1)
        log_avg = np.where(
            finite, shift + np.log(np.where(finite, mass, 1.0)), -np.inf
        ) - math.log(n_particles - p)
        log_total = log_total + log_avg

        u = rng.random(n_replicates)
        cumulative = np.cumsum(weights, axis=1)
        picked = (cumulative <= (u * mass)[:, None]).sum(axis=1)
        # Zero-mass rows: uniform over the n_particles - p available columns.
        rank = np.cumsum(available, axis=1)
        uniform_pick = (rank <= (u * (n_particles - p)).astype(np.int64)[:, None]).sum(axis=1)
        picked = np.where(finite, picked, uniform_pick)
        available[row_ids, picked] = False
    return log_total


def estimate_perm_exact(
    matrix: PotentialMatrix, max_terms: int = DEFAULT_ENUMERATION_CAP
) -> LogEstimate:
    """Average the factor product over all ordered selections of distinct columns.

    Enumerates every injective assignment of factors to columns, i.e.
    n_particles! / (n_particles - n_factors)! terms, which is a rescaled
    permanent of the potential matrix.  Raises ``EnumerationLimitError``
    when that count exceeds ``max_terms``.
    """
    n_factors, n_particles = matrix.n_factors, matrix.n_particles
    n_terms = math.perm(n_particles, n_factors)
    if n_terms > max_terms:
        raise EnumerationLimitError(
            f"enumeration infeasible: {n_terms} ordered selections exceed "
            f"the cap of {max_terms}"
        )
    lv = matrix.log_values
    rows = np.arange(n_factors)
    accumulator = RunningLogSum()
    selections = itertools.permutations(range(n_particles), n_factors)
    while True:
        chunk = list(itertools.islice(selections, 65536))
        if not chunk:
            break
        idx = np.asarray(chunk, dtype=np.intp)
        accumulator.add(lv[rows, idx].sum(axis=1))
    return LogEstimate(accumulator.log_total - math.log(n_terms))


def estimate_simple_permuted(
    matrix: PotentialMatrix, permutation: Sequence[int], block_size: int
) -> LogEstimate:
    """Block estimator after relabelling the columns by ``permutation``.

    Column j of the permuted problem is column permutation[j] of the
    original matrix; the block estimator then runs unchanged.
    """
    perm = np.asarray(permutation, dtype=np.intp)
    n_particles = matrix.n_particles
    if perm.shape != (n_particles,) or not np.array_equal(
        np.sort(perm), np.arange(n_particles)
    ):
        raise DimensionError(
            f"permutation must rearrange range({n_particles}), got {permutation!r}"
        )
    return estimate_simple(PotentialMatrix(matrix.log_values[:, perm]), block_size)


def average_permuted_simple(
    matrix: PotentialMatrix,
    n_permutations: int,
    rng: np.random.Generator,
    block_size: int | None = None,
) -> LogEstimate:
    """Average the block estimator over uniformly random column relabellings.

    With ``n_permutations`` of them this Rao-Blackwellises towards the
    exact ordered-selection average, which is the limit over all
    n_particles! relabellings.
    """
    n_permutations = int(n_permutations)
    if n_permutations < 1:
        raise DimensionError(f"need at least one permutation, got {n_permutations}")
    if block_size is None:
        if matrix.n_particles % matrix.n_factors:
            raise DimensionError(
                "block_size not given and n_particles is not a multiple of n_factors"
            )
        block_size = matrix.n_particles // matrix.n_factors
    accumulator = RunningLogSum()
    for _ in range(n_permutations):
        perm = rng.permutation(matrix.n_particles)
        accumulator.add(estimate_simple_permuted(matrix, perm, block_size).log_value)
    return LogEstimate(accumulator.log_total - math.log(n_permutations))
