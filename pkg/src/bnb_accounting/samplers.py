"""Batch generators: Deterministic, Shuffle, Poisson and Balls-and-Bins.

Indices are 1-based, matching the usual [n] = {1, ..., n} convention, and
each batch is stored as a sorted integer array.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import Optional, Sequence

import numpy as np

from bnb_accounting.errors import ConfigurationError
from bnb_accounting.numerics import RngStream, _as_generator, binomial_tail


class SamplerKind(enum.Enum):
    DETERMINISTIC = "deterministic"
    SHUFFLE = "shuffle"
    POISSON = "poisson"
    BALLS_AND_BINS = "bnb"


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    """Dataset size n, batch size b, batch count T and optional cap B.

    For Deterministic and Shuffle, b is the exact batch size and n = b * T is
    required. For Poisson, b is the expected batch size. Balls-and-Bins
    ignores b except for truncation-penalty bookkeeping.
    """

    n: int
    b: int
    T: int
    max_batch: Optional[int] = None

    def __post_init__(self):
        if self.n < 0:
            raise ConfigurationError(f"n must be nonnegative, got {self.n}")
        if self.b < 1:
            raise ConfigurationError(f"b must be positive, got {self.b}")
        if self.T < 1:
            raise ConfigurationError(f"T must be positive, got {self.T}")
        if self.max_batch is not None and self.max_batch < 1:
            raise ConfigurationError(f"max_batch must be positive, got {self.max_batch}")

    def require_exact_partition(self):
        if self.n != self.b * self.T:
            raise ConfigurationError(
                f"n = b * T is required, got n={self.n}, b={self.b}, T={self.T}")


@dataclasses.dataclass
class BatchAssignment:
    batches: list[np.ndarray]
    sampler_kind: SamplerKind

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.batches], dtype=np.int64)

    def is_partition(self, n: int) -> bool:
        if not self.batches:
            return n == 0
        joined = np.concatenate(self.batches)
        return len(joined) == n and np.array_equal(np.sort(joined), np.arange(1, n + 1))

    def to_json_lines(self, trial: Optional[int] = None) -> list[dict]:
        rows = []
        for t, batch in enumerate(self.batches, start=1):
            row = {"t": t, "indices": [int(i) for i in batch]}
            if trial is not None:
                row = {"trial": trial, **row}
            rows.append(row)
        return rows


def deterministic_batches(cfg: SamplerConfig) -> BatchAssignment:
    cfg.require_exact_partition()
    batches = [np.arange(t * cfg.b + 1, t * cfg.b + cfg.b + 1) for t in range(cfg.T)]
    return BatchAssignment(batches, SamplerKind.DETERMINISTIC)


def shuffle_batches(cfg: SamplerConfig, rng) -> BatchAssignment:
    cfg.require_exact_partition()
    perm = _as_generator(rng).permutation(cfg.n) + 1
    batches = [np.sort(perm[t * cfg.b:(t + 1) * cfg.b]) for t in range(cfg.T)]
    return BatchAssignment(batches, SamplerKind.SHUFFLE)


def poisson_batches(cfg: SamplerConfig, rng) -> BatchAssignment:
    if cfg.b > cfg.n:
        raise ConfigurationError(f"b must not exceed n, got b={cfg.b}, n={cfg.n}")
    gen = _as_generator(rng)
    include = gen.random((cfg.T, cfg.n)) < cfg.b / cfg.n
    batches = [np.flatnonzero(row) + 1 for row in include]
    return BatchAssignment(batches, SamplerKind.POISSON)


def balls_and_bins_batches(cfg: SamplerConfig, rng) -> BatchAssignment:
    """Assigns every index to a uniformly random batch, independently."""
    bins = _as_generator(rng).integers(0, cfg.T, size=cfg.n)
    order = np.argsort(bins, kind="stable")
    counts = np.bincount(bins, minlength=cfg.T)
    splits = np.split(order + 1, np.cumsum(counts)[:-1])
    return BatchAssignment(list(splits), SamplerKind.BALLS_AND_BINS)


def balls_and_bins_sizes_sequential(cfg: SamplerConfig, rng) -> np.ndarray:
    """Batch sizes drawn one at a time, b_t ~ Bin(n - sum_{i<t} b_i, 1 / (T - t + 1)).

    The joint law equals that of the batch sizes produced by
    `balls_and_bins_batches`; combined with a shuffled dataset this yields
    Balls-and-Bins batches as consecutive blocks.
    """
    gen = _as_generator(rng)
    sizes = np.zeros(cfg.T, dtype=np.int64)
    remaining = cfg.n
    for t in range(cfg.T):
        sizes[t] = gen.binomial(remaining, 1.0 / (cfg.T - t)) if remaining else 0
        remaining -= sizes[t]
    return sizes


def balls_and_bins_batches_sequential(cfg: SamplerConfig, rng) -> BatchAssignment:
    """Balls-and-Bins batches built from a shuffle plus sequential binomial sizes."""
    gen = _as_generator(rng)
    sizes = balls_and_bins_sizes_sequential(cfg, gen)
    perm = gen.permutation(cfg.n) + 1
    splits = np.split(perm, np.cumsum(sizes)[:-1])
    return BatchAssignment([np.sort(s) for s in splits], SamplerKind.BALLS_AND_BINS)


def truncate_batches(assignment: BatchAssignment, max_batch: int, rng) -> BatchAssignment:
    """Replaces each batch larger than `max_batch` by a uniform subset of that size."""
    if max_batch < 1:
        raise ConfigurationError(f"max_batch must be positive, got {max_batch}")
    gen = _as_generator(rng)
    out = []
    for batch in assignment.batches:
        if len(batch) > max_batch:
            batch = np.sort(gen.choice(batch, size=max_batch, replace=False))
        out.append(batch)
    return BatchAssignment(out, assignment.sampler_kind)


def truncation_delta_penalty(n: int, b: int, T: int, max_batch: int, epsilon: float) -> float:
    """Additive delta for capping batches at `max_batch`: (1 + e^eps) T Pr[Bin(n, b/n) > B].

    Not clamped to 1; callers combining it with another delta clamp the sum.
    """
    if b > n:
        raise ConfigurationError(f"b must not exceed n, got b={b}, n={n}")
    tail = binomial_tail(n, b / n, max_batch)
    if tail == 0.0:
        return 0.0
    log_factor = math.log1p(math.exp(epsilon)) if epsilon < 700 else epsilon
    return math.exp(log_factor + math.log(T) + math.log(tail))


def smallest_max_batch(n: int, b: int, T: int, epsilon: float, target: float) -> int:
    """Smallest B with truncation_delta_penalty(n, b, T, B, epsilon) <= target.

    Binary search relies on the penalty being nonincreasing in B; B = n always
    qualifies because the tail beyond the support is empty.
    """
    lo, hi = 1, n
    if truncation_delta_penalty(n, b, T, lo, epsilon) <= target:
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if truncation_delta_penalty(n, b, T, mid, epsilon) <= target:
            hi = mid
        else:
            lo = mid
    return hi


GENERATORS = {
    SamplerKind.DETERMINISTIC: lambda cfg, rng: deterministic_batches(cfg),
    SamplerKind.SHUFFLE: shuffle_batches,
    SamplerKind.POISSON: poisson_batches,
    SamplerKind.BALLS_AND_BINS: balls_and_bins_batches,
}


def generate(kind: SamplerKind, cfg: SamplerConfig, rng: RngStream | np.random.Generator):
    return GENERATORS[kind](cfg, rng)


def marginal_inclusion_probability(kind: SamplerKind, cfg: SamplerConfig) -> float:
    """Pr[i in S_t] for a fixed index i and batch t (before truncation)."""
    if kind is SamplerKind.POISSON:
        return cfg.b / cfg.n
    return 1.0 / cfg.T


def batch_size_law(kind: SamplerKind, cfg: SamplerConfig) -> Optional[tuple[int, float]]:
    """Binomial (trials, prob) law of a single batch size, or None when fixed."""
    if kind is SamplerKind.POISSON:
        return cfg.n, cfg.b / cfg.n
    if kind is SamplerKind.BALLS_AND_BINS:
        return cfg.n, 1.0 / cfg.T
    return None


def sorted_union(batches: Sequence[np.ndarray]) -> np.ndarray:
    return np.sort(np.concatenate(batches)) if batches else np.array([], dtype=np.int64)
