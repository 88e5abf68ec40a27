"""Special functions, confidence bounds and seedable random streams.

Everything here is deterministic except `beta_sample`, whose output is fully
determined by the `RngStream` it is given.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy import special
from scipy import stats

from bnb_accounting.errors import DomainError

# Bisection stops once the bracket is this narrow (or cannot shrink further).
KL_BISECTION_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, stream_index).

    Streams are derived with `numpy.random.SeedSequence` spawn keys, so two
    streams with different indices (or different parents) are statistically
    independent, and the same identifiers always reproduce the same draws.

    Attributes:
      seed: Root seed, a nonnegative integer below 2**64.
      stream_index: Index of this stream among its siblings.
      parent: Spawn-key path of the parent stream; empty for top-level streams.
    """

    seed: int
    stream_index: int = 0
    parent: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned int, got {self.seed}")
        if self.stream_index < 0:
            raise DomainError(
                f"stream_index must be nonnegative, got {self.stream_index}")

    @property
    def key(self) -> tuple[int, ...]:
        return self.parent + (self.stream_index,)

    def substream(self, index: int) -> RngStream:
        """Returns the child stream `index` of this stream."""
        return RngStream(self.seed, index, self.key)

    def generator(self) -> np.random.Generator:
        """Returns a fresh generator positioned at the start of the stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(seq))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


def _check_sigma(sigma):
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")


def gaussian_cdf(x, sigma=1.0):
    """Returns Pr[z <= x] for z ~ N(0, sigma^2); accepts scalars or arrays."""
    _check_sigma(sigma)
    return special.ndtr(np.divide(x, sigma))


def gaussian_log_cdf(x, sigma=1.0):
    """Returns log Pr[z <= x] for z ~ N(0, sigma^2), accurate in the far left tail."""
    _check_sigma(sigma)
    return special.log_ndtr(np.divide(x, sigma))


def gaussian_sf(x, sigma=1.0):
    """Returns Pr[z > x] for z ~ N(0, sigma^2)."""
    _check_sigma(sigma)
    return special.ndtr(-np.divide(x, sigma))


def gaussian_inv_cdf(u, sigma=1.0):
    """Inverse of `gaussian_cdf`.

    Raises:
      DomainError: If any `u` is outside the open interval (0, 1). The
        endpoints map to infinities, so callers must handle tails explicitly.
    """
    _check_sigma(sigma)
    u_arr = np.asarray(u, dtype=float)
    if np.any(~((u_arr > 0) & (u_arr < 1))):
        raise DomainError("gaussian_inv_cdf requires 0 < u < 1")
    out = sigma * special.ndtri(u_arr)
    return float(out) if out.ndim == 0 else out


def gaussian_inv_cdf_from_log(log_u, sigma=1.0):
    """Returns Phi_sigma^{-1}(exp(log_u)) keeping precision near u = 1.

    For u > 1/2 the quantile is computed from the survival probability
    -expm1(log_u), which stays accurate where u itself rounds to 1.
    """
    log_u = np.asarray(log_u, dtype=float)
    upper = log_u > -math.log(2.0)
    with np.errstate(divide="ignore"):
        left = special.ndtri(np.exp(np.where(upper, -1.0, log_u)))
        right = -special.ndtri(-np.expm1(np.where(upper, log_u, -1.0)))
    return sigma * np.where(upper, right, left)


def beta_sample(alpha, beta_param, rng, size=None):
    """Draws from Beta(alpha, beta_param) using the given stream or generator."""
    if not (alpha > 0 and beta_param > 0):
        raise DomainError(f"Beta parameters must be positive, got {alpha}, {beta_param}")
    return _as_generator(rng).beta(alpha, beta_param, size=size)


def beta_cdf(x, alpha, beta_param):
    """Regularized incomplete Beta function I_x(alpha, beta_param)."""
    if not (alpha > 0 and beta_param > 0):
        raise DomainError(f"Beta parameters must be positive, got {alpha}, {beta_param}")
    return special.betainc(alpha, beta_param, np.clip(x, 0.0, 1.0))


def beta_inv_cdf(u, alpha, beta_param):
    """Inverse of `beta_cdf`; returns exactly 0 at u = 0 and 1 at u = 1."""
    if not (alpha > 0 and beta_param > 0):
        raise DomainError(f"Beta parameters must be positive, got {alpha}, {beta_param}")
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr < 0) | (u_arr > 1)):
        raise DomainError("beta_inv_cdf requires 0 <= u <= 1")
    out = special.betaincinv(alpha, beta_param, u_arr)
    out = np.where(u_arr == 0, 0.0, np.where(u_arr == 1, 1.0, out))
    return float(out) if out.ndim == 0 else out


def bernoulli_kl(q: float, p: float) -> float:
    """KL(Ber(q) || Ber(p)) with 0 log 0 = 0; +inf when p hits a boundary q lacks."""
    total = 0.0
    if q > 0:
        if p <= 0:
            return math.inf
        total += q * math.log(q / p)
    if q < 1:
        if p >= 1:
            return math.inf
        total += (1 - q) * math.log((1 - q) / (1 - p))
    return max(total, 0.0)


def kl_ucb(q: float, m: int, beta: float) -> float:
    """Smallest p in [q, 1] with KL(q || p) >= log(1/beta) / m, or 1.

    This is the Chernoff-Hoeffding upper confidence bound on the mean of a
    [0, 1]-valued variable whose empirical mean over m draws is q. The
    returned value is the upper end of the final bisection bracket, so it
    never undershoots the exact root.
    """
    _check_confidence_args(q, m, beta)
    target = math.log(1 / beta) / m
    if q >= 1:
        return 1.0
    if q <= 0:
        # KL(0 || p) = -log(1 - p) inverts in closed form.
        return -math.expm1(-target)
    lo, hi = q, 1.0
    while hi - lo > KL_BISECTION_TOL * min(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if bernoulli_kl(q, mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def kl_lcb(q: float, m: int, beta: float) -> float:
    """Largest p in [0, q] with KL(q || p) >= log(1/beta) / m, or 0."""
    _check_confidence_args(q, m, beta)
    target = math.log(1 / beta) / m
    if q <= 0:
        return 0.0
    if q >= 1:
        return math.exp(-target)
    if bernoulli_kl(q, 0.0) < target:
        return 0.0
    lo, hi = 0.0, q
    while hi - lo > KL_BISECTION_TOL * min(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if bernoulli_kl(q, mid) >= target:
            lo = mid
        else:
            hi = mid
    return lo


def _check_confidence_args(q, m, beta):
    if not 0 <= q <= 1:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    if m < 1:
        raise DomainError(f"m must be a positive integer, got {m}")
    if not 0 < beta < 1:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")


def binomial_tail(n: int, prob: float, threshold: int) -> float:
    """Pr[r > threshold] for r ~ Bin(n, prob), summed in log space.

    Terms are summed outward from the mode and dropped once they fall more
    than 45 standard deviations away, where they are below e^-1000 relative
    to the mode.
    """
    if not 0 <= prob <= 1:
        raise DomainError(f"prob must lie in [0, 1], got {prob}")
    if threshold >= n:
        return 0.0
    if threshold < 0:
        return 1.0
    if prob == 0:
        return 0.0
    if prob == 1:
        return 1.0
    mode = min(n, int(math.floor((n + 1) * prob)))
    sd = math.sqrt(n * prob * (1 - prob))
    reach = int(45 * sd) + 64
    lo = threshold + 1
    hi = min(n, max(lo, mode) + reach)
    lo = max(lo, mode - reach)
    ks = np.arange(lo, hi + 1, dtype=np.float64)
    log_terms = stats.binom.logpmf(ks, n, prob)
    if np.all(np.isneginf(log_terms)):
        return 0.0
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def logsumexp(values: Sequence[float]) -> float:
    """Returns log(sum(exp(values))) using a max shift."""
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise DomainError("logsumexp of an empty sequence")
    top = arr.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(math.fsum(np.exp(arr - top))))
