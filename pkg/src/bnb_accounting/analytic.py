"""Accountants that need no Balls-and-Bins sampling.

* `delta_deterministic`: closed-form hockey stick of N(1, s^2) vs N(0, s^2).
* Poisson subsampling: a discretized privacy loss distribution (PLD),
  composed in the Fourier domain. Pessimistic rounding gives upper bounds,
  optimistic rounding lower bounds.
* `bnb_lower_bound`: Balls-and-Bins lower bound from the sets
  {max_t x_t >= C}, whose probabilities are products of Gaussian CDFs.
* `shuffle_lower_bound`: Monte Carlo lower confidence bound for shuffling.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import Optional, Sequence

import numpy as np
from scipy import fft, special

from bnb_accounting.errors import ConfigurationError, GridOverflowError
from bnb_accounting.losses import AccountingParams, Direction, PairId, PairKind
from bnb_accounting.monte_carlo import DeltaEstimate, McConfig, Strategy, estimate_curve

DEFAULT_GRID_STEP = 1e-4
DEFAULT_TAIL_MASS = 1e-15
# Composed supports longer than this many cells are refused.
MAX_SUPPORT = 2**24


def _log_ndtr(x):
    return special.log_ndtr(x)


def delta_deterministic(params: AccountingParams, epsilon: float) -> float:
    """delta(eps) for the scalar Gaussian pair N(1, sigma^2) vs N(0, sigma^2).

    Equals Phi(1/(2 sigma) - eps sigma) - e^eps Phi(-1/(2 sigma) - eps sigma)
    in both directions. The second term is formed in log space so it neither
    overflows for large eps nor loses the difference to cancellation.
    """
    if params.epochs != 1:
        raise ConfigurationError("deterministic accounting is single-epoch only")
    s = params.sigma
    a = 0.5 / s - epsilon * s
    b = -0.5 / s - epsilon * s
    log_first = float(_log_ndtr(a))
    log_second = epsilon + float(_log_ndtr(b))
    if log_second >= log_first:
        return 0.0
    # first - second = first * (1 - e^{log_second - log_first}).
    value = math.exp(log_first) * -math.expm1(log_second - log_first)
    return min(1.0, max(0.0, value))


class Rounding(enum.Enum):
    PESSIMISTIC = "pessimistic"
    OPTIMISTIC = "optimistic"


@dataclasses.dataclass
class PldDiscretization:
    """A privacy loss distribution on the grid {i * grid_step}.

    Attributes:
      grid_step: Spacing of the loss grid.
      offset: Grid index of masses[0]; cell j has loss (offset + j) * grid_step.
      masses: Probability of each cell.
      infinity_mass: Probability of an infinite loss (truncation bookkeeping).
      rounding_mode: How losses were moved onto the grid.
      tail_mass: Mass allowed outside the support window on each side.
    """

    grid_step: float
    offset: int
    masses: np.ndarray
    infinity_mass: float
    rounding_mode: Rounding
    tail_mass: float = DEFAULT_TAIL_MASS

    @property
    def losses(self) -> np.ndarray:
        return (self.offset + np.arange(self.masses.size)) * self.grid_step

    def total_mass(self) -> float:
        return math.fsum(self.masses) + self.infinity_mass

    def delta(self, epsilon: float) -> float:
        """sum_cells mass * [1 - e^{eps - loss}]_+ + infinity mass."""
        losses = self.losses
        keep = losses > epsilon
        terms = self.masses[keep] * -np.expm1(epsilon - losses[keep])
        return min(1.0, math.fsum(terms) + self.infinity_mass)

    def compose(self, n: int) -> PldDiscretization:
        """n-fold self-composition.

        The composed loss is confined to a window whose complement has mass at
        most `tail_mass` on each side by a Chernoff bound, and computed there
        with one FFT raised to the n-th power. Mass outside the window wraps
        around cyclically; in pessimistic mode the upper-tail bound is also
        added to the infinity atom, so the wrapped mass only ever adds to delta.
        """
        if n < 1:
            raise ConfigurationError(f"need at least one composition step, got {n}")
        if n == 1:
            return self
        lo, hi = _chernoff_window(self, n)
        size = hi - lo + 1
        if size > MAX_SUPPORT:
            raise GridOverflowError(
                f"composed support needs {size} cells (limit {MAX_SUPPORT}); "
                f"use a coarser grid_step than {self.grid_step}")
        nfft = fft.next_fast_len(max(size, self.masses.size))
        spectrum = np.fft.rfft(self.masses, nfft) ** n
        cyclic = np.fft.irfft(spectrum, nfft)
        # cyclic[k] holds composed index n * offset + k (mod nfft).
        shift = (lo - n * self.offset) % nfft
        masses = np.clip(np.roll(cyclic, -shift)[:size], 0.0, None)
        infinity = -math.expm1(n * math.log1p(-self.infinity_mass))
        if self.rounding_mode is Rounding.PESSIMISTIC:
            infinity = min(1.0, infinity + self.tail_mass)
        return PldDiscretization(self.grid_step, lo, masses, infinity, self.rounding_mode,
                                 self.tail_mass)


def _chernoff_window(pld: PldDiscretization, n: int) -> tuple[int, int]:
    """Grid indices [lo, hi] holding all but `tail_mass` per side of the n-fold sum.

    Pr[S >= u] <= exp(-lam u) M(lam)^n and Pr[S <= u] <= exp(lam u) M(-lam)^n
    for the (sub-probability) finite part with moment generating function M.
    """
    pos = pld.masses > 0
    log_m = np.log(pld.masses[pos])
    losses = pld.losses[pos]
    log_tail = math.log(pld.tail_mass)
    lams = np.geomspace(1e-3, 1e3, 121)[:, None]
    with np.errstate(over="ignore"):
        log_mgf_up = special.logsumexp(log_m + lams * losses, axis=1)
        log_mgf_down = special.logsumexp(log_m - lams * losses, axis=1)
    lam = lams[:, 0]
    upper = min(np.min((n * log_mgf_up - log_tail) / lam), n * float(losses[-1]))
    lower = max(np.max((log_tail - n * log_mgf_down) / lam), n * float(losses[0]))
    h = pld.grid_step
    first = pld.offset + int(np.argmax(pos))
    last = pld.offset + pos.size - 1 - int(np.argmax(pos[::-1]))
    lo = max(math.floor(lower / h) - 1, n * first)
    hi = min(math.ceil(upper / h) + 1, n * last)
    return lo, hi


def convolve_direct(a: PldDiscretization, b: PldDiscretization) -> PldDiscretization:
    """Composition by direct O(S^2) convolution, without tail truncation."""
    masses = np.convolve(a.masses, b.masses)
    infinity = 1.0 - (1.0 - a.infinity_mass) * (1.0 - b.infinity_mass)
    return PldDiscretization(a.grid_step, a.offset + b.offset, masses, infinity, a.rounding_mode,
                             a.tail_mass)


def _poisson_step_loss(x, sigma: float, q: float):
    """log(1 - q + q e^{(2x - 1) / (2 sigma^2)})."""
    z = (2 * np.asarray(x, dtype=np.float64) - 1) / (2 * sigma**2)
    if q >= 1:
        return z
    return np.logaddexp(math.log1p(-q), math.log(q) + z)


def _poisson_step_inverse(loss, sigma: float, q: float):
    """The x with log(1 - q + q e^{(2x - 1) / (2 sigma^2)}) = loss; -inf below log(1 - q)."""
    loss = np.asarray(loss, dtype=np.float64)
    floor = math.log1p(-q) if q < 1 else -math.inf
    out = np.full(loss.shape, -np.inf)
    ok = loss > floor
    b = loss[ok]
    # log(e^b - (1 - q)) = b + log(-expm1(log(1 - q) - b)).
    out[ok] = sigma**2 * (b + np.log(-np.expm1(floor - b)) - math.log(q)) + 0.5
    return out


def _mixture_cdf_sf(x, sigma: float, q: float, shift: float):
    """CDF and survival of (1 - q) N(0, s^2) + q N(shift, s^2) at x."""
    x = np.asarray(x, dtype=np.float64)
    cdf = (1 - q) * special.ndtr(x / sigma) + q * special.ndtr((x - shift) / sigma)
    sf = (1 - q) * special.ndtr(-x / sigma) + q * special.ndtr((shift - x) / sigma)
    return cdf, sf


def _loss_cdf_sf(bounds: np.ndarray, sigma: float, q: float, direction: Direction):
    """Pr[loss <= b] and Pr[loss > b] under the direction's numerator."""
    if direction is Direction.PQ:
        # The loss increases with x; the numerator is the mixture.
        return _mixture_cdf_sf(_poisson_step_inverse(bounds, sigma, q), sigma, q, 1.0)
    # The loss is minus the PQ loss, under N(0, sigma^2): loss <= b iff x >= x(-b).
    cdf_x, sf_x = _mixture_cdf_sf(_poisson_step_inverse(-bounds, sigma, q), sigma, 0.0, 0.0)
    return sf_x, cdf_x


def _interval_masses(bounds: np.ndarray, sigma: float, q: float, direction: Direction) -> np.ndarray:
    cdf, sf = _loss_cdf_sf(bounds, sigma, q, direction)
    # Differences of whichever side is small keep relative precision in the tails.
    from_cdf = np.diff(cdf)
    from_sf = -np.diff(sf)
    return np.clip(np.where(cdf[1:] < 0.5, from_cdf, from_sf), 0.0, None)


def poisson_pld_build(params: AccountingParams, sampling_prob: Optional[float] = None,
                      grid_step: float = DEFAULT_GRID_STEP,
                      rounding_mode: Rounding = Rounding.PESSIMISTIC,
                      direction: Direction = Direction.PQ,
                      tail_mass: float = DEFAULT_TAIL_MASS) -> PldDiscretization:
    """Discretized one-step PLD of the Poisson-subsampled Gaussian pair.

    PQ (add) uses the loss of (1-q) N(0, s^2) + q N(1, s^2) against N(0, s^2)
    under the mixture; QP (remove) the reverse under N(0, s^2). The x-range
    is cut where each tail holds at most `tail_mass`.

    Args:
      params: sigma is used; T sets the default sampling_prob = 1/T.
      sampling_prob: Poisson inclusion probability q in (0, 1].
      grid_step: Loss grid spacing.
      rounding_mode: PESSIMISTIC rounds losses up, OPTIMISTIC down.
      direction: PQ or QP.
      tail_mass: Truncated mass per tail.
    """
    q = 1.0 / params.T if sampling_prob is None else float(sampling_prob)
    if not 0 < q <= 1:
        raise ConfigurationError(f"sampling_prob must lie in (0, 1], got {q}")
    if not grid_step > 0:
        raise ConfigurationError(f"grid_step must be positive, got {grid_step}")
    if direction is Direction.BOTH:
        raise ConfigurationError("build one PLD per direction")
    sigma = params.sigma
    z = -special.ndtri(tail_mass)
    if direction is Direction.PQ:
        x_lo, x_hi = -sigma * z, 1.0 + sigma * z
        lo, hi = _poisson_step_loss([x_lo, x_hi], sigma, q)
    else:
        x_lo, x_hi = -sigma * z, sigma * z
        lo, hi = -_poisson_step_loss([x_hi, x_lo], sigma, q)
    rounder = math.ceil if rounding_mode is Rounding.PESSIMISTIC else math.floor
    i_lo, i_hi = rounder(lo / grid_step), rounder(hi / grid_step)
    if i_hi - i_lo + 1 > MAX_SUPPORT:
        raise GridOverflowError(f"one-step support needs {i_hi - i_lo + 1} cells; "
                                f"use a coarser grid_step than {grid_step}")
    if rounding_mode is Rounding.PESSIMISTIC:
        bounds = grid_step * np.arange(i_lo - 1, i_hi + 1, dtype=np.float64)
    else:
        bounds = grid_step * np.arange(i_lo, i_hi + 2, dtype=np.float64)
    masses = _interval_masses(bounds, sigma, q, direction)
    cdf, sf = _loss_cdf_sf(bounds[[0, -1]], sigma, q, direction)
    below, above = float(cdf[0]), float(sf[1])
    infinity = 0.0
    if rounding_mode is Rounding.PESSIMISTIC:
        masses[0] += below
        infinity = above
    else:
        masses[-1] += above
    return PldDiscretization(grid_step, i_lo, masses, infinity, rounding_mode, tail_mass)


def poisson_pld_compose_and_delta(pld: PldDiscretization, T_steps: int, epsilon: float) -> float:
    """delta(eps) of the T_steps-fold composition of `pld`."""
    return pld.compose(T_steps).delta(epsilon)


def poisson_delta_curve(params: AccountingParams, epsilons: Sequence[float],
                        rounding_mode: Rounding = Rounding.PESSIMISTIC,
                        grid_step: float = DEFAULT_GRID_STEP,
                        direction: Direction = Direction.BOTH,
                        sampling_prob: Optional[float] = None) -> list[float]:
    """delta over an epsilon grid for T * epochs Poisson steps (max over directions for BOTH)."""
    steps = params.T * params.epochs
    directions = [Direction.PQ, Direction.QP] if direction is Direction.BOTH else [direction]
    curves = []
    for d in directions:
        composed = poisson_pld_build(params, sampling_prob, grid_step, rounding_mode, d).compose(steps)
        curves.append([composed.delta(e) for e in epsilons])
    return [max(vals) for vals in zip(*curves)]


@dataclasses.dataclass(frozen=True)
class LowerBoundCertificate:
    """A witness C for delta(eps) >= P_B(max x >= C) - e^eps Q_B(max x >= C).

    `clamped` is set when no C gave a positive value; then C is +inf and the
    certified value is the trivial 0.
    """

    epsilon: float
    threshold: float
    value: float
    p_tail: float
    q_tail: float
    clamped: bool = False

    def to_dict(self) -> dict:
        finite = math.isfinite(self.threshold)
        return {"epsilon": self.epsilon, "threshold": self.threshold if finite else None,
                "value": self.value, "p_tail": self.p_tail, "q_tail": self.q_tail,
                "clamped": self.clamped}


def _log_neg_log_ndtr(z):
    """log(-log Phi(z)), accurate where Phi(z) rounds to 1."""
    z = np.asarray(z, dtype=np.float64)
    log_sf = _log_ndtr(-z)
    # -log Phi(z) = -log1p(-sf) = sf (1 + sf / 2 + ...) when sf is tiny.
    with np.errstate(divide="ignore"):
        direct = np.log(-_log_ndtr(z))
    return np.where(log_sf < -30.0, log_sf + 0.5 * np.exp(log_sf), direct)


def _log_one_minus_exp_neg(log_a):
    """log(1 - e^{-a}) given log a, without underflow for tiny a."""
    log_a = np.asarray(log_a, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        direct = np.log(-np.expm1(-np.exp(log_a)))
    return np.where(log_a < -30.0, log_a - 0.5 * np.exp(log_a), direct)


def bnb_tail_log_probabilities(params: AccountingParams, C):
    """(log P_B(S_C), log Q_B(S_C)) for S_C = {max_t x_t >= C}.

    Both tails are 1 - e^{-a} with a a sum of -log Phi terms, so working with
    log a keeps them accurate when a tail is far below double precision.
    """
    s, T = params.sigma, params.T
    C = np.asarray(C, dtype=np.float64)
    log_a0 = _log_neg_log_ndtr(C / s)
    log_a1 = _log_neg_log_ndtr((C - 1) / s)
    log_q = _log_one_minus_exp_neg(math.log(T) + log_a0)
    if T == 1:
        log_p = _log_one_minus_exp_neg(log_a1)
    else:
        log_p = _log_one_minus_exp_neg(np.logaddexp(log_a1, math.log(T - 1) + log_a0))
    return log_p, log_q


def bnb_tail_probabilities(params: AccountingParams, C):
    """(P_B(S_C), Q_B(S_C)) for S_C = {max_t x_t >= C}.

    Q_B(S_C) = 1 - Phi(C/s)^T; under P_B, by symmetry of the mixture,
    P_B(S_C) = 1 - Phi((C - 1)/s) Phi(C/s)^{T-1}.
    """
    log_p, log_q = bnb_tail_log_probabilities(params, C)
    return np.exp(log_p), np.exp(log_q)


def _lower_bound_value(params: AccountingParams, epsilon: float, C):
    """p - e^eps q, factored in log space so its sign survives underflow."""
    log_p, log_q = bnb_tail_log_probabilities(params, C)
    log_pen = epsilon + log_q
    with np.errstate(over="ignore", invalid="ignore"):
        gap = log_pen - log_p
        pos = np.exp(log_p) * -np.expm1(gap)
        neg = -np.exp(log_pen) * -np.expm1(-gap)
        value = np.where(gap < 0, pos, neg)
    # Both tails empty: nothing is certified.
    return np.where(np.isnan(value), 0.0, value)


def bnb_lower_bound(params: AccountingParams, epsilon: float, tol: float = 1e-6,
                    sweep_step: float = 1e-7) -> LowerBoundCertificate:
    """Maximizes P_B(S_C) - e^eps Q_B(S_C) over the threshold C.

    A coarse grid locates the best bracket, golden-section search narrows it
    to `tol`, and a sweep at `sweep_step` around the result guards against
    small-scale multimodality.
    """
    if params.epochs != 1:
        raise ConfigurationError("the threshold lower bound is single-epoch only")
    s, T = params.sigma, params.T
    lo = -10 * s
    hi = max(1 + 10 * s, 0.5 + s**2 * (epsilon + math.log(T)) + 10 * s)
    f = lambda c: _lower_bound_value(params, epsilon, c)

    grid = np.linspace(lo, hi, 4001)
    values = f(grid)
    j = int(np.argmax(values))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    inv_phi = (math.sqrt(5) - 1) / 2
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = float(f(c)), float(f(d))
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = float(f(c))
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = float(f(d))
    sweep = np.concatenate(([grid[j]], np.arange(a - tol, b + tol + sweep_step / 2, sweep_step)))
    sweep_values = f(sweep)
    k = int(np.argmax(sweep_values))
    best_c, best = float(sweep[k]), float(sweep_values[k])
    if not best > 0:
        return LowerBoundCertificate(epsilon, math.inf, 0.0, 0.0, 0.0, clamped=True)
    p_tail, q_tail = bnb_tail_probabilities(params, best_c)
    return LowerBoundCertificate(epsilon, best_c, best, float(p_tail), float(q_tail))


def shuffle_lower_bound(params: AccountingParams, epsilon: float, cfg: McConfig, rng,
                        direction: Direction = Direction.BOTH) -> DeltaEstimate:
    """Lower confidence bound on delta for shuffling, via its dominated pair.

    The dominated pair only certifies lower bounds, so the result carries
    `bound_kind = "lower_only"` and no upper bound.
    """
    return shuffle_lower_curve(params, [epsilon], cfg, rng, direction)[0]


def shuffle_lower_curve(params: AccountingParams, epsilons: Sequence[float], cfg: McConfig, rng,
                        direction: Direction = Direction.BOTH) -> list[DeltaEstimate]:
    if cfg.strategy is not Strategy.PLAIN:
        raise ConfigurationError("shuffle lower bounds use plain sampling")
    out = []
    for est in estimate_curve(PairId(PairKind.SHUFFLE, direction), params, epsilons, cfg, rng):
        comps = {d: dataclasses.replace(e, upper_p=None, bound_kind="lower_only")
                 for d, e in est.components.items()}
        out.append(dataclasses.replace(est, upper_p=None, bound_kind="lower_only", components=comps))
    return out
