"""Monte Carlo estimation of hockey-stick divergences with confidence bounds.

For a pair (P, Q) and direction PQ the target is
delta(eps) = E_{x~P}[1 - e^{eps - L(x)}]_+ with L = log(P/Q). The engine draws
m samples, averages the clipped integrand and inverts the Bernoulli KL to get
an upper bound that holds with probability at least 1 - beta.

Strategies:

* PLAIN: direct sampling (Balls-and-Bins PQ uses the symmetric component
  N(e_1, sigma^2 I)).
* IMPORTANCE: sample conditioned on an event E outside which the integrand
  vanishes, then scale by Pr[E].
* ORDER_STATS: sample a few order statistics of the T coordinates and use a
  loss surrogate that is never smaller than the true loss.
* COMBINED: both of the above.

Sampling is split into fixed-size chunks, chunk i drawing from substream i of
the direction's stream. Chunk sums are merged with an exact accumulator, so
the result depends only on the seed and never on how chunks are distributed
over worker processes.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import logging
import math
from typing import Optional, Sequence

import numpy as np

from bnb_accounting import kernels
from bnb_accounting.errors import ConfigurationError, UnsupportedConfigurationError
from bnb_accounting.losses import (AccountingParams, Direction, OrderSpec, PairId, PairKind,
                                   loss_bnb_pq, loss_bnb_qp, loss_deterministic, loss_poisson,
                                   loss_shuffle)
from bnb_accounting.numerics import RngStream, gaussian_inv_cdf_from_log, gaussian_log_cdf, kl_lcb, kl_ucb
from bnb_accounting.sampling import beta_log_draws, open_uniform, sample_max_coordinate

logger = logging.getLogger(__name__)

# Target number of float64 values drawn per chunk, and a cap on rows.
CHUNK_FLOAT_BUDGET = 2**20
CHUNK_MAX_ROWS = 2**14


class Strategy(enum.Enum):
    PLAIN = "plain"
    IMPORTANCE = "importance"
    ORDER_STATS = "order_stats"
    COMBINED = "combined"


@dataclasses.dataclass(frozen=True)
class McConfig:
    """Sampling budget and strategy.

    Attributes:
      m: Number of Monte Carlo samples per (epsilon, direction).
      beta: Failure probability of each reported upper bound.
      strategy: Sampling strategy.
      order_spec: Ranks used by ORDER_STATS and COMBINED. A full spec is
        expanded to the population size each direction needs; otherwise ranks
        beyond that population are dropped.
      workers: Worker processes. Results do not depend on this.
      chunk_size: Samples per chunk; derived from the problem size if None.
        Part of the stream assignment, so changing it changes the draws.
    """

    m: int
    beta: float = 1e-3
    strategy: Strategy = Strategy.PLAIN
    order_spec: Optional[OrderSpec] = None
    workers: int = 1
    chunk_size: Optional[int] = None

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError(f"m must be positive, got {self.m}")
        if not 0 < self.beta < 1:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be positive, got {self.workers}")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigurationError(f"chunk_size must be positive, got {self.chunk_size}")
        if self.strategy in (Strategy.ORDER_STATS, Strategy.COMBINED) and self.order_spec is None:
            raise ConfigurationError(f"strategy {self.strategy.value} needs an order_spec")


@dataclasses.dataclass(frozen=True)
class ImportanceEvent:
    """Event outside which the Balls-and-Bins integrand is zero.

    QP: {max_t x_t <= C}, x ~ N(0, sigma^2 I).
    PQ: {max(x_1 - 1, max_{t>1} x_t) >= C}, x ~ N(e_1, sigma^2 I).
    """

    direction: Direction
    threshold: float
    event_probability: float
    log_cdf_threshold: float  # log Phi_sigma(C)

    def contains(self, x) -> np.ndarray:
        """Event membership of realized points (rows of x)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.direction is Direction.QP:
            return x.max(axis=1) <= self.threshold
        shifted = x.copy()
        shifted[:, 0] -= 1.0
        return shifted.max(axis=1) >= self.threshold


def importance_event(params: AccountingParams, epsilon: float, direction: Direction) -> ImportanceEvent:
    """Builds the importance event for Balls-and-Bins at `epsilon`.

    QP: L_QP > eps forces every coordinate below 1/2 + sigma^2 (log T - eps).
    PQ: if the shifted maximum is below C the loss is at most
    C / sigma^2 + log(1 + (e^{1/sigma^2} - 1) / T) - 1 / (2 sigma^2), which
    equals eps at the chosen C.
    """
    sigma, T, iv = params.sigma, params.T, params.inv_var
    if direction is Direction.QP:
        C = 0.5 + sigma**2 * (math.log(T) - epsilon)
        log_cdf = float(gaussian_log_cdf(C, sigma))
        prob = math.exp(T * log_cdf)
    elif direction is Direction.PQ:
        # log(1 + (e^{iv} - 1) / T) without overflowing e^{iv}.
        if T == 1:
            log_growth = iv
        else:
            log_growth = float(np.logaddexp(math.log1p(-1.0 / T), iv - math.log(T)))
        C = 0.5 + sigma**2 * (epsilon - log_growth)
        log_cdf = float(gaussian_log_cdf(C, sigma))
        prob = -math.expm1(T * log_cdf)
    else:
        raise ConfigurationError("an importance event needs a single direction")
    return ImportanceEvent(direction, C, min(1.0, max(0.0, prob)), log_cdf)


class ExactSum:
    """Exact running sum of floats as a list of nonoverlapping partials.

    The represented value is exact (barring overflow), so the rounded total
    does not depend on the order in which values or other sums are added.
    """

    def __init__(self, values: Sequence[float] = ()):
        self.partials: list[float] = []
        for v in values:
            self.add(v)

    def add(self, x: float):
        partials = self.partials
        i = 0
        x = float(x)
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]

    def merge(self, other: ExactSum):
        for p in other.partials:
            self.add(p)

    @property
    def value(self) -> float:
        return math.fsum(self.partials)


@dataclasses.dataclass(frozen=True)
class RunKey:
    """Everything that must agree for two partial sums to be pooled."""

    kind: PairKind
    direction: Direction
    sigma: float
    T: int
    epochs: int
    strategy: Strategy
    orders_digest: int
    chunk_size: int
    epsilon: float
    seed: int


@dataclasses.dataclass
class PartialSum:
    """Sum and sum of squares of the clipped integrand over `count` samples."""

    key: RunKey
    count: int
    total: ExactSum
    total_sq: ExactSum


@dataclasses.dataclass
class DeltaEstimate:
    """A Monte Carlo estimate of delta(eps) with a (1 - beta) upper bound.

    For importance strategies all of mean_q, upper_p, lower and std_error are
    already multiplied by `event_probability`. `certificate` is
    "event_underflow" when Pr[E] is zero in double precision, in which case
    the reported zero is the exact bound Pr[E] rather than a sample average.
    """

    epsilon: float
    direction: Direction
    mean_q: float
    upper_p: Optional[float]
    lower: Optional[float]
    m_used: int
    beta_used: float
    strategy_used: Strategy
    seed: int
    pair: PairKind = PairKind.BALLS_BINS
    event_probability: float = 1.0
    std_error: float = 0.0
    certificate: Optional[str] = None
    bound_kind: str = "upper"
    components: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "epsilon": self.epsilon,
            "direction": self.direction.value,
            "mean": self.mean_q,
            "upper": self.upper_p,
            "lower": self.lower,
            "std_error": self.std_error,
            "event_probability": self.event_probability,
            "certificate": self.certificate,
            "bound_kind": self.bound_kind,
            "m": self.m_used,
            "beta": self.beta_used,
            "strategy": self.strategy_used.value,
            "seed": self.seed,
            "pair": self.pair.value,
        }
        if self.components:
            out["components"] = {d.value: e.to_dict() for d, e in self.components.items()}
        return out


def merge_estimates(partials: Sequence[PartialSum], beta: float, scaling: float = 1.0) -> DeltaEstimate:
    """Pools partial sums from disjoint streams and applies the KL bound once.

    Args:
      partials: Partial sums computed under one RunKey.
      beta: Failure probability of the pooled bound.
      scaling: Multiplier for the pooled statistics (Pr[E] under importance
        sampling).

    Raises:
      ConfigurationError: If the partials disagree on their RunKey or none
        are given.
    """
    if not partials:
        raise ConfigurationError("nothing to merge")
    key = partials[0].key
    for p in partials[1:]:
        if p.key != key:
            raise ConfigurationError(f"cannot merge partial sums of different runs: {p.key} vs {key}")
    total, total_sq = ExactSum(), ExactSum()
    m = 0
    for p in partials:
        total.merge(p.total)
        total_sq.merge(p.total_sq)
        m += p.count
    mean = min(1.0, max(0.0, total.value / m))
    var = max(0.0, total_sq.value / m - mean * mean) * (m / (m - 1) if m > 1 else 0.0)
    return DeltaEstimate(
        epsilon=key.epsilon,
        direction=key.direction,
        mean_q=mean * scaling,
        upper_p=kl_ucb(mean, m, beta) * scaling,
        lower=kl_lcb(mean, m, beta) * scaling,
        m_used=m,
        beta_used=beta,
        strategy_used=key.strategy,
        seed=key.seed,
        pair=key.kind,
        event_probability=scaling,
        std_error=math.sqrt(var / m) * scaling,
    )


# -- per-direction sampling plans ---------------------------------------------


@dataclasses.dataclass(frozen=True)
class _Plan:
    """Read-only description of what one chunk of samples looks like."""

    kind: PairKind
    direction: Direction
    params: AccountingParams
    strategy: Strategy
    epsilons: tuple[float, ...]
    chunk_rows: int
    m: int
    stream: RngStream
    event: Optional[ImportanceEvent] = None
    spec: Optional[OrderSpec] = None  # population T (QP) or T - 1 (PQ)
    spec_inner: Optional[OrderSpec] = None  # population T - 2, combined PQ only

    @property
    def n_chunks(self) -> int:
        return -(-self.m // self.chunk_rows)

    def rows_in(self, chunk: int) -> int:
        return min(self.chunk_rows, self.m - chunk * self.chunk_rows)

    def key(self, epsilon: float) -> RunKey:
        digest = hash(self.spec.orders) if self.spec is not None else 0
        return RunKey(self.kind, self.direction, self.params.sigma, self.params.T,
                      self.params.epochs, self.strategy, digest, self.chunk_rows, epsilon,
                      self.stream.seed)


def _resolve_spec(spec: OrderSpec, R: int, need_top: bool) -> OrderSpec:
    if R == 0:
        return OrderSpec((), 0)
    if spec.is_full():
        return OrderSpec.full(R)
    resolved = OrderSpec(tuple(k for k in spec.orders if k <= R), R) if spec.orders[-1] > R else (
        OrderSpec(spec.orders, R))
    if not resolved.orders:
        raise ConfigurationError(f"no listed rank fits a population of {R}")
    if need_top and resolved.orders[0] != 1:
        raise ConfigurationError("PQ order statistics need rank 1 (k_1 = 1)")
    return resolved


def _check_spec_population(spec: OrderSpec, T: int):
    if spec.R not in (T - 1, T):
        raise ConfigurationError(f"order spec is for R = {spec.R}; expected T - 1 or T with T = {T}")


def _row_width(plan: _Plan) -> int:
    T, k = plan.params.T, plan.params.epochs
    if plan.strategy is Strategy.PLAIN:
        return k * (1 if plan.kind is PairKind.DETERMINISTIC else 2 * T)
    if plan.strategy is Strategy.IMPORTANCE:
        return 3 * T
    return k * 2 * (len(plan.spec.orders) + 2)


def _check_strategy(kind: PairKind, params: AccountingParams, strategy: Strategy):
    if strategy is not Strategy.PLAIN and kind is not PairKind.BALLS_BINS:
        raise UnsupportedConfigurationError(
            f"strategy {strategy.value} is only defined for the Balls-and-Bins pair")
    if strategy in (Strategy.IMPORTANCE, Strategy.COMBINED) and params.epochs > 1:
        raise UnsupportedConfigurationError(
            f"strategy {strategy.value} does not support multiple epochs")


def _make_plan(kind: PairKind, direction: Direction, params: AccountingParams,
               epsilons: tuple[float, ...], cfg: McConfig, stream: RngStream) -> _Plan:
    T = params.T
    event = spec = spec_inner = None
    if cfg.strategy in (Strategy.IMPORTANCE, Strategy.COMBINED):
        if len(epsilons) != 1:
            raise ConfigurationError("importance sampling plans take a single epsilon")
        event = importance_event(params, epsilons[0], direction)
    if cfg.strategy in (Strategy.ORDER_STATS, Strategy.COMBINED):
        _check_spec_population(cfg.order_spec, T)
        if direction is Direction.QP:
            spec = _resolve_spec(cfg.order_spec, T, need_top=False)
        else:
            spec = _resolve_spec(cfg.order_spec, T - 1, need_top=True)
            if cfg.strategy is Strategy.COMBINED and T >= 2:
                spec_inner = _resolve_spec(cfg.order_spec, T - 2, need_top=True)
    plan = _Plan(kind, direction, params, cfg.strategy, epsilons, 1, cfg.m, stream, event, spec,
                 spec_inner)
    rows = cfg.chunk_size or max(1, min(CHUNK_MAX_ROWS, CHUNK_FLOAT_BUDGET // _row_width(plan)))
    return dataclasses.replace(plan, chunk_rows=rows)


# -- loss draws ----------------------------------------------------------------


def draw_plain_points(kind: PairKind, direction: Direction, params: AccountingParams,
                      gen: np.random.Generator, rows: int) -> np.ndarray:
    """Draws from the first distribution of the directed pair.

    PQ draws come from P, using the component N(e_1, ...) for the symmetric
    mixtures; QP draws come from Q. Returns shape (rows, T), or (rows,) for
    the scalar deterministic pair.
    """
    sigma, T = params.sigma, params.T
    pq = direction is Direction.PQ
    if kind is PairKind.DETERMINISTIC:
        z = gen.standard_normal(rows) * sigma
        return z + 1.0 if pq else z
    x = gen.standard_normal((rows, T)) * sigma
    if kind is PairKind.BALLS_BINS:
        if pq:
            x[:, 0] += 1.0
    elif kind is PairKind.POISSON:
        if pq:
            x += gen.random((rows, T)) < 1.0 / T
    else:
        x[:, 0] += 2.0 if pq else 1.0
    return x


def _plain_loss(kind: PairKind, direction: Direction, params: AccountingParams, x) -> np.ndarray:
    if kind is PairKind.BALLS_BINS:
        return loss_bnb_pq(x, params) if direction is Direction.PQ else loss_bnb_qp(x, params)
    if kind is PairKind.DETERMINISTIC:
        return loss_deterministic(x, params, direction)
    if kind is PairKind.POISSON:
        return loss_poisson(x, params, direction)
    return loss_shuffle(x, params, direction)


def draw_importance_points(event: ImportanceEvent, params: AccountingParams,
                           gen: np.random.Generator, rows: int) -> np.ndarray:
    """Draws Balls-and-Bins points conditioned on the importance event."""
    sigma, T = params.sigma, params.T
    if event.direction is Direction.QP:
        log_u = np.log(open_uniform(gen, (rows, T)))
        return kernels.quantile_rows(log_u, np.full(rows, event.log_cdf_threshold), sigma, False)
    top, log_cdf_top = sample_max_coordinate(T, event.threshold, sigma, gen, rows)
    where = gen.integers(0, T, size=rows)
    log_u = np.log(open_uniform(gen, (rows, T)))
    x = kernels.quantile_rows(log_u, log_cdf_top, sigma, False)
    x[np.arange(rows), where] = top
    x[:, 0] += 1.0
    return x


def _order_stat_lse(log_z: np.ndarray, log_caps: np.ndarray, spec: OrderSpec,
                    params: AccountingParams, upper: bool) -> np.ndarray:
    weights = spec.upper_weights() if upper else spec.lower_weights()
    return kernels.quantile_log_sum_rows(log_z, log_caps, params.sigma, params.inv_var,
                                         np.log(weights.astype(np.float64)), True)


def _draw_log_z(spec: OrderSpec, gen: np.random.Generator, rows: int) -> np.ndarray:
    a, b = spec.beta_parameters()
    return beta_log_draws(gen, a, b, (rows, len(spec.orders)))


def _order_stats_losses(plan: _Plan, gen: np.random.Generator, rows: int) -> np.ndarray:
    params, spec = plan.params, plan.spec
    iv, log_t = params.inv_var, math.log(params.T)
    if plan.direction is Direction.QP:
        lse = _order_stat_lse(_draw_log_z(spec, gen, rows), np.zeros(rows), spec, params, False)
        return log_t + 0.5 * iv - lse
    x1 = 1.0 + params.sigma * gen.standard_normal(rows)
    lse = x1 * iv
    if spec.R > 0:
        rest = _order_stat_lse(_draw_log_z(spec, gen, rows), np.zeros(rows), spec, params, True)
        lse = np.logaddexp(lse, rest)
    return lse - log_t - 0.5 * iv


@dataclasses.dataclass
class CombinedPqDraw:
    """Realized coordinates of combined PQ draws (shifted: x_1 - 1 is stored).

    `top` is the conditioned maximum y*, placed at coordinate 1 when
    `first` is set. `first_shifted` is x_1 - 1 (equal to `top` when `first`).
    `rest_max` is the largest remaining order statistic (-inf if none).
    """

    top: np.ndarray
    first: np.ndarray
    first_shifted: np.ndarray
    rest_max: np.ndarray
    losses: np.ndarray


def draw_combined_pq(event: ImportanceEvent, params: AccountingParams, spec: OrderSpec,
                     spec_inner: Optional[OrderSpec], gen: np.random.Generator,
                     rows: int) -> CombinedPqDraw:
    """Combined importance and order-statistics draws for the PQ direction.

    With y* the conditioned maximum at a uniform coordinate t*: if t* = 1,
    x_1 = y* + 1 and the other T - 1 coordinates are order statistics
    truncated at y*. Otherwise x_2 = y*, x_1 - 1 is a Gaussian truncated at
    y*, and the remaining T - 2 coordinates are truncated order statistics.
    """
    sigma, T, iv = params.sigma, params.T, params.inv_var
    top, log_cdf_top = sample_max_coordinate(T, event.threshold, sigma, gen, rows)
    first = gen.integers(0, T, size=rows) == 0
    first_shifted = top.copy()
    rest_lse = np.full(rows, -np.inf)
    rest_max = np.full(rows, -np.inf)

    idx = np.flatnonzero(first)
    if idx.size and spec.R > 0:
        log_z = _draw_log_z(spec, gen, idx.size)
        rest_lse[idx] = _order_stat_lse(log_z, log_cdf_top[idx], spec, params, True)
        rest_max[idx] = gaussian_inv_cdf_from_log(log_z[:, 0] + log_cdf_top[idx], sigma)
    idx = np.flatnonzero(~first)
    if idx.size:
        caps = log_cdf_top[idx]
        first_shifted[idx] = gaussian_inv_cdf_from_log(np.log(open_uniform(gen, idx.size)) + caps, sigma)
        lse = top[idx] * iv
        if spec_inner.R > 0:
            log_z = _draw_log_z(spec_inner, gen, idx.size)
            lse = np.logaddexp(lse, _order_stat_lse(log_z, caps, spec_inner, params, True))
            rest_max[idx] = np.maximum(top[idx], gaussian_inv_cdf_from_log(log_z[:, 0] + caps, sigma))
        else:
            rest_max[idx] = top[idx]
        rest_lse[idx] = lse
    total = np.logaddexp((first_shifted + 1.0) * iv, rest_lse)
    losses = total - math.log(T) - 0.5 * iv
    return CombinedPqDraw(top, first, first_shifted, rest_max, losses)


def _combined_qp_losses(plan: _Plan, gen: np.random.Generator, rows: int) -> np.ndarray:
    params, spec = plan.params, plan.spec
    caps = np.full(rows, plan.event.log_cdf_threshold)
    lse = _order_stat_lse(_draw_log_z(spec, gen, rows), caps, spec, params, False)
    return math.log(params.T) + 0.5 * params.inv_var - lse


def _draw_losses(plan: _Plan, gen: np.random.Generator, rows: int) -> np.ndarray:
    k = plan.params.epochs
    if plan.strategy is Strategy.PLAIN:
        x = draw_plain_points(plan.kind, plan.direction, plan.params, gen, rows * k)
        per_epoch = np.asarray(_plain_loss(plan.kind, plan.direction, plan.params, x))
        return per_epoch.reshape(rows, k).sum(axis=1)
    if plan.strategy is Strategy.ORDER_STATS:
        return _order_stats_losses(plan, gen, rows * k).reshape(rows, k).sum(axis=1)
    if plan.strategy is Strategy.IMPORTANCE:
        x = draw_importance_points(plan.event, plan.params, gen, rows)
        return np.asarray(_plain_loss(plan.kind, plan.direction, plan.params, x))
    if plan.direction is Direction.QP:
        return _combined_qp_losses(plan, gen, rows)
    return draw_combined_pq(plan.event, plan.params, plan.spec, plan.spec_inner, gen, rows).losses


# -- chunked execution -----------------------------------------------------------


def _run_chunks(plan: _Plan, chunks: Sequence[int]) -> list[PartialSum]:
    """Processes the given chunks; returns one PartialSum per epsilon."""
    eps = np.asarray(plan.epsilons, dtype=np.float64)
    sums = [ExactSum() for _ in eps]
    sqs = [ExactSum() for _ in eps]
    count = 0
    for c in chunks:
        rows = plan.rows_in(c)
        gen = plan.stream.substream(c).generator()
        losses = _draw_losses(plan, gen, rows)
        count += rows
        for j, e in enumerate(eps):
            with np.errstate(over="ignore"):  # expm1 overflow at huge epsilon clamps to 0
                vals = np.maximum(0.0, -np.expm1(e - losses))
            sums[j].add(math.fsum(vals))
            sqs[j].add(math.fsum(vals * vals))
    return [PartialSum(plan.key(float(e)), count, s, q) for e, s, q in zip(eps, sums, sqs)]


def _execute(plan: _Plan, workers: int) -> list[list[PartialSum]]:
    n = plan.n_chunks
    workers = min(workers, n)
    if workers <= 1:
        return [_run_chunks(plan, range(n))]
    blocks = [range(i, n, workers) for i in range(workers)]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_chunks, [plan] * workers, blocks))


def _as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"expected an RngStream or integer seed, got {type(rng)!r}")


_DIRECTION_STREAM = {Direction.PQ: 0, Direction.QP: 1}


def _estimate_direction(kind: PairKind, direction: Direction, params: AccountingParams,
                        epsilons: Sequence[float], cfg: McConfig, stream: RngStream) -> list[DeltaEstimate]:
    sub = stream.substream(_DIRECTION_STREAM[direction])
    epsilons = tuple(float(e) for e in epsilons)
    if cfg.strategy in (Strategy.IMPORTANCE, Strategy.COMBINED):
        out = []
        for e in epsilons:
            plan = _make_plan(kind, direction, params, (e,), cfg, sub)
            prob = plan.event.event_probability
            if prob <= 0.0:
                logger.info("event probability underflows at eps=%g (%s); reporting zero",
                            e, direction.value)
                out.append(DeltaEstimate(e, direction, 0.0, 0.0, 0.0, 0, cfg.beta, cfg.strategy,
                                         stream.seed, kind, 0.0, 0.0, "event_underflow"))
                continue
            parts = [p[0] for p in _execute(plan, cfg.workers)]
            out.append(merge_estimates(parts, cfg.beta, prob))
        return out
    plan = _make_plan(kind, direction, params, epsilons, cfg, sub)
    per_worker = _execute(plan, cfg.workers)
    return [merge_estimates([w[j] for w in per_worker], cfg.beta) for j in range(len(epsilons))]


def combine_directions(pq: DeltaEstimate, qp: DeltaEstimate) -> DeltaEstimate:
    """Reports the larger of the two directions, bound by bound."""

    def top(a, b):
        if a is None or b is None:
            return None
        return max(a, b)

    lead = pq if pq.mean_q >= qp.mean_q else qp
    certs = sorted({c for c in (pq.certificate, qp.certificate) if c})
    return dataclasses.replace(
        lead,
        direction=Direction.BOTH,
        mean_q=max(pq.mean_q, qp.mean_q),
        upper_p=top(pq.upper_p, qp.upper_p),
        lower=top(pq.lower, qp.lower),
        m_used=max(pq.m_used, qp.m_used),
        certificate=",".join(certs) or None,
        components={Direction.PQ: pq, Direction.QP: qp},
    )


def estimate_curve(pair: PairId, params: AccountingParams, epsilons: Sequence[float], cfg: McConfig,
                   rng) -> list[DeltaEstimate]:
    """Estimates delta at each epsilon with the strategy in `cfg`.

    PLAIN and ORDER_STATS reuse one set of samples for the whole grid, so the
    estimates are on common random numbers; the importance strategies sample
    afresh per epsilon because the event depends on it. Each reported bound
    carries its own failure probability beta, without correction for the grid.
    """
    _check_strategy(pair.kind, params, cfg.strategy)
    stream = _as_stream(rng)
    if pair.direction is not Direction.BOTH:
        return _estimate_direction(pair.kind, pair.direction, params, epsilons, cfg, stream)
    pq = _estimate_direction(pair.kind, Direction.PQ, params, epsilons, cfg, stream)
    qp = _estimate_direction(pair.kind, Direction.QP, params, epsilons, cfg, stream)
    return [combine_directions(a, b) for a, b in zip(pq, qp)]


def _require(cfg: McConfig, *allowed: Strategy):
    if cfg.strategy not in allowed:
        names = ", ".join(s.value for s in allowed)
        raise ConfigurationError(f"expected strategy in ({names}), got {cfg.strategy.value}")


def _single(pair, params, epsilon, cfg, rng) -> DeltaEstimate:
    return estimate_curve(pair, params, [epsilon], cfg, rng)[0]


def estimate_plain(pair: PairId, params: AccountingParams, epsilon: float, cfg: McConfig,
                   rng) -> DeltaEstimate:
    """Direct Monte Carlo estimate of delta(epsilon)."""
    _require(cfg, Strategy.PLAIN)
    return _single(pair, params, epsilon, cfg, rng)


def estimate_importance(pair: PairId, params: AccountingParams, epsilon: float, cfg: McConfig,
                        rng) -> DeltaEstimate:
    """Importance-sampled estimate for Balls-and-Bins, scaled by Pr[E]."""
    _require(cfg, Strategy.IMPORTANCE)
    return _single(pair, params, epsilon, cfg, rng)


def estimate_order_stats(pair: PairId, params: AccountingParams, epsilon: float, cfg: McConfig,
                         rng) -> DeltaEstimate:
    """Conservative estimate from order-statistic surrogates of the loss."""
    _require(cfg, Strategy.ORDER_STATS)
    return _single(pair, params, epsilon, cfg, rng)


def estimate_combined(pair: PairId, params: AccountingParams, epsilon: float, cfg: McConfig,
                      rng) -> DeltaEstimate:
    """Importance sampling with order-statistic surrogates (single epoch)."""
    _require(cfg, Strategy.COMBINED)
    return _single(pair, params, epsilon, cfg, rng)


def estimate_multi_epoch(pair: PairId, params: AccountingParams, epsilon: float, cfg: McConfig,
                         rng) -> DeltaEstimate:
    """Estimate for `params.epochs` composed epochs; per-epoch losses are summed."""
    if cfg.strategy in (Strategy.IMPORTANCE, Strategy.COMBINED) and params.epochs > 1:
        raise UnsupportedConfigurationError(
            f"strategy {cfg.strategy.value} does not support multiple epochs")
    _require(cfg, Strategy.PLAIN, Strategy.ORDER_STATS)
    return _single(pair, params, epsilon, cfg, rng)


def estimate(pair: PairId, params: AccountingParams, epsilon: float, cfg: McConfig, rng) -> DeltaEstimate:
    """Dispatches on `cfg.strategy`."""
    return _single(pair, params, epsilon, cfg, rng)
