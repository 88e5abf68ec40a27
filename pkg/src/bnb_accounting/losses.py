"""Dominating pairs and their privacy loss functions.

Pairs, all over R^T with coordinates of variance sigma^2:

* Balls-and-Bins: P = (1/T) sum_t N(e_t, sigma^2 I), Q = N(0, sigma^2 I).
* Deterministic: P = N(1, sigma^2), Q = N(0, sigma^2) (scalar).
* Poisson: P = ((1 - q) N(0, sigma^2) + q N(1, sigma^2))^{(x)T}, Q = N(0, sigma^2 I).
* Shuffle (dominated by the mechanism, so only useful for lower bounds):
  P = (1/T) sum_t N(2 e_t, sigma^2 I), Q = (1/T) sum_t N(e_t, sigma^2 I).

Direction PQ means L = log(P/Q) evaluated on draws from P; QP is the reverse.
Loss functions accept a single point (shape (T,)) or a batch (shape (N, T)).
"""

from __future__ import annotations

import dataclasses
import enum
import math
import re
from typing import Optional, Sequence

import numpy as np

from bnb_accounting import kernels
from bnb_accounting.errors import ConfigurationError


class PairKind(enum.Enum):
    BALLS_BINS = "bnb"
    DETERMINISTIC = "deterministic"
    POISSON = "poisson"
    SHUFFLE = "shuffle"


class Direction(enum.Enum):
    PQ = "pq"
    QP = "qp"
    BOTH = "both"


@dataclasses.dataclass(frozen=True)
class AccountingParams:
    sigma: float
    T: int
    epochs: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if self.T < 1:
            raise ConfigurationError(f"T must be at least 1, got {self.T}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be at least 1, got {self.epochs}")

    @property
    def inv_var(self) -> float:
        return 1.0 / self.sigma**2


@dataclasses.dataclass(frozen=True)
class PairId:
    """A pair and the direction of the divergence; BOTH means the max of the two."""

    kind: PairKind
    direction: Direction


@dataclasses.dataclass
class LossSample:
    """A loss value (scalar or per-draw array), possibly a certified upper bound."""

    value: float | np.ndarray
    is_surrogate: bool = False


@dataclasses.dataclass(frozen=True)
class OrderSpec:
    """Strictly increasing ranks 1 <= k_1 < ... < k_r <= R (rank 1 is the largest)."""

    orders: tuple[int, ...]
    R: int

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(int(k) for k in self.orders))
        if self.R < 0:
            raise ConfigurationError(f"R must be nonnegative, got {self.R}")
        if self.R == 0:
            if self.orders:
                raise ConfigurationError("orders must be empty when R = 0")
            return
        if not self.orders:
            raise ConfigurationError("orders must be nonempty")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ConfigurationError(f"orders must be strictly increasing: {self.orders[:10]}...")
        if self.orders[0] < 1 or self.orders[-1] > self.R:
            raise ConfigurationError(
                f"orders must lie in [1, {self.R}], got {self.orders[0]}..{self.orders[-1]}")

    @classmethod
    def full(cls, R: int) -> OrderSpec:
        return cls(tuple(range(1, R + 1)), R)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.orders, dtype=np.int64)

    def is_full(self) -> bool:
        return len(self.orders) == self.R

    def restrict(self, R: int) -> OrderSpec:
        """Same ranks, dropping those above a smaller population size R."""
        return OrderSpec(tuple(k for k in self.orders if k <= R), R)

    def lower_weights(self) -> np.ndarray:
        """k_i - k_{i-1} with k_0 = 0: counts for a lower bound on sum_t e^{x_t}."""
        k = self.array
        return np.diff(np.concatenate(([0], k)))

    def upper_weights(self) -> np.ndarray:
        """k_{i+1} - k_i with k_{r+1} = R + 1: counts for an upper bound.

        Rank k_i stands in for ranks k_i..k_{i+1}-1, and the last listed rank
        covers everything down to rank R, hence the R + 1 sentinel.
        """
        if self.orders and self.orders[0] != 1:
            raise ConfigurationError("upper-bound weights require k_1 = 1")
        k = self.array
        return np.diff(np.concatenate((k, [self.R + 1])))

    def beta_parameters(self) -> tuple[np.ndarray, np.ndarray]:
        """(R - k_i + 1, k_i - k_{i-1}) for the sequential Beta draws."""
        k = self.array
        return (self.R - k + 1).astype(np.float64), self.lower_weights().astype(np.float64)


_RANGE_RE = re.compile(r"^\s*(\d+)(?:\s*\.\.\s*(\d+)(?:\s*:\s*(\d+))?)?\s*$")


def parse_orders(text: str) -> tuple[int, ...]:
    """Parses a compact rank list such as "1..400,410..1000:10,1100..10000:100".

    Each comma-separated item is a single rank or an inclusive range a..b with
    optional step (default 1).
    """
    out: list[int] = []
    for item in text.split(","):
        if not item.strip():
            continue
        m = _RANGE_RE.match(item)
        if not m:
            raise ConfigurationError(f"cannot parse order item {item!r}")
        start = int(m.group(1))
        stop = int(m.group(2)) if m.group(2) else start
        step = int(m.group(3)) if m.group(3) else 1
        if step < 1 or stop < start:
            raise ConfigurationError(f"bad order range {item!r}")
        out.extend(range(start, stop + 1, step))
    return tuple(out)


def _as_rows(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ConfigurationError(f"expected a vector or a batch of vectors, got shape {arr.shape}")
    return arr, False


def _unwrap(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def _check_dim(rows: np.ndarray, T: int):
    if rows.shape[1] != T:
        raise ConfigurationError(f"expected vectors of length T={T}, got {rows.shape[1]}")


def loss_bnb_pq(x, params: AccountingParams):
    """log(sum_t e^{x_t / sigma^2}) - log T - 1 / (2 sigma^2)."""
    rows, single = _as_rows(x)
    _check_dim(rows, params.T)
    lse = kernels.log_sum_exp_rows(rows, params.inv_var)
    return _unwrap(lse - math.log(params.T) - 0.5 * params.inv_var, single)


def loss_bnb_qp(x, params: AccountingParams):
    pq = loss_bnb_pq(x, params)
    return -pq


def loss_deterministic(x, params: AccountingParams, direction: Direction):
    """Scalar Gaussian pair N(1, sigma^2) vs N(0, sigma^2): (2x - 1) / (2 sigma^2)."""
    value = (2 * np.asarray(x, dtype=np.float64) - 1) * 0.5 * params.inv_var
    if direction is Direction.QP:
        value = -value
    return float(value) if np.ndim(value) == 0 else value


def loss_poisson(x, params: AccountingParams, direction: Direction,
                 sampling_prob: Optional[float] = None):
    """sum_t log(1 - q + q e^{(2 x_t - 1) / (2 sigma^2)}), negated for QP."""
    q = 1.0 / params.T if sampling_prob is None else sampling_prob
    rows, single = _as_rows(x)
    _check_dim(rows, params.T)
    z = (2 * rows - 1) * 0.5 * params.inv_var
    if q >= 1:
        per = z
    else:
        per = np.logaddexp(math.log1p(-q), math.log(q) + z)
    value = per.sum(axis=1)
    if direction is Direction.QP:
        value = -value
    return _unwrap(value, single)


def loss_shuffle(x, params: AccountingParams, direction: Direction):
    """Log density ratio of the two shifted Gaussian mixtures.

    With |x - 2 e_t|^2 = |x|^2 - 4 x_t + 4 and |x - e_t|^2 = |x|^2 - 2 x_t + 1,
    L = lse_t((2 x_t - 2) / sigma^2) - lse_t((2 x_t - 1) / (2 sigma^2)).
    """
    rows, single = _as_rows(x)
    _check_dim(rows, params.T)
    iv = params.inv_var
    num = kernels.log_sum_exp_rows(rows, 2 * iv) - 2 * iv
    den = kernels.log_sum_exp_rows(rows, iv) - 0.5 * iv
    value = num - den
    if direction is Direction.QP:
        value = -value
    return _unwrap(value, single)


def _check_nonincreasing(values: np.ndarray):
    if values.shape[1] > 1 and np.any(np.diff(values, axis=1) > 0):
        raise ConfigurationError("order statistics must be nonincreasing")


def loss_surrogate_upper_qp(order_values, spec: OrderSpec, params: AccountingParams) -> LossSample:
    """Upper bound on the QP Balls-and-Bins loss from selected order statistics.

    Uses sum_t e^{x_t / sigma^2} >= sum_i (k_i - k_{i-1}) e^{y_(k_i) / sigma^2}
    with R = T coordinates.
    """
    rows, single = _as_rows(order_values)
    if spec.R != params.T:
        raise ConfigurationError(f"QP surrogate needs R = T = {params.T}, got R = {spec.R}")
    if rows.shape[1] != len(spec.orders):
        raise ConfigurationError("one order value per rank is required")
    _check_nonincreasing(rows)
    lse = kernels.log_sum_exp_rows(rows, params.inv_var, np.log(spec.lower_weights()))
    value = math.log(params.T) + 0.5 * params.inv_var - lse
    return LossSample(_unwrap(value, single), is_surrogate=True)


def loss_surrogate_upper_pq(x1, order_values, spec: OrderSpec, params: AccountingParams,
                            extra=None) -> LossSample:
    """Upper bound on the PQ Balls-and-Bins loss.

    Uses sum_{t>1} e^{x_t / sigma^2} <= sum_i (k_{i+1} - k_i) e^{y_(k_i) / sigma^2}
    over the remaining coordinates, with the first coordinate x1 (and any
    `extra` exact coordinates) kept as is. Requires k_1 = 1.
    """
    rows, single = _as_rows(order_values)
    if spec.orders and spec.orders[0] != 1:
        raise ConfigurationError("the PQ surrogate requires k_1 = 1")
    n_exact = 1 + (0 if extra is None else np.shape(extra)[-1])
    if spec.R != params.T - n_exact:
        raise ConfigurationError(
            f"PQ surrogate needs R = T - {n_exact} = {params.T - n_exact}, got R = {spec.R}")
    if rows.shape[1] != len(spec.orders):
        raise ConfigurationError("one order value per rank is required")
    _check_nonincreasing(rows)
    x1 = np.atleast_1d(np.asarray(x1, dtype=np.float64))
    exact = x1[:, None]
    if extra is not None:
        exact = np.concatenate([exact, np.atleast_2d(np.asarray(extra, dtype=np.float64))], axis=1)
    lse = kernels.log_sum_exp_rows(exact, params.inv_var)
    if rows.shape[1]:
        lse = np.logaddexp(lse, kernels.log_sum_exp_rows(
            rows, params.inv_var, np.log(spec.upper_weights())))
    value = lse - math.log(params.T) - 0.5 * params.inv_var
    return LossSample(_unwrap(value, single and x1.size == 1), is_surrogate=True)


def loss_multi_epoch(per_epoch_losses: Sequence[float] | np.ndarray):
    """Loss of the k-fold product pair: the sum of per-epoch losses (last axis)."""
    arr = np.asarray(per_epoch_losses, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise ConfigurationError("at least one epoch loss is required")
    total = arr.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def loss_function(pair: PairId, params: AccountingParams):
    """Returns a callable mapping a batch of points (N, T) to losses (N,)."""
    kind, direction = pair.kind, pair.direction
    if direction is Direction.BOTH:
        raise ConfigurationError("a loss function needs a single direction, PQ or QP")
    if kind is PairKind.BALLS_BINS:
        return (lambda x: loss_bnb_pq(x, params)) if direction is Direction.PQ else (
            lambda x: loss_bnb_qp(x, params))
    if kind is PairKind.DETERMINISTIC:
        return lambda x: loss_deterministic(np.asarray(x)[:, 0], params, direction)
    if kind is PairKind.POISSON:
        return lambda x: loss_poisson(x, params, direction)
    return lambda x: loss_shuffle(x, params, direction)


def pair_dimension(kind: PairKind, params: AccountingParams) -> int:
    return 1 if kind is PairKind.DETERMINISTIC else params.T
