"""Samplers for conditioned Gaussian vectors and Gaussian order statistics.

All samplers work on the CDF scale in log space: a Gaussian draw conditioned
to lie below c is Phi^{-1}(U * Phi(c)), i.e. the quantile of
log U + log Phi(c). Quantiles are taken with `gaussian_inv_cdf_from_log`,
which stays accurate when the CDF value is within 1e-16 of 1.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from bnb_accounting import kernels
from bnb_accounting.errors import TailUnderflowError
from bnb_accounting.losses import OrderSpec
from bnb_accounting.numerics import _as_generator, gaussian_inv_cdf_from_log, gaussian_log_cdf


@dataclasses.dataclass(frozen=True)
class GaussianBase:
    """N(0, sigma^2), optionally truncated above at `upper`."""

    sigma: float
    upper: Optional[float] = None

    def log_cdf_cap(self) -> float:
        if self.upper is None:
            return 0.0
        return float(gaussian_log_cdf(self.upper, self.sigma))


def open_uniform(gen: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on (0, 1); the zero of `Generator.random` is nudged to 2^-54."""
    u = gen.random(size)
    u[u == 0.0] = 2.0**-54
    return u


def beta_log_draws(gen: np.random.Generator, a, b, size) -> np.ndarray:
    """log Z for Z ~ Beta(a, b), one column per entry of the 1-d arrays a and b.

    Columns with b = 1 use Z = U^{1/a}. The others use Z = G_a / (G_a + G_b),
    computed as -log1p(G_b / G_a) so that log Z keeps full relative precision
    when Z is within machine epsilon of 1, which is the typical case for the
    top order statistics of a large population.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    rows = size[0]
    out = np.empty((rows, a.size))
    unit = b == 1.0
    if unit.any():
        # 1 - random() lies in (0, 1], so the log is finite.
        out[:, unit] = np.log1p(-gen.random((rows, int(unit.sum())))) / a[unit]
    rest = ~unit
    if rest.any():
        shape = (rows, int(rest.sum()))
        ga = gen.standard_gamma(a[rest], shape)
        gb = gen.standard_gamma(b[rest], shape)
        with np.errstate(divide="ignore"):
            out[:, rest] = -np.log1p(gb / ga)
    return out


def order_stat_log_cdfs(R: int, spec: OrderSpec, gen: np.random.Generator, size: int,
                        log_cap=0.0) -> np.ndarray:
    """Log-CDF values of the listed order statistics of R i.i.d. draws.

    Row i holds log CDF(y_(k_1)), ..., log CDF(y_(k_r)) for one joint draw:
    z_j ~ Beta(R - k_j + 1, k_j - k_{j-1}) and CDF(y_(k_i)) = cap * prod_{j<=i} z_j.
    `log_cap` (scalar or per row) conditions all R draws below a threshold.
    """
    a, b = spec.beta_parameters()
    log_z = beta_log_draws(gen, a, b, (size, len(spec.orders)))
    return np.cumsum(log_z, axis=1) + np.reshape(log_cap, (-1, 1))


def sample_order_stats(R: int, spec: OrderSpec, base: GaussianBase, rng,
                       size: Optional[int] = None) -> np.ndarray:
    """Draws (y_(k_1), ..., y_(k_r)), the k_i-th largest of R i.i.d. base draws.

    Returns shape (r,) when size is None, else (size, r). Each row is
    nonincreasing.
    """
    if spec.R != R:
        raise ValueError(f"spec is for R = {spec.R}, not {R}")
    gen = _as_generator(rng)
    n = 1 if size is None else size
    log_cdfs = order_stat_log_cdfs(R, spec, gen, n, base.log_cdf_cap())
    y = gaussian_inv_cdf_from_log(log_cdfs, base.sigma)
    # Quantiles of nonincreasing CDF values can tie after rounding but never invert.
    y = np.minimum.accumulate(y, axis=1)
    return y[0] if size is None else y


def conditional_max_survival(T: int, C: float, sigma: float) -> float:
    """Pr[max_t x_t >= C] for x ~ N(0, sigma^2 I_T)."""
    return float(-math.expm1(T * float(gaussian_log_cdf(C, sigma))))


def sample_max_coordinate(T: int, C: float, sigma: float, gen: np.random.Generator,
                          size: int) -> tuple[np.ndarray, np.ndarray]:
    """Draws the maximum of T Gaussians conditioned on being at least C.

    Returns (value, log CDF of value). The maximum has CDF Phi(x)^T, so with
    S = Pr[max >= C] and w ~ Unif(0, S), the draw has log Phi(x) = log1p(-w) / T.

    Raises:
      TailUnderflowError: If Pr[max >= C] underflows to zero.
    """
    survival = conditional_max_survival(T, C, sigma)
    if survival <= 0.0:
        raise TailUnderflowError(
            f"Pr[max of {T} N(0, {sigma}^2) >= {C}] underflows double precision")
    w = open_uniform(gen, size) * survival
    log_cdf = np.log1p(-w) / T
    return gaussian_inv_cdf_from_log(log_cdf, sigma), log_cdf


def sample_conditional_max(T: int, C: float, sigma: float, rng,
                           size: Optional[int] = None) -> np.ndarray:
    """Draws x ~ N(0, sigma^2 I_T) conditioned on max_t x_t >= C.

    The maximum y* is drawn from its conditional law, placed at a uniformly
    random coordinate, and the remaining coordinates are i.i.d. Gaussians
    truncated above at y*.
    """
    gen = _as_generator(rng)
    n = 1 if size is None else size
    top, log_cdf_top = sample_max_coordinate(T, C, sigma, gen, n)
    where = gen.integers(0, T, size=n)
    log_u = np.log(open_uniform(gen, (n, T)))
    x = kernels.quantile_rows(log_u, log_cdf_top, sigma, False)
    x[np.arange(n), where] = top
    return x[0] if size is None else x


def sample_truncated_gaussian(upper, sigma: float, gen: np.random.Generator,
                              size: int, loc: float = 0.0) -> np.ndarray:
    """N(loc, sigma^2) conditioned on being at most loc + upper (per-row `upper`)."""
    log_cap = gaussian_log_cdf(np.broadcast_to(upper, (size,)), sigma)
    log_u = np.log(open_uniform(gen, size))
    return loc + gaussian_inv_cdf_from_log(log_u + log_cap, sigma)
