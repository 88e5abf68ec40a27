"""Pure numpy implementations of the row-wise hot kernels.

These mirror `_kernels.pyx` exactly in semantics; results agree to within a
few ulps (the compiled version accumulates in a different order).
"""

import math

import numpy as np
from scipy import special

_LOG_HALF = -math.log(2.0)


def log_sum_exp_rows(a, scale, log_weights=None):
    """Returns log sum_j exp(a[i, j] * scale + log_weights[j]) for every row i."""
    a = np.asarray(a, dtype=np.float64)
    z = a * scale
    if log_weights is not None:
        z = z + np.asarray(log_weights, dtype=np.float64)
    top = np.max(z, axis=1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return safe_top + np.log(np.sum(np.exp(z - safe_top[:, None]), axis=1))


def quantile_rows(log_u, offsets, sigma, cumulative):
    """Gaussian quantiles of exp(log_u + offset), optionally after a row cumsum."""
    s = np.asarray(log_u, dtype=np.float64)
    if cumulative:
        s = np.cumsum(s, axis=1)
    s = s + np.asarray(offsets, dtype=np.float64)[:, None]
    upper = s > _LOG_HALF
    with np.errstate(divide="ignore", invalid="ignore"):
        left = special.ndtri(np.exp(np.where(upper, -1.0, s)))
        right = -special.ndtri(-np.expm1(np.where(upper, s, -1.0)))
    return sigma * np.where(upper, right, left)


def quantile_log_sum_rows(log_u, offsets, sigma, scale, log_weights=None,
                          cumulative=False):
    """Row-wise log-sum-exp of scaled Gaussian quantiles.

    For each row i and column j, let s_ij be log_u[i, j] (or its running sum
    along the row when `cumulative`) plus offsets[i], and y_ij the
    N(0, sigma^2) quantile of exp(s_ij). Returns
    log sum_j exp(y_ij * scale + log_weights[j]).
    """
    y = quantile_rows(log_u, offsets, sigma, cumulative)
    return log_sum_exp_rows(y, scale, log_weights)
