"""Descriptive statistics for the bound estimators."""
from __future__ import annotations

import math
from statistics import NormalDist

import numpy as np

from .errors import InvalidArgumentError

_STD_NORMAL = NormalDist()


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"probability must lie in (0, 1), got {p}")
    return _STD_NORMAL.inv_cdf(p)


def sample_variance(values) -> float:
    """Unbiased variance (divisor ``n - 1``); two-pass with pairwise sums.

    Data are shifted by their first value first, which keeps constant
    inputs exactly at zero and helps when the mean dwarfs the spread.
    """
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise InvalidArgumentError("sample variance needs at least two values")
    return float(np.var(x - x[0], ddof=1))


def confidence_interval(L0: float, U0: float, sigma_L: float, sigma_U: float, J1: int,
                        alpha: float = 0.05) -> tuple:
    """``[L0 - z sigma_L / sqrt(J1), U0 + z sigma_U / sqrt(J1)]`` with ``z`` the ``1 - alpha/2`` quantile."""
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    if J1 < 2:
        raise InvalidArgumentError("J1 must be >= 2")
    if sigma_L < 0 or sigma_U < 0:
        raise InvalidArgumentError("standard deviations must be non-negative")
    z = normal_quantile(1.0 - alpha / 2.0)
    root = math.sqrt(J1)
    return L0 - z * sigma_L / root, U0 + z * sigma_U / root
