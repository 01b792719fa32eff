"""Monte Carlo summary statistics."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["EmptySample", "summary_stats", "two_sample_z"]


class EmptySample(ValueError):
    """A statistic was requested of an empty sample."""


def summary_stats(samples) -> tuple[float, float, float]:
    """Mean, unbiased variance and standard error of the mean."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptySample("no samples")
    mean = float(x.mean())
    var = float(x.var(ddof=1)) if x.size > 1 else 0.0
    return mean, var, math.sqrt(var / x.size)


def z_from(mean_a: float, se_a: float, mean_b: float, se_b: float) -> float:
    den = math.hypot(se_a, se_b)
    if den == 0.0:
        return 0.0 if mean_a == mean_b else math.copysign(math.inf, mean_a - mean_b)
    return (mean_a - mean_b) / den


def two_sample_z(a, b) -> float:
    ma, _, sa = summary_stats(a)
    mb, _, sb = summary_stats(b)
    return z_from(ma, sa, mb, sb)
