"""Small statistics helpers shared by the Monte-Carlo diagnostics."""

import numpy as np
from scipy import stats


def wilson(successes, n, confidence=0.95):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(int(successes), int(n)).proportion_ci(confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / np.sqrt(n)


def loglinear_fit(t, y):
    """Least-squares fit log y = c - rate * t; returns (rate, intercept)."""
    slope, icpt = np.polyfit(np.asarray(t, dtype=float), np.log(np.asarray(y, dtype=float)), 1)
    return float(-slope), float(icpt)


def percentile_ci(samples, confidence=0.95):
    s = np.asarray(samples, dtype=float)
    s = s[np.isfinite(s)]
    if s.size == 0:
        return (float("nan"), float("nan"))
    lo = 100.0 * (1.0 - confidence) / 2.0
    return (float(np.percentile(s, lo)), float(np.percentile(s, 100.0 - lo)))
