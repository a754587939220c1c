"""Least-squares exponent fits and percentile bootstrap."""

import numpy as np

__all__ = ["loglog_fit", "bootstrap_slope_ci"]


def loglog_fit(hs, values):
    """Fit ``log values = slope * log hs + intercept``.

    Returns a dict with ``slope``, ``intercept`` and ``r2``. Non-positive
    values make the fit undefined and raise; a single point gives NaN.
    """
    hs = np.asarray(hs, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0) or np.any(hs <= 0):
        raise ValueError("log-log fit needs positive data")
    if len(np.unique(hs)) < 2:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan")}
    lx, ly = np.log(hs), np.log(values)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": float(r2)}


def bootstrap_slope_ci(hs, samples, stat=np.mean, resamples=1000, level=0.95, seed=0):
    """Percentile CI for the log-log slope of ``stat(samples[i])`` against ``hs``.

    ``samples`` is a list of 1-d arrays, one per ladder point; each is
    resampled with replacement independently.
    """
    rng = np.random.default_rng(seed)
    hs = np.asarray(hs, dtype=float)
    slopes = np.empty(resamples)
    for r in range(resamples):
        vals = []
        for s in samples:
            s = np.asarray(s)
            vals.append(stat(s[rng.integers(0, len(s), len(s))]))
        vals = np.abs(np.asarray(vals))
        vals = np.maximum(vals, np.finfo(float).tiny)
        slopes[r] = np.polyfit(np.log(hs), np.log(vals), 1)[0]
    lo, hi = np.quantile(slopes, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)
