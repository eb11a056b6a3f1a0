"""Estimation-error metrics: mean squared error in dB and RMSE.

The squared error of one (state, estimate) pair is the squared Euclidean
norm over the selected components; means are taken over samples and time
jointly, so metrics are permutation-invariant over samples and combine
additively (count-weighted) over disjoint windows.
"""
from __future__ import annotations

import math

import numpy as np

# Reported instead of -inf when the error is exactly zero (serializable).
MSE_DB_FLOOR = -300.0


def _stack_errors(estimates, truths, component_mask=None) -> np.ndarray:
    est = [np.asarray(e, dtype=float) for e in estimates]
    tru = [np.asarray(t, dtype=float) for t in truths]
    if len(est) != len(tru) or not est:
        raise ValueError("estimates and truths must be equal-length and nonempty")
    errs = []
    for e, t in zip(est, tru):
        if e.shape != t.shape:
            raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
        d = e - t
        d = d.reshape(-1, d.shape[-1])
        if component_mask is not None:
            d = d[:, list(component_mask)]
        errs.append(d)
    return np.concatenate(errs, axis=0)


def mean_squared_error(estimates, truths, component_mask=None) -> float:
    """Mean over samples and time of the squared error norm."""
    d = _stack_errors(estimates, truths, component_mask)
    return float(np.mean(np.sum(d * d, axis=1)))


def mse_db(estimates, truths, component_mask=None) -> float:
    """10 log10 of the mean squared error; exact zero maps to MSE_DB_FLOOR."""
    m = mean_squared_error(estimates, truths, component_mask)
    if m == 0.0:
        return MSE_DB_FLOOR
    return 10.0 * math.log10(m)


def rmse(estimates, truths, component_mask=None) -> float:
    """Root mean squared error, optionally over selected components."""
    return math.sqrt(mean_squared_error(estimates, truths, component_mask))
