"""Diagonal Gaussian densities, entropies and KL terms.

All variances are plain variances (not standard deviations) and all
functions are exact closed forms.
"""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def diag_logpdf(x, mean, var) -> float:
    r = x - mean
    return -0.5 * float(np.sum(r * r / var + np.log(var) + LOG_2PI))


def diag_logpdf_grad_mean(x, mean, var) -> np.ndarray:
    """d logpdf / d mean; the gradient w.r.t. x is its negative."""
    return (x - mean) / var


def diag_logpdf_grad_var(x, mean, var) -> np.ndarray:
    r = x - mean
    return 0.5 * (r * r / (var * var) - 1.0 / var)


def entropy_diag(var) -> float:
    return 0.5 * float(np.sum(np.log(var) + LOG_2PI + 1.0))


def kl_diag_standard(mean, var) -> float:
    """KL( N(mean, diag var) || N(0, I) )."""
    return 0.5 * float(np.sum(var + mean * mean - 1.0 - np.log(var)))


def standard_logpdf_expectation(mean, var) -> float:
    """E_q[log N(z | 0, I)] for q = N(mean, diag var), in closed form."""
    d = mean.size
    return -0.5 * (d * LOG_2PI + float(np.sum(mean * mean + var)))
