"""Shapiro-Wilk W test, Royston's AS R94 algorithm.

The coefficient vector depends only on ``n``, so :func:`shapiro_wilk_batch`
tests many equally sized samples at once (one row per sample), which is how
the per-pixel normality survey uses it.
"""

import math
from functools import lru_cache

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DegenerateInputError, ValidationError

MIN_N = 3
MAX_N = 5000

# polynomial coefficients, lowest order first
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)
_SMALL = 1e-19


def _poly(coeffs, x):
    result = 0.0
    for c in reversed(coeffs):
        result = result * x + c
    return result


def _check_n(n):
    if not MIN_N <= n <= MAX_N:
        raise ValidationError(f"Shapiro-Wilk needs {MIN_N} <= n <= {MAX_N}, got n={n}")


@lru_cache(maxsize=64)
def _coefficients(n):
    """Antisymmetric weight vector for ascending order statistics of size ``n``."""
    half = n // 2
    a = np.zeros(half)
    if n == 3:
        a[0] = math.sqrt(0.5)
    else:
        i = np.arange(1, half + 1)
        m = ndtri((i - 0.375) / (n + 0.25))
        summ2 = 2.0 * float(np.sum(m * m))
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) - m[0] / ssumm2
        if n > 5:
            a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2) / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
            a[2:] = -m[2:] / fac
            a[1] = a2
        else:
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
            a[1:] = -m[1:] / fac
        a[0] = a1
    full = np.zeros(n)
    full[:half] = -a
    full[n - half:] = a[::-1]
    full.setflags(write=False)
    return full


def _pvalue(w, n):
    w = np.asarray(w, dtype=np.float64)
    if n == 3:
        # exact distribution for n = 3
        p = (6.0 / math.pi) * (np.arcsin(np.sqrt(np.clip(w, 0.0, 1.0))) - math.pi / 3.0)
        return np.clip(p, 0.0, 1.0)
    w1 = np.maximum(1.0 - w, 0.0)
    with np.errstate(divide="ignore"):
        y = np.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        tail = y >= gamma
        with np.errstate(invalid="ignore"):
            y = -np.log(np.where(tail, np.nan, gamma - y))
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        tail = np.zeros(w.shape, dtype=bool)
        xx = math.log(n)
        mean = _poly(_C5, xx)
        sd = math.exp(_poly(_C6, xx))
    p = ndtr(-(y - mean) / sd)
    p = np.where(tail, 1e-99, p)
    # w == 1 gives y = -inf, i.e. p = 1
    return np.clip(np.nan_to_num(p, nan=1.0), 0.0, 1.0)


def shapiro_wilk_batch(samples):
    """Test each row of ``samples`` (shape ``(m, n)``).

    Returns ``(W, p, valid)``; rows with zero range get ``valid=False`` and
    NaN statistics instead of raising.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-D array of samples, got shape {x.shape}")
    m, n = x.shape
    _check_n(n)
    if not np.all(np.isfinite(x)):
        raise ValidationError("samples contain non-finite values")
    x = np.sort(x, axis=1)
    rng = x[:, -1] - x[:, 0]
    valid = rng >= _SMALL
    w = np.full(m, np.nan)
    p = np.full(m, np.nan)
    if not valid.any():
        return w, p, valid

    a = _coefficients(n)
    xs = x[valid] / rng[valid, None]
    xs = xs - xs.mean(axis=1, keepdims=True)
    ac = a - a.mean()
    ssa = float(np.dot(ac, ac))
    ssx = np.einsum("ij,ij->i", xs, xs)
    sax = xs @ ac
    # W as the squared correlation, written to keep 1 - W accurate
    ssassx = np.sqrt(ssa * ssx)
    w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx)
    wv = np.clip(1.0 - w1, 0.0, 1.0)
    w[valid] = wv
    p[valid] = _pvalue(wv, n)
    return w, p, valid


def shapiro_wilk(samples):
    """Shapiro-Wilk statistic and p-value for one sample of size 3..5000.

    >>> shapiro_wilk([1.0, 2.0, 3.0])
    (1.0, 1.0)
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    _check_n(x.shape[0])
    w, p, valid = shapiro_wilk_batch(x[None, :])
    if not valid[0]:
        raise DegenerateInputError("zero variance: Shapiro-Wilk is undefined for constant samples")
    return float(w[0]), float(p[0])
