"""Pure-numpy reference kernels. Same contracts as the compiled ``_kernels``."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, erfcx

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _right_tail(x, s, floor):
    # Both window edges at or right of zero: (x - 1)/s >= 0. Numerator and
    # denominator are rescaled by exp(b^2/2) so nothing underflows.
    a = x / s
    b = (x - 1.0) / s
    delta = 0.5 * (a - b) * (a + b)
    e = np.exp(-delta)
    num = np.expm1(-delta) * _INV_SQRT_2PI
    den = 0.5 * (erfcx(b / _SQRT2) - erfcx(a / _SQRT2) * e)
    clamped = den < floor
    den = np.maximum(den, floor)
    score = num / (s * den)
    curv = (b - a * e) * _INV_SQRT_2PI / (s * s * den)
    return score, curv - score * score, clamped


def _middle(x, s, floor):
    a = x / s
    b = (x - 1.0) / s
    pa = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
    pb = np.exp(-0.5 * b * b) * _INV_SQRT_2PI
    den = 0.5 * (erf(a / _SQRT2) + erf(-b / _SQRT2))
    clamped = den < floor
    den = np.maximum(den, floor)
    score = (pa - pb) / (s * den)
    curv = (b * pb - a * pa) / (s * s * den)
    return score, curv - score * score, clamped


def uniform_score_terms(x, s: float, floor: float = 1e-300):
    """Score of Uniform[0,1] convolved with N(0, s^2), and its x-derivative.

    Elementwise over ``x`` (any shape). Returns ``(score, dscore, n_clamped)``
    where ``n_clamped`` counts elements whose denominator hit ``floor``.
    """
    x = np.asarray(x, dtype=np.float64)
    s = float(s)
    if not s > 0.0:
        raise ValueError("noise scale must be positive")
    score = np.empty_like(x)
    dscore = np.empty_like(x)
    n_clamped = 0

    right = x >= 1.0
    left = x <= 0.0
    mid = ~(right | left)
    if right.any():
        sc, ds, cl = _right_tail(x[right], s, floor)
        score[right], dscore[right] = sc, ds
        n_clamped += int(cl.sum())
    if left.any():
        # p_t is symmetric about 1/2: score(x) = -score(1 - x)
        sc, ds, cl = _right_tail(1.0 - x[left], s, floor)
        score[left], dscore[left] = -sc, ds
        n_clamped += int(cl.sum())
    if mid.any():
        sc, ds, cl = _middle(x[mid], s, floor)
        score[mid], dscore[mid] = sc, ds
        n_clamped += int(cl.sum())
    return score, dscore, n_clamped


def uniform_log_density(x, s: float):
    """log(Phi(x/s) - Phi((x-1)/s)), stable in both tails."""
    x = np.asarray(x, dtype=np.float64)
    xr = np.where(x <= 0.0, 1.0 - x, x)
    a = xr / s
    b = (xr - 1.0) / s
    out = np.empty_like(x)
    tail = xr >= 1.0
    if tail.any():
        at, bt = a[tail], b[tail]
        e = np.exp(-0.5 * (at - bt) * (at + bt))
        out[tail] = np.log(0.5 * (erfcx(bt / _SQRT2) - erfcx(at / _SQRT2) * e)) - 0.5 * bt * bt
    inner = ~tail
    if inner.any():
        out[inner] = np.log(0.5 * (erf(a[inner] / _SQRT2) + erf(-b[inner] / _SQRT2)))
    return out
