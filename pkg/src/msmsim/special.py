"""Vectorised special functions used by the copula h-functions.

The normal CDF and quantile are delegated to :mod:`scipy.special`, which is
already fast. Student-t is implemented here: scipy's ``stdtrit`` is iterative
and costs milliseconds per thousand values, which dominates the clone
ensemble loop. For integer degrees of freedom the CDF has a finite
trigonometric series and the quantile is refined by Newton steps from Hill's
(1970) starting value. Non-integer degrees of freedom fall back to scipy.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

# integer dof above this use scipy; the series cost grows linearly with dof
_MAX_SERIES_DOF = 200
_NEWTON_STEPS = 3
_DEEP_TAIL = 1e-4


def norm_cdf(x):
    return _sp.ndtr(x)


def norm_ppf(u):
    return _sp.ndtri(u)


def _is_series_dof(nu: float) -> bool:
    return float(nu).is_integer() and 1 <= nu <= _MAX_SERIES_DOF


def t_pdf(x, nu: float):
    x = np.asarray(x, dtype=float)
    logc = (
        math.lgamma((nu + 1.0) / 2.0)
        - math.lgamma(nu / 2.0)
        - 0.5 * math.log(nu * math.pi)
    )
    return np.exp(logc - 0.5 * (nu + 1.0) * np.log1p(x * x / nu))


def _t_cdf_series(x: np.ndarray, n: int) -> np.ndarray:
    # Abramowitz & Stegun 26.7.3 / 26.7.4, symmetric in theta
    theta = np.arctan(x / math.sqrt(n))
    s = np.sin(theta)
    c2 = np.cos(theta) ** 2
    if n % 2 == 0:
        term = np.ones_like(x)
        total = np.ones_like(x)
        for j in range(1, n // 2):
            term = term * c2 * (2 * j - 1) / (2 * j)
            total = total + term
        a = s * total
    else:
        if n == 1:
            a = theta * (2.0 / math.pi)
        else:
            c = np.cos(theta)
            term = c.copy()
            total = c.copy()
            for j in range(1, (n - 1) // 2):
                term = term * c2 * (2 * j) / (2 * j + 1)
                total = total + term
            a = (theta + s * total) * (2.0 / math.pi)
    return 0.5 + 0.5 * a


def t_cdf(x, nu: float):
    """Student-t CDF with ``nu`` degrees of freedom."""
    x = np.asarray(x, dtype=float)
    if not _is_series_dof(nu):
        return _sp.stdtr(nu, x)
    out = _t_cdf_series(np.abs(x), int(nu))
    return np.where(x < 0, 1.0 - out, out)


def _hill_start(p: np.ndarray, n: float) -> np.ndarray:
    """Hill (1970) Algorithm 396; ``p`` is the two-tailed probability."""
    a = 1.0 / (n - 0.5)
    b = 48.0 / (a * a)
    c = ((20700.0 * a / b - 98.0) * a - 16.0) * a + 96.36
    d = ((94.5 / (b + c) - 3.0) / b + 1.0) * math.sqrt(a * math.pi / 2.0) * n
    x = d * p
    y = x ** (2.0 / n)
    out = np.empty_like(p)

    big = y > 0.05 + a
    if np.any(big):
        xb = -_sp.ndtri(0.5 * p[big])
        yb = xb * xb
        cb = np.full_like(xb, c)
        if n < 5:
            cb = cb + 0.3 * (n - 4.5) * (xb + 0.6)
        cb = (((0.05 * d * xb - 5.0) * xb - 7.0) * xb - 2.0) * xb + b + cb
        yb = (((((0.4 * yb + 6.3) * yb + 36.0) * yb + 94.5) / cb - yb - 3.0) / b + 1.0) * xb
        yb = a * yb * yb
        yb = np.where(yb > 0.002, np.expm1(yb), 0.5 * yb * yb + yb)
        out[big] = yb
    small = ~big
    if np.any(small):
        ys = y[small]
        ys = (
            (1.0 / (((n + 6.0) / (n * ys) - 0.089 * d - 0.822) * (n + 2.0) * 3.0) + 0.5 / (n + 4.0)) * ys
            - 1.0
        ) * (n + 1.0) / (n + 2.0) + 1.0 / ys
        out[small] = ys
    return np.sqrt(n * out)


def t_ppf(u, nu: float):
    """Student-t quantile function with ``nu`` degrees of freedom."""
    u = np.asarray(u, dtype=float)
    if not _is_series_dof(nu):
        return _sp.stdtrit(nu, u)
    n = int(nu)
    lower = u < 0.5
    tail = np.where(lower, u, 1.0 - u)  # in (0, 0.5]
    if n == 1:
        t = 1.0 / np.tan(math.pi * tail)
    elif n == 2:
        t = (1.0 - 2.0 * tail) / np.sqrt(2.0 * tail * (1.0 - tail))
    elif n == 4:
        alpha = 4.0 * tail * (1.0 - tail)
        sa = np.sqrt(alpha)
        q = np.cos(np.arccos(sa) / 3.0) / sa
        t = 2.0 * np.sqrt(np.maximum(q - 1.0, 0.0))
    else:
        t = _hill_start(2.0 * tail, float(n))
        # Newton on the upper tail: solve 1 - F(t) = tail for t >= 0
        deep = tail < _DEEP_TAIL
        for _ in range(_NEWTON_STEPS):
            upper = 1.0 - _t_cdf_series(t, n)
            if deep.any():
                # 1 - F cancels badly far out; use the incomplete-beta tail there
                upper = np.atleast_1d(upper)
                upper[np.atleast_1d(deep)] = _sp.stdtr(n, -np.atleast_1d(t)[np.atleast_1d(deep)])
                upper = upper.reshape(np.shape(t))
            t = np.maximum(t + (upper - tail) / t_pdf(t, float(n)), 0.0)
    return np.where(lower, -t, t)
