"""Chi-squared CDF and quantile built on the regularized incomplete gamma."""

from __future__ import annotations

import math
from statistics import NormalDist

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


class DomainError(ValueError):
    """Argument outside the function's domain."""


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) = x^a e^-x / Gamma(a+1) * sum_n x^n / ((a+1)...(a+n))
    term = 1.0 / a
    total = term
    for n in range(1, _MAX_ITER):
        term *= x / (a + n)
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    # Q(a, x) by the modified Lentz method
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0 or x < 0:
        raise DomainError(f"gammainc_lower needs a > 0, x >= 0 (got a={a}, x={x})")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_cont_frac(a, x))


def _check_df(df):
    if not df >= 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {df}")


def chi2_cdf(x: float, df: float) -> float:
    _check_df(df)
    if x < 0 or math.isnan(x):
        raise DomainError(f"chi2_cdf needs x >= 0, got {x}")
    return gammainc_lower(0.5 * df, 0.5 * x)


def chi2_pdf(x: float, df: float) -> float:
    _check_df(df)
    if x <= 0:
        return 0.0 if df > 2 else (0.5 if df == 2 else math.inf)
    k = 0.5 * df
    return math.exp((k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k))


def chi2_inv(p: float, df: float) -> float:
    """Quantile: the x with chi2_cdf(x, df) == p, for 0 < p < 1.

    Bracketed Newton iteration; falls back to bisection whenever a Newton
    step leaves the bracket.
    """
    _check_df(df)
    if not 0.0 < p < 1.0:
        raise DomainError(f"chi2_inv needs 0 < p < 1, got {p}")

    lo, hi = 0.0, max(float(df), 1.0)
    while chi2_cdf(hi, df) < p:
        lo, hi = hi, 2.0 * hi

    # Wilson-Hilferty start, clipped into the bracket
    z = NormalDist().inv_cdf(p)
    c = 2.0 / (9.0 * df)
    x = df * max(1.0 - c + z * math.sqrt(c), 1e-3) ** 3
    if not lo < x < hi:
        x = 0.5 * (lo + hi)

    for _ in range(500):
        f = chi2_cdf(x, df) - p
        if f == 0.0:
            return x
        if f < 0:
            lo = x
        else:
            hi = x
        dens = chi2_pdf(x, df)
        step = f / dens if dens > 0 and math.isfinite(dens) else math.inf
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 4 * _EPS * max(x, _TINY) or hi - lo <= 4 * _EPS * max(hi, _TINY):
            return x_new
        x = x_new
    return x
