"""Exact Polya-Gamma sampling, compiled with numba.

Implements the alternating-series accept-reject sampler of Devroye for
J*(1, z), from which PG(1, c) = J*(1, |c|/2) / 4, following Polson,
Scott and Windle (2013).  The proposal mixes a truncated exponential on
(t, inf) with a truncated inverse-Gaussian on (0, t], t = 0.64, and the
series coefficients a_n(x) switch form at t.  All draws consume the
supplied numpy Generator so results are reproducible from a single
seeded stream.
"""

import math

import numpy as np
from numba import njit

_T = 0.64  # series/proposal regime boundary

_SQRT2 = math.sqrt(2.0)
_LOG2 = math.log(2.0)


@njit(cache=True)
def _igauss_cdf(t, z):
    """P(X <= t) for X ~ inverse-Gaussian(mean 1/z, shape 1); z >= 0.

    z == 0 is the one-sided stable limit.  The exp(2z) factor is folded
    into log space so large z cannot overflow.
    """
    if z == 0.0:
        return math.erfc(1.0 / math.sqrt(2.0 * t))
    rt = math.sqrt(t)
    a = 0.5 * math.erfc(-((t * z - 1.0) / rt) / _SQRT2)
    tail = 0.5 * math.erfc(((t * z + 1.0) / rt) / _SQRT2)
    if tail > 0.0:
        a += math.exp(2.0 * z + math.log(tail))
    return a


@njit(cache=True)
def _a_coef(n, x):
    """Coefficient a_n(x) of the alternating series for the J*(1,.) density."""
    nph = n + 0.5
    if x > _T:
        return math.pi * nph * math.exp(-0.5 * nph * nph * math.pi * math.pi * x)
    return (
        math.pi
        * nph
        * math.pow(2.0 / (math.pi * x), 1.5)
        * math.exp(-2.0 * nph * nph / x)
    )


@njit(cache=True)
def _trunc_igauss(z, rng):
    """Draw inverse-Gaussian(mean 1/z, shape 1) conditioned on (0, t]."""
    if z * _T < 1.0:
        # Mean exceeds t: rejection from a truncated one-sided stable
        # proposal, thinned by exp(-z^2 x / 2).
        while True:
            e1 = rng.exponential(1.0)
            e2 = rng.exponential(1.0)
            while e1 * e1 > 2.0 * e2 / _T:
                e1 = rng.exponential(1.0)
                e2 = rng.exponential(1.0)
            x = _T / ((1.0 + _T * e1) * (1.0 + _T * e1))
            if rng.random() <= math.exp(-0.5 * z * z * x):
                return x
    else:
        # Mean below t: draw unconditionally (Michael-Schucany-Haas),
        # retry until the draw lands in (0, t].
        mu = 1.0 / z
        while True:
            y = rng.standard_normal()
            y *= y
            muy = mu * y
            x = mu + 0.5 * mu * (muy - math.sqrt(4.0 * muy + muy * muy))
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
            if x <= _T:
                return x


@njit(cache=True)
def pg_one(c, rng):
    """One exact draw from PG(1, c); c may be any real number."""
    z = 0.5 * abs(c)
    k = 0.125 * math.pi * math.pi + 0.5 * z * z
    # Mixture weight p/(p+q) for the exponential (x > t) component,
    # assembled in log space.
    logp = math.log(0.5 * math.pi / k) - k * _T
    cdf = _igauss_cdf(_T, z)
    if cdf > 0.0:
        logq = _LOG2 - z + math.log(cdf)
        if logp > logq:
            ratio = 1.0 / (1.0 + math.exp(logq - logp))
        else:
            w = math.exp(logp - logq)
            ratio = w / (1.0 + w)
    else:
        ratio = 1.0
    while True:
        if rng.random() < ratio:
            x = _T + rng.exponential(1.0) / k
        else:
            x = _trunc_igauss(z, rng)
        # Squeeze via partial sums S_n of the alternating series; accept
        # when u * a_0 falls below an odd partial sum.
        s = _a_coef(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n & 1:
                s -= _a_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _a_coef(n, x)
                if y > s:
                    break


@njit(cache=True)
def pg_fill(c, out, rng):
    """Fill ``out`` with PG(1, c[i]) draws, one per entry of ``c``."""
    for i in range(c.shape[0]):
        out[i] = pg_one(c[i], rng)


@njit(cache=True)
def pg_sum(b, c, rng):
    """One draw from PG(b, c) for integer b >= 1 (sum of b PG(1, c) draws)."""
    total = 0.0
    for _ in range(b):
        total += pg_one(c, rng)
    return total
