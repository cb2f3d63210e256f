"""Seeded random streams and Polya-Gamma sampling utilities.

Every stochastic routine in the package draws from an :class:`RngStream`
so that a run is a pure function of its seed.  The stream wraps a
Mersenne-Twister generator; the Polya-Gamma draws are delegated to the
compiled exact sampler in :mod:`crt_hte._pg`, which consumes the same
underlying generator state.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from . import _pg


def pg_mean(b: float, c: float) -> float:
    """E[PG(b, c)] = (b / 2c) tanh(c / 2), with the b/4 limit at c = 0."""
    if b <= 0:
        raise ValueError("b must be positive")
    c = float(c)
    if abs(c) < 1e-3:
        return b / 4.0 - b * c * c / 48.0
    return 0.5 * b * math.tanh(0.5 * c) / c


def pg_var(b: float, c: float) -> float:
    """Var[PG(b, c)] = (b / 4c^3)(sinh c - c) sech^2(c / 2); b/24 at c = 0.

    Near c = 0 the closed form cancels badly, so a series expansion is
    used there instead.
    """
    if b <= 0:
        raise ValueError("b must be positive")
    c = float(c)
    if abs(c) < 1e-3:
        return b / 24.0 - b * c * c / 120.0
    sech = 1.0 / math.cosh(0.5 * c)
    return 0.25 * b * (math.sinh(c) - c) * sech * sech / c**3


class RngStream:
    """A seeded random stream with the draw primitives the package needs.

    Distribution parameters follow the conventions used throughout:
    ``normal`` takes a variance (not a standard deviation) and ``gamma``
    is shape-rate.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self.generator = np.random.Generator(np.random.MT19937(seed))

    # -- scalar/array primitives -------------------------------------------

    def uniform(self, size=None):
        return self.generator.random(size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def normal(self, mean=0.0, variance=1.0, size=None):
        if np.any(np.asarray(variance) < 0):
            raise ValueError("variance must be non-negative")
        return self.generator.normal(mean, np.sqrt(variance), size)

    def bernoulli(self, p, size=None):
        p = np.asarray(p, dtype=float)
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("bernoulli probability must lie in [0, 1]")
        if size is None and p.ndim > 0:
            size = p.shape
        return (self.generator.random(size) < p).astype(np.int64)

    def poisson(self, rate, size=None):
        if np.any(np.asarray(rate) < 0):
            raise ValueError("poisson rate must be non-negative")
        return self.generator.poisson(rate, size)

    def gamma(self, shape, rate, size=None):
        """Gamma draw with mean shape / rate."""
        if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
            raise ValueError("gamma shape and rate must be positive")
        return self.generator.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size)

    def permutation(self, x):
        return self.generator.permutation(x)

    # -- Polya-Gamma -------------------------------------------------------

    def polya_gamma(self, c: float, b: int = 1) -> float:
        """One exact PG(b, c) draw; b must be a positive integer."""
        b = int(b)
        if b < 1:
            raise ValueError("b must be a positive integer")
        return _pg.pg_sum(b, float(c), self.generator)

    def polya_gamma_vector(self, c) -> np.ndarray:
        """Elementwise PG(1, c[i]) draws."""
        c = np.ascontiguousarray(c, dtype=np.float64)
        out = np.empty_like(c)
        _pg.pg_fill(c, out, self.generator)
        return out

    # -- multivariate normal via precision --------------------------------

    def mvn_precision(self, mean, precision) -> np.ndarray:
        """Draw from N(mean, precision^{-1}) via Cholesky of the precision.

        With precision P = L L^T and z standard normal, the draw is
        mean + L^{-T} z.  If the factorization fails, an escalating
        diagonal jitter is applied before giving up.
        """
        mean = np.asarray(mean, dtype=float)
        precision = np.asarray(precision, dtype=float)
        q = mean.shape[0]
        scale = float(np.mean(np.diag(precision)))
        jitter = 0.0
        for attempt in range(4):
            try:
                chol = np.linalg.cholesky(
                    precision if jitter == 0.0 else precision + jitter * np.eye(q)
                )
                break
            except np.linalg.LinAlgError:
                jitter = scale * 10.0 ** (attempt - 10)
        else:
            raise np.linalg.LinAlgError(
                "precision matrix is not positive definite even after jitter"
            )
        z = self.generator.standard_normal(q)
        return mean + solve_triangular(chol, z, lower=True, trans="T")
