"""Rubin's-rule pooling with cluster-adjusted degrees of freedom.

Combines D per-completion point estimates and variances into a single
inference. The t reference uses the harmonic combination of the classic
large-sample df and an observed-data df that accounts for the small
number of clusters (Barnard & Rubin 1999), so intervals do not collapse
to the normal reference when only a handful of clusters are available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ValidationError

__all__ = ["PooledResult", "pool", "wald_interval"]


@dataclass(frozen=True)
class PooledResult:
    """Pooled inference for one coefficient across D completed datasets."""

    estimate: float
    within_var: float
    between_var: float
    total_var: float
    nu: float
    nu_obs: float
    nu_adj: float
    ci_low: float
    ci_high: float
    p_value: float
    n_imputations: int


def _reference_interval(estimate, total_var, level, df):
    """CI and two-sided p against 0; df None means the normal reference."""
    se = math.sqrt(total_var)
    if se == 0.0:
        p = 1.0 if estimate == 0.0 else 0.0
        return estimate, estimate, p
    tail = (1.0 - level) / 2.0
    if df is None:
        q = stats.norm.ppf(1.0 - tail)
        p = 2.0 * stats.norm.sf(abs(estimate) / se)
    else:
        q = stats.t.ppf(1.0 - tail, df)
        p = 2.0 * stats.t.sf(abs(estimate) / se, df)
    return estimate - q * se, estimate + q * se, float(p)


def pool(
    estimates,
    variances,
    *,
    n_clusters: int,
    level: float = 0.95,
    nu_obs_mode: str = "standard",
) -> PooledResult:
    """Pool D estimates and their variances by Rubin's rule.

    Args:
        estimates: Per-completion point estimates, length D >= 2.
        variances: Matching per-completion variances, nonnegative.
        n_clusters: Cluster count C >= 3 entering the observed-data df
            factor (C-1)(C-2)/(C+1).
        level: Confidence level for the interval.
        nu_obs_mode: "standard" divides the variance ratio r by the
            summed within variances; "literal" divides by the summed
            estimates instead. The literal form reproduces a printed
            variant for auditability and can be degenerate (negative or
            unbounded) when the estimates sum to a nonpositive value.

    When the between-imputation variance is exactly zero the imputations
    carry no extra uncertainty: nu is +inf, nu_adj equals the r = 0
    observed-data df, and the interval and p-value use the normal
    reference so the result coincides with the complete-data Wald test.
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if est.ndim != 1 or var.shape != est.shape:
        raise ValidationError("estimates and variances must be matching 1-d arrays")
    d = est.size
    if d < 2:
        raise ValidationError("pooling requires at least two imputations")
    if not (np.isfinite(est).all() and np.isfinite(var).all()):
        raise ValidationError("estimates and variances must be finite")
    if np.any(var < 0.0):
        raise ValidationError("variances must be nonnegative")
    if n_clusters < 3:
        raise ValidationError("observed-data df requires at least 3 clusters")
    if nu_obs_mode not in ("standard", "literal"):
        raise ValidationError(f"unknown nu_obs_mode: {nu_obs_mode!r}")

    # identical completions (zero missingness) must degenerate exactly,
    # so the all-equal case bypasses the rounding in the mean
    if np.all(est == est[0]):
        point = float(est[0])
        dev_sq = 0.0
    else:
        point = float(est.mean())
        dev_sq = float(np.sum((est - point) ** 2))
    within = float(var.mean())
    between = dev_sq / (d - 1)
    total = within + (d + 1) / d * between

    fac = (n_clusters - 1) * (n_clusters - 2) / (n_clusters + 1)
    if nu_obs_mode == "literal":
        r_obs = (d + 1) * dev_sq / ((d - 1) * float(est.sum()))
    else:
        r_obs = (d + 1) * dev_sq / ((d - 1) * float(var.sum())) if within > 0 else (
            math.inf if dev_sq > 0 else 0.0
        )

    if between == 0.0:
        nu = math.inf
        nu_obs = fac
        nu_adj = fac
        lo, hi, p = _reference_interval(point, total, level, None)
    else:
        nu = (d - 1) * (1.0 + d * within / ((d + 1) * between)) ** 2
        nu_obs = fac / (1.0 + r_obs)
        nu_adj = 1.0 / (1.0 / nu + 1.0 / nu_obs)
        lo, hi, p = _reference_interval(point, total, level, nu_adj)

    return PooledResult(
        estimate=point,
        within_var=within,
        between_var=between,
        total_var=total,
        nu=nu,
        nu_obs=nu_obs,
        nu_adj=nu_adj,
        ci_low=lo,
        ci_high=hi,
        p_value=p,
        n_imputations=d,
    )


def wald_interval(estimate: float, variance: float, level: float = 0.95, df=None):
    """Wald interval and two-sided p-value, normal by default, t when df given.

    Returns (ci_low, ci_high, p_value).
    """
    if variance < 0.0:
        raise ValidationError("variance must be nonnegative")
    return _reference_interval(float(estimate), float(variance), level, df)
