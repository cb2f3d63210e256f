"""GEE estimation for continuous outcomes with an identity link.

Solves the estimating equations sum_i D_i' V_i^{-1} (y_i - mu_i) = 0
under an independence or exchangeable working correlation, iterating
between the weighted least-squares solve and moment updates of the
dispersion and correlation.  Variances come from the robust sandwich

    cov = B^{-1} (sum_i u_i u_i') B^{-1},   B = sum_i D_i' V_i^{-1} D_i,

with u_i the per-cluster estimating-function contribution evaluated at
the solution.  For the exchangeable structure V_i^{-1} has the closed
form (phi (1 - rho))^{-1} [I - rho / (1 - rho + n_i rho) J], so no
per-cluster matrix inversion is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Formula, TrialData, build_design
from .errors import ConvergenceError, ValidationError

WORKING_KINDS = ("independence", "exchangeable")


@dataclass(frozen=True)
class WorkingCorrelation:
    """Estimated working-correlation state of a GEE fit."""

    kind: str
    rho: float
    dispersion: float


@dataclass(frozen=True)
class GeeFit:
    """Result of :func:`fit_gee`.

    ``robust_cov`` is the sandwich covariance, ``model_cov`` the
    model-based bread inverse.  ``ee_norm`` is the Euclidean norm of the
    estimating function at the returned coefficients.
    """

    gamma_hat: np.ndarray
    robust_cov: np.ndarray
    model_cov: np.ndarray
    working: WorkingCorrelation
    column_labels: tuple[str, ...]
    n_iterations: int
    converged: bool
    n_clusters: int
    n_obs: int
    rho_truncated: bool
    ee_norm: float

    def coefficient(self, label: str) -> float:
        return float(self.gamma_hat[self.column_labels.index(label)])

    def robust_se(self, label: str) -> float:
        j = self.column_labels.index(label)
        return float(np.sqrt(self.robust_cov[j, j]))


def fit_gee(
    data: TrialData,
    formula: Formula,
    *,
    working: str = "exchangeable",
    weights: np.ndarray | None = None,
    modifier_values: np.ndarray | None = None,
    max_iterations: int = 100,
    tol: float = 1e-8,
) -> GeeFit:
    """Fit the mean model by GEE.

    Args:
        data: Trial data in cluster-contiguous order.
        formula: Fixed-effects mean model (random-intercept flags are
            ignored here; clustering enters through the working
            correlation and the sandwich).
        working: "independence" or "exchangeable".
        weights: Optional boolean observation indicators; rows where
            False are excluded from the estimating equations, which is
            how complete-case analyses are expressed.
        modifier_values: Optional complete modifier column (for fits on
            imputed datasets).
        max_iterations: Cap on WLS/moment update cycles.
        tol: Convergence threshold on max absolute coefficient change.

    Returns:
        GeeFit.  ``converged`` is False when the iteration cap is hit;
        no exception is raised for that.

    Raises:
        ConvergenceError: If the (weighted) design is rank deficient.
        ValidationError: On malformed inputs.
    """
    if working not in WORKING_KINDS:
        raise ValidationError(f"unknown working correlation {working!r}")
    if weights is not None:
        weights = np.asarray(weights, dtype=bool)
        if weights.shape != (data.n_total,):
            raise ValidationError("weights must have one entry per individual")
        if modifier_values is not None:
            modifier_values = np.asarray(modifier_values, dtype=float)[weights]
        data = data.subset(weights)

    design = build_design(formula, data, modifier_values)
    x = design.values
    y = data.outcome
    n, q = x.shape
    if n < q:
        raise ConvergenceError("fewer observations than coefficients")

    sizes = data.cluster_sizes
    starts = data.starts
    n_clusters = sizes.shape[0]
    max_size = int(sizes.max())

    xtx = x.T @ x
    xty = x.T @ y
    row_sums = np.add.reduceat(x, starts, axis=0)  # (C, q) sums of x rows
    y_sums = np.add.reduceat(y, starts)

    exchangeable = working == "exchangeable"
    pair_count = float(np.sum(sizes * (sizes - 1)) / 2.0)
    rho_low = -1.0 / (max_size - 1) + 1e-6 if max_size > 1 else 0.0
    rho_high = 1.0 - 1e-6

    def bread_and_target(phi: float, rho: float):
        if not exchangeable or rho == 0.0:
            return xtx / phi, xty / phi, None
        c = rho / (1.0 - rho + sizes * rho)  # (C,)
        scale = 1.0 / (phi * (1.0 - rho))
        bread = scale * (xtx - (row_sums * c[:, None]).T @ row_sums)
        target = scale * (xty - row_sums.T @ (c * y_sums))
        return bread, target, c

    gamma, *_ = np.linalg.lstsq(x, y, rcond=None)
    phi = 1.0
    rho = 0.0
    rho_truncated = False
    converged = False
    c_used = None
    n_iterations = 0
    for n_iterations in range(1, max(1, max_iterations) + 1):
        resid = y - x @ gamma
        # floor keeps noiseless (interpolated) data finite; coefficients
        # are scale-invariant in phi so they are unaffected
        phi = max(float(resid @ resid) / max(n - q, 1), 1e-12)
        if exchangeable:
            res_sums = np.add.reduceat(resid, starts)
            res_sq = np.add.reduceat(resid * resid, starts)
            denom = phi * (pair_count - q)
            if denom > 0.0 and pair_count > 0.0:
                raw = float(np.sum(res_sums * res_sums - res_sq)) / (2.0 * denom)
            else:
                raw = 0.0
            rho = min(max(raw, rho_low), rho_high)
            rho_truncated = rho != raw
        bread, target, c_used = bread_and_target(phi, rho)
        try:
            gamma_new = np.linalg.solve(bread, target)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("design matrix is rank deficient") from exc
        delta = float(np.max(np.abs(gamma_new - gamma)))
        gamma = gamma_new
        if delta < tol:
            converged = True
            break

    # Covariances at the final coefficients, using the working parameters
    # that produced them so the estimating function is exactly zero.
    resid = y - x @ gamma
    contrib = np.add.reduceat(x * resid[:, None], starts, axis=0)  # (C, q)
    if exchangeable and c_used is not None:
        res_sums = np.add.reduceat(resid, starts)
        scale = 1.0 / (phi * (1.0 - rho))
        u = scale * (contrib - row_sums * (c_used * res_sums)[:, None])
        bread, _, _ = bread_and_target(phi, rho)
    else:
        u = contrib / phi
        bread = xtx / phi
    try:
        model_cov = np.linalg.inv(bread)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("design matrix is rank deficient") from exc
    meat = u.T @ u
    robust_cov = model_cov @ meat @ model_cov
    ee_norm = float(np.linalg.norm(u.sum(axis=0)))

    return GeeFit(
        gamma_hat=gamma,
        robust_cov=robust_cov,
        model_cov=model_cov,
        working=WorkingCorrelation(kind=working, rho=rho, dispersion=phi),
        column_labels=design.column_labels,
        n_iterations=n_iterations,
        converged=converged,
        n_clusters=n_clusters,
        n_obs=n,
        rho_truncated=rho_truncated,
        ee_norm=ee_norm,
    )


def ate_estimate(fit: GeeFit, modifier_values: np.ndarray) -> tuple[float, float]:
    """Average treatment effect and its delta-method variance.

    For the outcome model with columns A and A:M the ATE estimator is
    gamma_A + gamma_{A:M} * mean(M); the variance propagates the robust
    covariance through the gradient, treating mean(M) as fixed.
    """
    labels = fit.column_labels
    if "A" not in labels or "A:M" not in labels:
        raise ValidationError("fit must contain A and A:M columns")
    m_bar = float(np.mean(modifier_values))
    grad = np.zeros(len(labels))
    grad[labels.index("A")] = 1.0
    grad[labels.index("A:M")] = m_bar
    estimate = float(grad @ fit.gamma_hat)
    variance = float(grad @ fit.robust_cov @ grad)
    return estimate, variance
