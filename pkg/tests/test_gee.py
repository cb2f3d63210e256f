"""Tests for GEE estimation against dense linear-algebra oracles."""

import numpy as np
import pytest

from crt_hte.data import Formula, TrialData, build_design
from crt_hte.errors import ConvergenceError
from crt_hte.gee import ate_estimate, fit_gee
from crt_hte.rng import RngStream

OUTCOME = Formula(terms=((), ("A",), ("M",), ("A", "M")))


def clustered_trial(seed=0, n_clusters=12, mean_size=8, p=1, sigma_cluster=0.5):
    """Small synthetic trial with complete modifier for fitter tests."""
    s = RngStream(seed)
    sizes = np.maximum(s.poisson(mean_size, n_clusters), 2)
    arm = s.permutation(np.arange(n_clusters) % 2)
    n = int(sizes.sum())
    a_row = np.repeat(arm, sizes)
    m = s.bernoulli(0.5, n).astype(float)
    x = s.standard_normal((n, p))
    kappa = np.repeat(s.normal(0.0, sigma_cluster**2, n_clusters), sizes)
    y = 1.0 + a_row + 0.75 * m - 1.2 * a_row * m + 0.3 * x[:, 0] + kappa
    y = y + s.standard_normal(n)
    return TrialData(
        cluster_sizes=sizes,
        treatment=arm,
        outcome=y,
        modifier=m,
        observed=np.ones(n, dtype=bool),
        covariates=x,
    )


def dense_sandwich(data, formula, fit):
    """Reference sandwich built from explicit per-cluster V_i inverses."""
    x = build_design(formula, data).values
    resid = data.outcome - x @ fit.gamma_hat
    phi = fit.working.dispersion
    rho = fit.working.rho if fit.working.kind == "exchangeable" else 0.0
    bread = np.zeros((x.shape[1], x.shape[1]))
    meat = np.zeros_like(bread)
    score = np.zeros(x.shape[1])
    for start, size in zip(data.starts, data.cluster_sizes):
        sl = slice(start, start + size)
        v = phi * ((1.0 - rho) * np.eye(size) + rho * np.ones((size, size)))
        vinv = np.linalg.inv(v)
        xi = x[sl]
        ri = resid[sl]
        bread += xi.T @ vinv @ xi
        u = xi.T @ vinv @ ri
        meat += np.outer(u, u)
        score += u
    bread_inv = np.linalg.inv(bread)
    return bread_inv @ meat @ bread_inv, bread_inv, score


class TestAgainstDenseOracles:
    def test_independence_equals_ols(self):
        data = clustered_trial(seed=3)
        fit = fit_gee(data, OUTCOME, working="independence")
        x = build_design(OUTCOME, data).values
        beta_ols = np.linalg.pinv(x.T @ x) @ (x.T @ data.outcome)
        np.testing.assert_allclose(fit.gamma_hat, beta_ols, atol=1e-10)
        assert fit.converged
        assert fit.working.rho == 0.0

    def test_sandwich_matches_dense_formula(self):
        for working in ("independence", "exchangeable"):
            data = clustered_trial(seed=4, n_clusters=9)
            fit = fit_gee(data, OUTCOME, working=working)
            robust, model, score = dense_sandwich(data, OUTCOME, fit)
            np.testing.assert_allclose(fit.robust_cov, robust, atol=1e-10)
            np.testing.assert_allclose(fit.model_cov, model, atol=1e-10)
            assert np.linalg.norm(score) < 1e-6
            assert fit.ee_norm < 1e-6

    def test_exchangeable_coefficients_solve_wls(self):
        data = clustered_trial(seed=5)
        fit = fit_gee(data, OUTCOME, working="exchangeable")
        # At the solution the WLS normal equations for the final working
        # parameters must hold exactly.
        _, bread_inv, score = dense_sandwich(data, OUTCOME, fit)
        np.testing.assert_allclose(score, 0.0, atol=1e-8)


class TestInvariances:
    def test_cluster_permutation_invariance(self):
        data = clustered_trial(seed=6, n_clusters=10)
        order = RngStream(1).permutation(np.arange(data.n_clusters))
        row_blocks = [
            np.arange(data.starts[i], data.starts[i] + data.cluster_sizes[i])
            for i in order
        ]
        rows = np.concatenate(row_blocks)
        permuted = TrialData(
            cluster_sizes=data.cluster_sizes[order],
            treatment=data.treatment[order],
            outcome=data.outcome[rows],
            modifier=data.modifier[rows],
            observed=data.observed[rows],
            covariates=data.covariates[rows],
        )
        for working in ("independence", "exchangeable"):
            a = fit_gee(data, OUTCOME, working=working)
            b = fit_gee(permuted, OUTCOME, working=working)
            np.testing.assert_allclose(a.gamma_hat, b.gamma_hat, atol=1e-12)
            np.testing.assert_allclose(a.robust_cov, b.robust_cov, atol=1e-12)
            assert a.working.rho == pytest.approx(b.working.rho, abs=1e-12)

    def test_within_cluster_row_permutation_invariance(self):
        data = clustered_trial(seed=7, n_clusters=8)
        s = RngStream(2)
        rows = np.concatenate(
            [
                start + s.permutation(np.arange(size))
                for start, size in zip(data.starts, data.cluster_sizes)
            ]
        )
        shuffled = TrialData(
            cluster_sizes=data.cluster_sizes,
            treatment=data.treatment,
            outcome=data.outcome[rows],
            modifier=data.modifier[rows],
            observed=data.observed[rows],
            covariates=data.covariates[rows],
        )
        a = fit_gee(data, OUTCOME, working="exchangeable")
        b = fit_gee(shuffled, OUTCOME, working="exchangeable")
        np.testing.assert_allclose(a.gamma_hat, b.gamma_hat, atol=1e-12)
        np.testing.assert_allclose(a.robust_cov, b.robust_cov, atol=1e-12)

    def test_weights_equal_subsetting(self):
        data = clustered_trial(seed=8)
        mask = RngStream(3).bernoulli(0.7, data.n_total).astype(bool)
        a = fit_gee(data, OUTCOME, working="exchangeable", weights=mask)
        b = fit_gee(data.subset(mask), OUTCOME, working="exchangeable")
        np.testing.assert_array_equal(a.gamma_hat, b.gamma_hat)
        np.testing.assert_array_equal(a.robust_cov, b.robust_cov)
        assert a.n_obs == int(mask.sum())


class TestBehaviour:
    def test_recovers_known_coefficients(self):
        data = clustered_trial(seed=9, n_clusters=300, mean_size=20)
        fit = fit_gee(data, OUTCOME, working="exchangeable")
        truth = np.array([1.0, 1.0, 0.75, -1.2])
        se = np.sqrt(np.diag(fit.robust_cov))
        assert np.all(np.abs(fit.gamma_hat - truth) < 4.0 * se)
        # intraclass correlation of the residuals is positive here
        assert 0.02 < fit.working.rho < 0.6
        assert not fit.rho_truncated

    def test_robust_se_accessors(self):
        data = clustered_trial(seed=10)
        fit = fit_gee(data, OUTCOME)
        j = fit.column_labels.index("A:M")
        assert fit.coefficient("A:M") == pytest.approx(float(fit.gamma_hat[j]))
        assert fit.robust_se("A:M") == pytest.approx(
            float(np.sqrt(fit.robust_cov[j, j]))
        )

    def test_singular_design_raises(self):
        data = clustered_trial(seed=11)
        dup = Formula(terms=((), ("A",), ("A", "A")))  # A*A == A for binary A
        with pytest.raises(ConvergenceError, match="rank deficient"):
            fit_gee(data, dup)

    def test_all_singleton_clusters(self):
        s = RngStream(12)
        n = 40
        data = TrialData(
            cluster_sizes=np.ones(n, dtype=np.int64),
            treatment=(np.arange(n) % 2).astype(np.int64),
            outcome=s.standard_normal(n),
            modifier=s.bernoulli(0.5, n).astype(float),
            observed=np.ones(n, dtype=bool),
            covariates=s.standard_normal((n, 1)),
        )
        fit = fit_gee(data, OUTCOME, working="exchangeable")
        assert fit.working.rho == 0.0
        ind = fit_gee(data, OUTCOME, working="independence")
        np.testing.assert_allclose(fit.gamma_hat, ind.gamma_hat, atol=1e-12)


class TestAteEstimate:
    def test_hand_checked_delta_method(self):
        data = clustered_trial(seed=13)
        fit = fit_gee(data, OUTCOME)
        m = data.modifier
        estimate, variance = ate_estimate(fit, m)
        m_bar = float(m.mean())
        labels = fit.column_labels
        ja, jam = labels.index("A"), labels.index("A:M")
        expected = fit.gamma_hat[ja] + fit.gamma_hat[jam] * m_bar
        grad = np.zeros(4)
        grad[ja], grad[jam] = 1.0, m_bar
        assert estimate == pytest.approx(float(expected), abs=1e-14)
        assert variance == pytest.approx(float(grad @ fit.robust_cov @ grad), abs=1e-14)

    def test_centered_refit_equivalence(self):
        # Refitting with M centered at its mean makes the A coefficient
        # the ATE estimator; its robust variance must match the delta
        # method to the pinned tolerance.
        data = clustered_trial(seed=14)
        fit = fit_gee(data, OUTCOME)
        estimate, variance = ate_estimate(fit, data.modifier)
        centered = data.with_modifier(data.modifier - data.modifier.mean())
        refit = fit_gee(centered, OUTCOME)
        assert refit.coefficient("A") == pytest.approx(estimate, abs=1e-6)
        assert refit.robust_se("A") ** 2 == pytest.approx(variance, abs=1e-6)


class TestDegenerateData:
    def test_noiseless_saturated_fit_is_exact(self):
        # Four observations, four parameters, zero residuals: the fit
        # must interpolate and report a zero robust covariance.
        gamma_true = np.array([0.3, -1.1, 0.7, 2.0])
        treatment = np.array([0, 1], dtype=np.int64)
        a_row = np.array([0.0, 0.0, 1.0, 1.0])
        modifier = np.array([0.0, 1.0, 0.0, 1.0])
        y = (
            gamma_true[0]
            + gamma_true[1] * a_row
            + gamma_true[2] * modifier
            + gamma_true[3] * a_row * modifier
        )
        data = TrialData(
            cluster_sizes=np.array([2, 2], dtype=np.int64),
            treatment=treatment,
            outcome=y,
            modifier=modifier,
            observed=np.ones(4, dtype=bool),
            covariates=np.zeros((4, 0)),
        )
        for working in ("independence", "exchangeable"):
            fit = fit_gee(data, OUTCOME, working=working)
            np.testing.assert_allclose(fit.gamma_hat, gamma_true, atol=1e-9)
            np.testing.assert_allclose(fit.robust_cov, 0.0, atol=1e-20)

    def test_unit_weights_match_unweighted(self):
        data = clustered_trial(seed=15)
        fit = fit_gee(data, OUTCOME)
        weighted = fit_gee(data, OUTCOME, weights=np.ones(data.n_total))
        np.testing.assert_array_equal(weighted.gamma_hat, fit.gamma_hat)
        np.testing.assert_array_equal(weighted.robust_cov, fit.robust_cov)
