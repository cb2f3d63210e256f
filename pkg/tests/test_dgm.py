"""Tests for the simulation data-generating mechanisms."""

import math

import numpy as np
import pytest
from scipy.special import expit

from crt_hte.data import Formula, validate
from crt_hte.dgm import (
    BETA3_NONNULL,
    ScenarioConfig,
    generate,
    latent_icc_to_variance,
    modifier_prevalence_oracle,
    outcome_icc_to_variance,
    true_estimands,
)
from crt_hte.errors import ValidationError
from crt_hte.gee import fit_gee
from crt_hte.glmm import fit_logistic_glmm
from crt_hte.rng import RngStream

# Value of the 10^7-draw prevalence oracle at its dedicated seed; an
# independent quadrature oracle must agree to within Monte Carlo noise.
EM_FROZEN = 0.61336084970308


def quadrature_prevalence(variance: float, n_nodes: int = 201) -> float:
    """E expit(0.5 + sqrt(variance) Z) by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    values = expit(0.5 + math.sqrt(variance) * nodes)
    return float(weights @ values / math.sqrt(2.0 * math.pi))


class TestIccConversions:
    def test_latent_trivial_endpoints(self):
        assert latent_icc_to_variance(0.0) == 0.0
        assert latent_icc_to_variance(0.5) == pytest.approx(
            math.pi**2 / 3.0, rel=1e-12
        )

    def test_latent_benchmark_value(self):
        v = latent_icc_to_variance(0.1)
        assert v == pytest.approx(math.pi**2 / 27.0, rel=1e-12)
        assert v == pytest.approx(0.3655, abs=1e-4)

    def test_latent_rejects_bad_icc(self):
        with pytest.raises(ValidationError):
            latent_icc_to_variance(1.0)
        with pytest.raises(ValidationError):
            latent_icc_to_variance(-0.01)

    def test_outcome_values(self):
        assert outcome_icc_to_variance(0.1, 3.0) == pytest.approx(1.0 / 3.0, rel=1e-12)
        assert outcome_icc_to_variance(0.0, 7.0) == 0.0
        assert outcome_icc_to_variance(0.5, 3.0) == pytest.approx(3.0, rel=1e-12)

    def test_outcome_rejects(self):
        with pytest.raises(ValidationError):
            outcome_icc_to_variance(1.0, 3.0)
        with pytest.raises(ValidationError):
            outcome_icc_to_variance(0.1, 0.0)


class TestConfigValidation:
    def test_odd_cluster_count_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioConfig(scenario=1, n_clusters=21)

    def test_too_few_clusters_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioConfig(scenario=1, n_clusters=2)

    def test_unknown_scenario_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioConfig(scenario=3, n_clusters=20)

    def test_small_mean_size_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioConfig(scenario=1, n_clusters=20, mean_cluster_size=1.0)

    def test_covariate_count_per_scenario(self):
        assert ScenarioConfig(scenario=1, n_clusters=20).n_covariates == 1
        assert ScenarioConfig(scenario=2, n_clusters=20).n_covariates == 3


class TestGenerateStructure:
    @pytest.mark.parametrize("scenario", [1, 2])
    def test_structural_validity(self, scenario):
        config = ScenarioConfig(scenario=scenario, n_clusters=20)
        trial = generate(config, RngStream(42))
        data = trial.data
        validate(data)
        assert data.n_clusters == 20
        assert data.n_covariates == config.n_covariates
        assert int(data.treatment.sum()) == 10
        assert data.cluster_sizes.min() >= 2
        assert trial.full_modifier.shape == (data.n_total,)
        assert set(np.unique(trial.full_modifier)) <= {0.0, 1.0}

    def test_masking_consistency(self):
        config = ScenarioConfig(scenario=2, n_clusters=30)
        trial = generate(config, RngStream(7))
        data = trial.data
        np.testing.assert_array_equal(
            data.modifier[data.observed], trial.full_modifier[data.observed]
        )
        assert trial.missing_fraction == pytest.approx(
            1.0 - data.observed.mean(), abs=1e-15
        )
        assert trial.modifier_prevalence == pytest.approx(
            trial.full_modifier.mean(), abs=1e-15
        )
        assert 0.0 < trial.missing_fraction < 1.0

    def test_determinism(self):
        config = ScenarioConfig(scenario=1, n_clusters=20, beta3=BETA3_NONNULL)
        a = generate(config, RngStream(55))
        b = generate(config, RngStream(55))
        np.testing.assert_array_equal(a.data.outcome, b.data.outcome)
        np.testing.assert_array_equal(a.data.observed, b.data.observed)
        np.testing.assert_array_equal(a.full_modifier, b.full_modifier)

    def test_distinct_seeds_differ(self):
        config = ScenarioConfig(scenario=1, n_clusters=20)
        a = generate(config, RngStream(1))
        b = generate(config, RngStream(2))
        assert a.data.outcome.shape != b.data.outcome.shape or not np.array_equal(
            a.data.outcome, b.data.outcome
        )

    def test_no_missingness_flag(self):
        config = ScenarioConfig(scenario=1, n_clusters=20, impose_missingness=False)
        trial = generate(config, RngStream(9))
        assert trial.data.observed.all()
        np.testing.assert_array_equal(trial.data.modifier, trial.full_modifier)
        assert trial.missing_fraction == 0.0


class TestCalibration:
    """Marginal rates and ICC round trips against the generating values."""

    @staticmethod
    def _mean_missing_fraction(beta3):
        config = ScenarioConfig(scenario=1, n_clusters=100, beta3=beta3)
        fractions = [
            generate(config, RngStream(1000 * (k + 1))).missing_fraction
            for k in range(50)
        ]
        return float(np.mean(fractions))

    def test_missing_fraction_null(self):
        assert self._mean_missing_fraction(0.0) == pytest.approx(0.32, abs=0.01)

    def test_missing_fraction_nonnull(self):
        assert self._mean_missing_fraction(BETA3_NONNULL) == pytest.approx(
            0.30, abs=0.01
        )

    def test_modifier_icc_round_trip(self):
        config = ScenarioConfig(scenario=1, n_clusters=200)
        trial = generate(config, RngStream(314))
        data = trial.data
        fit = fit_logistic_glmm(
            np.ones((data.n_total, 1)),
            trial.full_modifier,
            data.cluster_index,
            data.n_clusters,
        )
        assert fit.converged
        icc_hat = fit.sigma2_alpha / (fit.sigma2_alpha + math.pi**2 / 3.0)
        assert icc_hat == pytest.approx(0.1, abs=0.03)

    def test_outcome_icc_round_trip(self):
        # With the true mean model the GEE residuals are kappa + eps, so
        # the exchangeable moment estimate of rho recovers the outcome ICC.
        config = ScenarioConfig(scenario=1, n_clusters=200, impose_missingness=False)
        trial = generate(config, RngStream(271))
        formula = Formula(
            terms=(
                (),
                ("A",),
                ("M",),
                ("A", "M"),
                ("X1", "A"),
                ("X1", "M"),
                ("X1", "A", "M"),
            )
        )
        fit = fit_gee(trial.data, formula, working="exchangeable")
        assert fit.converged
        assert fit.working.rho == pytest.approx(0.1, abs=0.03)


class TestEstimands:
    def test_null_truth(self):
        te = true_estimands(ScenarioConfig(scenario=1, n_clusters=20, beta3=0.0))
        assert te.gamma3_true == 0.0
        assert te.ate_true == 1.0
        assert te.ate_reference_rounded == 1.0

    def test_nonnull_truth(self):
        te = true_estimands(
            ScenarioConfig(scenario=2, n_clusters=20, beta3=BETA3_NONNULL)
        )
        assert te.gamma3_true == pytest.approx(-1.60653, abs=1e-5)
        assert te.ate_true == pytest.approx(1.0 + BETA3_NONNULL * te.e_m, rel=1e-15)
        assert te.ate_reference_rounded == 0.0

    def test_prevalence_oracle_frozen_and_cross_checked(self):
        # The fixed-seed Monte Carlo value is pinned exactly; the
        # independent quadrature oracle must agree within MC noise
        # (standard error about 4e-5 at 10^7 draws).
        e_m = modifier_prevalence_oracle(0.1)
        assert e_m == pytest.approx(EM_FROZEN, abs=1e-12)
        assert e_m == pytest.approx(
            quadrature_prevalence(latent_icc_to_variance(0.1)), abs=2e-4
        )

    def test_prevalence_oracle_degenerate_icc(self):
        # Zero ICC collapses the mixture: every draw equals expit(0.5).
        assert modifier_prevalence_oracle(0.0) == pytest.approx(
            expit(0.5), rel=1e-12
        )

    def test_other_beta3_has_no_rounded_reference(self):
        te = true_estimands(ScenarioConfig(scenario=1, n_clusters=20, beta3=0.3))
        assert math.isnan(te.ate_reference_rounded)
        assert te.gamma3_true == 0.3

    def test_prevalence_diagnostic_tracks_oracle(self):
        config = ScenarioConfig(scenario=1, n_clusters=200)
        trial = generate(config, RngStream(11))
        assert trial.modifier_prevalence == pytest.approx(EM_FROZEN, abs=0.04)
