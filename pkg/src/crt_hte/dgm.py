"""Benchmark data-generating mechanisms for the two simulation scenarios.

Both scenarios share the setup: Poisson cluster sizes, exact 1:1
cluster-level treatment allocation, and a binary modifier from a
random-intercept logistic model calibrated to a latent-scale ICC.
Scenario 1 adds one standard-normal covariate with an outcome model
containing treatment-by-modifier and covariate interactions and
covariate/outcome-dependent missingness. Scenario 2 uses three
covariates, two extra three-way outcome terms, and adds a cluster
random intercept to the missingness model.

True estimand values are defined against a Monte Carlo oracle for the
marginal modifier prevalence E(M), since the latent random intercept
pulls the prevalence below the plain inverse-logit of the intercept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import TrialData
from .errors import ValidationError
from .rng import RngStream

__all__ = [
    "BETA3_NONNULL",
    "ScenarioConfig",
    "GeneratedTrial",
    "TrueEstimands",
    "latent_icc_to_variance",
    "outcome_icc_to_variance",
    "generate",
    "modifier_prevalence_oracle",
    "true_estimands",
]

BETA3_NONNULL = -(1.0 + math.exp(-0.5))

_EM_ORACLE_SEED = 1_000_003
_EM_ORACLE_DRAWS = 10_000_000
_em_cache: dict[float, float] = {}


def latent_icc_to_variance(icc: float) -> float:
    """Random-intercept variance giving a latent-scale logistic ICC.

    Solves sigma^2 / (sigma^2 + pi^2/3) = icc.
    """
    if not 0.0 <= icc < 1.0:
        raise ValidationError("latent ICC must lie in [0, 1)")
    return icc / (1.0 - icc) * math.pi**2 / 3.0


def outcome_icc_to_variance(icc: float, residual_var: float) -> float:
    """Cluster-intercept variance giving an outcome ICC against residual_var."""
    if not 0.0 <= icc < 1.0:
        raise ValidationError("outcome ICC must lie in [0, 1)")
    if residual_var <= 0.0:
        raise ValidationError("residual variance must be positive")
    return icc * residual_var / (1.0 - icc)


@dataclass(frozen=True)
class ScenarioConfig:
    """Generator settings for one simulation cell."""

    scenario: int
    n_clusters: int
    beta3: float = 0.0
    mean_cluster_size: float = 50.0
    modifier_icc: float = 0.1
    outcome_icc: float = 0.1
    missing_icc: float = 0.1
    residual_var: float = 3.0
    impose_missingness: bool = True

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValidationError("scenario must be 1 or 2")
        if self.n_clusters < 4 or self.n_clusters % 2 != 0:
            raise ValidationError(
                "n_clusters must be an even number of at least 4 for 1:1 allocation"
            )
        if self.mean_cluster_size < 2.0:
            raise ValidationError("mean cluster size must be at least 2")
        latent_icc_to_variance(self.modifier_icc)
        latent_icc_to_variance(self.missing_icc)
        outcome_icc_to_variance(self.outcome_icc, self.residual_var)

    @property
    def n_covariates(self) -> int:
        return 1 if self.scenario == 1 else 3


@dataclass(frozen=True)
class GeneratedTrial:
    """One generated trial plus the unmasked modifier and diagnostics."""

    data: TrialData
    full_modifier: np.ndarray
    missing_fraction: float
    modifier_prevalence: float


def generate(config: ScenarioConfig, rng: RngStream) -> GeneratedTrial:
    """Generate one trial.

    Stream consumption order is fixed: cluster sizes (with per-cluster
    redraws until every size is at least 2), treatment permutation,
    modifier intercepts, modifier, covariates, outcome intercepts,
    residuals, missingness intercepts (scenario 2), missingness draw.
    """
    c = config.n_clusters
    sizes = rng.poisson(config.mean_cluster_size, c).astype(np.int64)
    while True:
        small = sizes < 2
        if not small.any():
            break
        sizes[small] = rng.poisson(config.mean_cluster_size, int(small.sum()))

    assignment = np.zeros(c, dtype=np.int64)
    assignment[: c // 2] = 1
    treatment = rng.permutation(assignment)

    n = int(sizes.sum())
    ci = np.repeat(np.arange(c), sizes)
    a_row = treatment[ci].astype(float)

    alpha = rng.normal(0.0, latent_icc_to_variance(config.modifier_icc), c)
    m_full = rng.bernoulli(expit(0.5 + alpha[ci])).astype(float)

    x = rng.standard_normal((n, config.n_covariates))
    kappa = rng.normal(
        0.0, outcome_icc_to_variance(config.outcome_icc, config.residual_var), c
    )
    eps = rng.normal(0.0, config.residual_var, n)

    x1 = x[:, 0]
    y = (
        1.0
        + a_row
        + 0.75 * m_full
        + config.beta3 * a_row * m_full
        + 0.8 * x1 * a_row
        - 0.4 * x1 * m_full
        + 0.7 * x1 * a_row * m_full
        + kappa[ci]
        + eps
    )
    if config.scenario == 2:
        y = y + 0.9 * x[:, 1] * a_row * m_full - 1.1 * x[:, 2] * a_row * m_full

    if config.impose_missingness:
        if config.scenario == 1:
            miss_logit = 1.2 + 0.5 * x1 - 0.2 * y
        else:
            zeta = rng.normal(0.0, latent_icc_to_variance(config.missing_icc), c)
            miss_logit = (
                1.5
                + 0.6 * x1
                + 1.2 * x[:, 1]
                - 0.8 * x[:, 2]
                - 0.2 * y
                + zeta[ci]
            )
        observed = rng.bernoulli(expit(miss_logit)).astype(bool)
    else:
        observed = np.ones(n, dtype=bool)

    data = TrialData(
        cluster_sizes=sizes,
        treatment=treatment,
        outcome=y,
        modifier=np.where(observed, m_full, 0.0),
        observed=observed,
        covariates=x,
    )
    return GeneratedTrial(
        data=data,
        full_modifier=m_full,
        missing_fraction=float(1.0 - observed.mean()),
        modifier_prevalence=float(m_full.mean()),
    )


def modifier_prevalence_oracle(modifier_icc: float = 0.1) -> float:
    """Marginal modifier prevalence E(M) by a 10^7-draw Monte Carlo oracle.

    Computed once per ICC at a dedicated fixed seed and cached; this
    value defines the truth that bias and coverage are judged against.
    """
    variance = latent_icc_to_variance(modifier_icc)
    cached = _em_cache.get(variance)
    if cached is not None:
        return cached
    stream = RngStream(_EM_ORACLE_SEED)
    sd = math.sqrt(variance)
    total = 0.0
    chunk = 1_000_000
    for _ in range(_EM_ORACLE_DRAWS // chunk):
        total += float(np.sum(expit(0.5 + sd * stream.standard_normal(chunk))))
    value = total / _EM_ORACLE_DRAWS
    _em_cache[variance] = value
    return value


@dataclass(frozen=True)
class TrueEstimands:
    """Oracle truth for one configuration.

    ``ate_reference_rounded`` carries the conventional rounded values (1
    at the null, 0 at the benchmark non-null coefficient) for reporting
    alongside the oracle-based truth; it is NaN for other coefficients.
    """

    gamma3_true: float
    ate_true: float
    e_m: float
    ate_reference_rounded: float


def true_estimands(config: ScenarioConfig) -> TrueEstimands:
    """HTE and ATE truth: gamma3 = beta3, ATE = 1 + beta3 * E(M)."""
    e_m = modifier_prevalence_oracle(config.modifier_icc)
    if config.beta3 == 0.0:
        rounded = 1.0
    elif config.beta3 == BETA3_NONNULL:
        rounded = 0.0
    else:
        rounded = math.nan
    return TrueEstimands(
        gamma3_true=config.beta3,
        ate_true=1.0 + config.beta3 * e_m,
        e_m=e_m,
        ate_reference_rounded=rounded,
    )
