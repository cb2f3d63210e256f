"""Worksite-trial reanalysis protocol.

A completed cluster-randomized worksite trial (sites assigned to a
work-family intervention, a fully observed binary employee-type
modifier, a continuous time-adequacy change outcome, and two ordinal
workplace covariates dichotomized at >= 4) is reanalyzed by imposing
controlled missingness on the modifier and comparing the five analysis
methods against the complete-data fit. Three missingness scenarios are
studied: completely random, covariate/outcome-driven, and the same with
interaction terms plus a site-level random intercept. Scenario 0 keeps
the data complete and serves as a degeneracy diagnostic.

The protocol is distribution-based, so it runs identically on a real
CSV extract and on the bundled synthetic stand-in generator.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Formula, TrialData, validate
from .dgm import latent_icc_to_variance
from .errors import ConvergenceError, ValidationError
from .gee import fit_gee
from .gibbs import GibbsConfig, bmmi_impute
from .harness import (
    METHODS,
    OUTCOME_FORMULA,
    IterationRecord,
    _pooled_records,
    _single_fit_records,
)
from .impute import ImputationSpec, draw_completion, fit_imputation_model
from .rng import RngStream

__all__ = [
    "WORKSITE_IMPUTATION_TERMS",
    "WfhsConfig",
    "WfhsMethodSummary",
    "WfhsResult",
    "load_worksite_csv",
    "synthesize_worksite",
    "impose_worksite_missingness",
    "wfhs_replicate",
    "write_summary",
]

# Imputation model for the reanalysis: outcome, treatment, both
# dichotomized covariates, and all two-way interactions among them.
WORKSITE_IMPUTATION_TERMS = (
    (),
    ("X1",),
    ("X2",),
    ("A",),
    ("Y",),
    ("X1", "X2"),
    ("X1", "A"),
    ("X1", "Y"),
    ("X2", "A"),
    ("X2", "Y"),
    ("A", "Y"),
)

_DEFAULT_COLUMNS = {
    "cluster": "cluster_id",
    "treatment": "treatment",
    "outcome": "outcome",
    "modifier": "modifier",
    "schedule_control": "schedule_control",
    "job_autonomy": "job_autonomy",
}


def load_worksite_csv(path, columns: dict | None = None) -> TrialData:
    """Read a worksite extract with a fully observed modifier.

    ``columns`` maps the roles in ``_DEFAULT_COLUMNS`` to the file's
    header names (the public extract does not fix them). The two ordinal
    covariates are dichotomized at >= 4 on load; the returned trial
    carries them as binary covariates X1 (schedule control) and X2 (job
    autonomy).
    """
    mapping = dict(_DEFAULT_COLUMNS)
    if columns:
        unknown = set(columns) - set(mapping)
        if unknown:
            raise ValidationError(f"unknown column roles {sorted(unknown)}")
        mapping.update(columns)
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise ValidationError("empty CSV file")
            missing = [
                name for name in mapping.values() if name not in reader.fieldnames
            ]
            if missing:
                raise ValidationError(f"CSV lacks columns {missing}")
            rows = list(reader)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ValidationError("CSV contains a header but no data rows")

    n = len(rows)
    cluster = np.empty(n, dtype=np.int64)
    arm = np.empty(n, dtype=np.int64)
    outcome = np.empty(n)
    modifier = np.empty(n)
    covs = np.empty((n, 2))
    for i, row in enumerate(rows):
        cluster[i] = int(row[mapping["cluster"]])
        arm[i] = int(row[mapping["treatment"]])
        outcome[i] = float(row[mapping["outcome"]])
        modifier[i] = float(row[mapping["modifier"]])
        covs[i, 0] = float(float(row[mapping["schedule_control"]]) >= 4.0)
        covs[i, 1] = float(float(row[mapping["job_autonomy"]]) >= 4.0)

    data = TrialData.from_long(
        cluster, arm, outcome, modifier, np.ones(n, dtype=bool), covs
    )
    validate(data)
    return data


def synthesize_worksite(rng: RngStream, n_clusters: int = 30) -> TrialData:
    """Generate a synthetic stand-in with the worksite trial's shape.

    Sites of 30 to 89 employees, exact 1:1 site-level allocation, a
    binary manager indicator with site-varying prevalence near 0.25,
    ordinal covariates with P(>= 4) = 0.5 dichotomized on the spot, and
    a small-in-magnitude continuous outcome change (site ICC a few
    percent, overall mean near -0.1).
    """
    if n_clusters < 4 or n_clusters % 2 != 0:
        raise ValidationError("n_clusters must be an even number of at least 4")
    sizes = 30 + (rng.uniform(n_clusters) * 60.0).astype(np.int64)
    assignment = np.zeros(n_clusters, dtype=np.int64)
    assignment[: n_clusters // 2] = 1
    treatment = rng.permutation(assignment)

    n = int(sizes.sum())
    ci = np.repeat(np.arange(n_clusters), sizes)
    a_row = treatment[ci].astype(float)

    manager_logit = -1.1 + rng.normal(0.0, 0.2, n_clusters)
    manager = rng.bernoulli(expit(manager_logit[ci])).astype(float)

    # ordinal 1..5 with P(>=4) = 0.5, dichotomized immediately
    ordinal_probs = np.array([0.10, 0.15, 0.25, 0.30, 0.20])
    cuts = np.cumsum(ordinal_probs)
    schedule = (np.searchsorted(cuts, rng.uniform(n)) + 1 >= 4).astype(float)
    autonomy = (np.searchsorted(cuts, rng.uniform(n)) + 1 >= 4).astype(float)

    kappa = rng.normal(0.0, 0.05, n_clusters)
    outcome = (
        -0.3
        + 0.2 * a_row
        + 0.15 * manager
        + 0.1 * a_row * manager
        + kappa[ci]
        + rng.normal(0.0, 0.8, n)
    )
    return TrialData(
        cluster_sizes=sizes,
        treatment=treatment,
        outcome=outcome,
        modifier=manager,
        observed=np.ones(n, dtype=bool),
        covariates=np.column_stack([schedule, autonomy]),
    )


def impose_worksite_missingness(
    data: TrialData, scenario: int, rng: RngStream
) -> TrialData:
    """Mask the modifier according to one of the study's scenarios.

    Scenario 1 is 20% missing completely at random; scenario 2 makes
    observation depend on the outcome and the two dichotomized
    covariates; scenario 3 adds outcome-by-covariate interactions and a
    site random intercept with latent-scale ICC 0.1. Scenario 0 imposes
    nothing (diagnostic).
    """
    if scenario not in (0, 1, 2, 3):
        raise ValidationError("scenario must be 0, 1, 2, or 3")
    if not data.observed.all():
        raise ValidationError("missingness must be imposed on complete data")
    if scenario == 0:
        return data
    n = data.n_total
    if scenario == 1:
        observed = rng.bernoulli(np.full(n, 0.8)).astype(bool)
    else:
        y = data.outcome
        c = data.covariates[:, 0]
        j = data.covariates[:, 1]
        logit = 2.0 + 0.5 * y - 0.6 * c - 0.3 * j
        if scenario == 3:
            zeta = rng.normal(
                0.0, latent_icc_to_variance(0.1), data.n_clusters
            )
            logit = (
                logit
                + zeta[data.cluster_index]
                + 0.05 * y * c
                - 0.15 * y * j
                + 0.1 * y * c * j
            )
        observed = rng.bernoulli(expit(logit)).astype(bool)
    return dataclasses.replace(
        data,
        modifier=np.where(observed, data.modifier, 0.0),
        observed=observed,
    )


@dataclass(frozen=True)
class WfhsConfig:
    """Settings for the replication protocol."""

    scenario: int
    n_replications: int = 500
    n_imputations: int = 15
    level: float = 0.95
    working: str = "exchangeable"
    wald_reference: str = "normal"
    nu_obs_mode: str = "standard"
    tau_update: str = "standard"
    gibbs_burnin: int = 1000
    gibbs_thin: int = 100
    prior_variance: float = 100.0

    def __post_init__(self):
        if self.scenario not in (0, 1, 2, 3):
            raise ValidationError("scenario must be 0, 1, 2, or 3")
        if self.n_replications < 1:
            raise ValidationError("n_replications must be positive")
        if self.n_imputations < 2:
            raise ValidationError("n_imputations must be at least 2")
        if self.wald_reference not in ("normal", "t"):
            raise ValidationError("wald_reference must be 'normal' or 't'")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")

    def gibbs_config(self) -> GibbsConfig:
        return GibbsConfig(
            burnin=self.gibbs_burnin,
            thin=self.gibbs_thin,
            n_imputations=self.n_imputations,
            prior_variance=self.prior_variance,
            tau_update=self.tau_update,
        )


@dataclass(frozen=True)
class WfhsMethodSummary:
    """Replication summary for one method and estimand."""

    method: str
    estimand: str
    n_used: int
    n_dropped: int
    mean_estimate: float
    sd_estimate: float
    mean_ci_low: float
    mean_ci_high: float
    pct_narrower: float
    pct_covering: float


@dataclass(frozen=True)
class WfhsResult:
    """Protocol output: reference fit, per-replication records, summaries."""

    config: WfhsConfig
    complete_reference: dict
    records: list
    summaries: list
    missing_fraction_mean: float


def _imputation_formula(multilevel: bool) -> Formula:
    return Formula(
        terms=WORKSITE_IMPUTATION_TERMS, has_random_intercept=multilevel
    )


def _reference_fits(data: TrialData, config: WfhsConfig) -> dict:
    fit = fit_gee(data, OUTCOME_FORMULA, working=config.working)
    records = _single_fit_records(0, "FULL", "", fit, data.modifier, config)
    return {
        r.estimand: {
            "estimate": float(r.estimate),
            "ci_low": float(r.ci_low),
            "ci_high": float(r.ci_high),
        }
        for r in records
    }


def wfhs_replicate(
    data: TrialData, config: WfhsConfig, rng: RngStream
) -> WfhsResult:
    """Impose missingness and rerun the five methods, many times.

    Per replication the methods run in the fixed order CCA, SI, MI, MMI,
    BMMI, all using the study's single imputation model. A method whose
    imputation or chain fails to converge is dropped for that
    replication and counted; the remaining methods keep their results.
    Summaries compare each replication's interval with the complete-data
    interval: the share strictly narrower than it and the share entirely
    containing it.
    """
    if not data.observed.all():
        raise ValidationError("the reanalysis needs a fully observed modifier")
    reference = _reference_fits(data, config)

    records: list[IterationRecord] = []
    missing_fractions = []
    for replication in range(1, config.n_replications + 1):
        masked = impose_worksite_missingness(data, config.scenario, rng)
        missing_fractions.append(1.0 - float(masked.observed.mean()))
        records += _replication_records(masked, config, replication, rng)

    summaries = _summarize(records, reference, config)
    return WfhsResult(
        config=config,
        complete_reference=reference,
        records=records,
        summaries=summaries,
        missing_fraction_mean=float(np.mean(missing_fractions)),
    )


def _replication_records(
    masked: TrialData, config: WfhsConfig, replication: int, rng: RngStream
) -> list[IterationRecord]:
    out: list[IterationRecord] = []

    try:
        fit = fit_gee(
            masked,
            OUTCOME_FORMULA,
            working=config.working,
            weights=masked.observed,
            modifier_values=masked.modifier,
        )
        out += _single_fit_records(
            replication,
            "CCA",
            "",
            fit,
            masked.modifier[masked.observed],
            config,
        )
    except ConvergenceError:
        pass

    single_model = None
    for method in ("SI", "MI", "MMI", "BMMI"):
        multilevel = method in ("MMI", "BMMI")
        spec = ImputationSpec(
            "main", multilevel=multilevel, n_imputations=config.n_imputations
        )
        formula = _imputation_formula(multilevel)
        try:
            if method == "BMMI":
                completions = bmmi_impute(
                    masked, spec, config.gibbs_config(), rng, formula=formula
                )
            else:
                if method in ("SI", "MI"):
                    if single_model is None:
                        single_model = fit_imputation_model(
                            masked, spec, formula=formula
                        )
                    model = single_model
                else:
                    model = fit_imputation_model(masked, spec, formula=formula)
                draws = 1 if method == "SI" else config.n_imputations
                completions = [
                    draw_completion(model, masked, rng) for _ in range(draws)
                ]
            fits = [
                fit_gee(
                    masked,
                    OUTCOME_FORMULA,
                    working=config.working,
                    modifier_values=comp.imputed_modifier,
                )
                for comp in completions
            ]
            if method == "SI":
                out += _single_fit_records(
                    replication,
                    "SI",
                    "",
                    fits[0],
                    completions[0].imputed_modifier,
                    config,
                )
            else:
                out += _pooled_records(
                    replication, method, "", fits, completions, config
                )
        except ConvergenceError:
            continue
    return out


def _summarize(records, reference, config) -> list[WfhsMethodSummary]:
    summaries = []
    for method in METHODS:
        for estimand in ("HTE", "ATE"):
            group = [
                r
                for r in records
                if r.method == method
                and r.estimand == estimand
                and r.converged
            ]
            n_dropped = config.n_replications - len(group)
            if not group:
                summaries.append(
                    WfhsMethodSummary(
                        method,
                        estimand,
                        0,
                        n_dropped,
                        *([float("nan")] * 6),
                    )
                )
                continue
            ref = reference[estimand]
            full_width = ref["ci_high"] - ref["ci_low"]
            estimates = np.array([r.estimate for r in group])
            widths = np.array([r.ci_high - r.ci_low for r in group])
            covering = np.array(
                [
                    r.ci_low <= ref["ci_low"] and r.ci_high >= ref["ci_high"]
                    for r in group
                ],
                dtype=float,
            )
            summaries.append(
                WfhsMethodSummary(
                    method=method,
                    estimand=estimand,
                    n_used=len(group),
                    n_dropped=n_dropped,
                    mean_estimate=float(estimates.mean()),
                    sd_estimate=float(estimates.std(ddof=1))
                    if len(group) > 1
                    else 0.0,
                    mean_ci_low=float(np.mean([r.ci_low for r in group])),
                    mean_ci_high=float(np.mean([r.ci_high for r in group])),
                    pct_narrower=float(np.mean(widths < full_width)),
                    pct_covering=float(covering.mean()),
                )
            )
    return summaries


_SUMMARY_COLUMNS = (
    "method",
    "estimand",
    "n_used",
    "n_dropped",
    "mean_estimate",
    "sd_estimate",
    "mean_ci_low",
    "mean_ci_high",
    "pct_narrower",
    "pct_covering",
)


def write_summary(result: WfhsResult, path) -> None:
    """Write the method summaries as CSV with lossless float formatting."""
    try:
        handle = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    with handle:
        handle.write(",".join(_SUMMARY_COLUMNS) + "\n")
        for s in result.summaries:
            handle.write(
                ",".join(
                    (
                        s.method,
                        s.estimand,
                        str(s.n_used),
                        str(s.n_dropped),
                        format(s.mean_estimate, ".17g"),
                        format(s.sd_estimate, ".17g"),
                        format(s.mean_ci_low, ".17g"),
                        format(s.mean_ci_high, ".17g"),
                        format(s.pct_narrower, ".17g"),
                        format(s.pct_covering, ".17g"),
                    )
                )
                + "\n"
            )
