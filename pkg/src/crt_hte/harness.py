"""Simulation harness: run the method grid over iterations and score it.

One iteration generates a trial, runs complete-case analysis plus the
four imputation methods under each requested imputation-model
specification, and emits one record per (method, specification,
estimand). Metrics aggregate records cell by cell over the converged
iterations, so every method is scored on the identical set of generated
trials.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Formula
from .dgm import ScenarioConfig, TrueEstimands, generate
from .errors import ConvergenceError, ValidationError
from .gee import GeeFit, ate_estimate, fit_gee
from .gibbs import GibbsConfig, bmmi_impute
from .impute import (
    FORMULA_KINDS,
    ImputationSpec,
    draw_completion,
    fit_imputation_model,
)
from .pooling import pool, wald_interval
from .rng import RngStream

__all__ = [
    "METHODS",
    "ESTIMANDS",
    "OUTCOME_FORMULA",
    "RunConfig",
    "IterationRecord",
    "MetricCell",
    "run_iteration",
    "run_grid",
    "compute_metrics",
]

METHODS = ("CCA", "SI", "MI", "MMI", "BMMI")
ESTIMANDS = ("HTE", "ATE")

# Marginal outcome model [1, A, M, A:M]; gamma_3 is the A:M coefficient.
OUTCOME_FORMULA = Formula(terms=((), ("A",), ("M",), ("A", "M")))

_HTE_LABEL = "A:M"


@dataclass(frozen=True)
class RunConfig:
    """Full configuration of one simulation run."""

    trial: ScenarioConfig
    n_iterations: int
    methods: tuple[str, ...] = METHODS
    spec_kinds: tuple[str, ...] = FORMULA_KINDS
    n_imputations: int = 15
    seed_base: int = 1000
    working: str = "exchangeable"
    wald_reference: str = "normal"
    nu_obs_mode: str = "standard"
    tau_update: str = "standard"
    gibbs_burnin: int = 1000
    gibbs_thin: int = 100
    prior_variance: float = 100.0
    level: float = 0.95

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValidationError("n_iterations must be positive")
        if self.seed_base < 1:
            raise ValidationError("seed_base must be positive")
        methods = tuple(m.upper() for m in self.methods)
        for m in methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}")
        # execution order is fixed to keep per-iteration RNG consumption
        # independent of how the methods were listed
        object.__setattr__(
            self, "methods", tuple(m for m in METHODS if m in methods)
        )
        kinds = tuple(ImputationSpec(k).formula_kind for k in self.spec_kinds)
        if len(set(kinds)) != len(kinds):
            raise ValidationError("duplicate imputation specifications")
        object.__setattr__(
            self, "spec_kinds", tuple(k for k in FORMULA_KINDS if k in kinds)
        )
        if self.wald_reference not in ("normal", "t"):
            raise ValidationError("wald_reference must be 'normal' or 't'")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")
        if self.n_imputations < 2:
            raise ValidationError("n_imputations must be at least 2")

    def gibbs_config(self) -> GibbsConfig:
        return GibbsConfig(
            burnin=self.gibbs_burnin,
            thin=self.gibbs_thin,
            n_imputations=self.n_imputations,
            prior_variance=self.prior_variance,
            tau_update=self.tau_update,
        )


@dataclass(frozen=True)
class IterationRecord:
    """One estimate from one method on one generated trial."""

    iteration: int
    method: str
    imputation_spec: str
    estimand: str
    estimate: float
    std_error: float
    ci_low: float
    ci_high: float
    rejected_null: bool
    converged: bool


@dataclass(frozen=True)
class MetricCell:
    """Performance measures for one (method, specification, estimand)."""

    method: str
    imputation_spec: str
    estimand: str
    n_converged: int
    bias: float
    coverage: float
    power_or_type1: float
    mse: float
    mcse_coverage: float


def _wald_df(config: RunConfig, fit: GeeFit):
    if config.wald_reference == "normal":
        return None
    return fit.n_clusters - len(fit.column_labels)


def _single_fit_records(
    iteration, method, spec_label, fit, modifier_values, config
) -> list[IterationRecord]:
    """HTE and ATE records from one GEE fit with Wald inference."""
    alpha = 1.0 - config.level
    df = _wald_df(config, fit)
    j = fit.column_labels.index(_HTE_LABEL)
    pairs = [
        ("HTE", float(fit.gamma_hat[j]), float(fit.robust_cov[j, j])),
    ]
    ate, ate_var = ate_estimate(fit, modifier_values)
    pairs.append(("ATE", ate, ate_var))
    out = []
    for estimand, estimate, variance in pairs:
        lo, hi, p = wald_interval(estimate, variance, config.level, df)
        out.append(
            IterationRecord(
                iteration=iteration,
                method=method,
                imputation_spec=spec_label,
                estimand=estimand,
                estimate=estimate,
                std_error=math.sqrt(variance),
                ci_low=lo,
                ci_high=hi,
                rejected_null=bool(p < alpha),
                converged=fit.converged,
            )
        )
    return out


def _pooled_records(
    iteration, method, spec_label, fits, completions, config
) -> list[IterationRecord]:
    """HTE and ATE records pooled over the completed-data fits."""
    alpha = 1.0 - config.level
    c = fits[0].n_clusters
    j = fits[0].column_labels.index(_HTE_LABEL)
    hte_est = np.array([float(f.gamma_hat[j]) for f in fits])
    hte_var = np.array([float(f.robust_cov[j, j]) for f in fits])
    ate_pairs = [
        ate_estimate(f, comp.imputed_modifier)
        for f, comp in zip(fits, completions)
    ]
    ate_est = np.array([p[0] for p in ate_pairs])
    ate_var = np.array([p[1] for p in ate_pairs])
    converged = all(f.converged for f in fits)
    out = []
    for estimand, est, var in (("HTE", hte_est, hte_var), ("ATE", ate_est, ate_var)):
        pooled = pool(
            est,
            var,
            n_clusters=c,
            level=config.level,
            nu_obs_mode=config.nu_obs_mode,
        )
        out.append(
            IterationRecord(
                iteration=iteration,
                method=method,
                imputation_spec=spec_label,
                estimand=estimand,
                estimate=pooled.estimate,
                std_error=math.sqrt(pooled.total_var),
                ci_low=pooled.ci_low,
                ci_high=pooled.ci_high,
                rejected_null=bool(pooled.p_value < alpha),
                converged=converged,
            )
        )
    return out


def _failed_records(iteration, method, spec_label) -> list[IterationRecord]:
    nan = float("nan")
    return [
        IterationRecord(
            iteration=iteration,
            method=method,
            imputation_spec=spec_label,
            estimand=estimand,
            estimate=nan,
            std_error=nan,
            ci_low=nan,
            ci_high=nan,
            rejected_null=False,
            converged=False,
        )
        for estimand in ESTIMANDS
    ]


def run_iteration(config: RunConfig, k: int) -> list[IterationRecord]:
    """Run every requested method on the trial of iteration ``k``.

    The iteration owns the stream seeded ``seed_base * k`` and consumes
    it in a fixed order: trial generation first, then the methods in
    canonical order (SI, MI, MMI, BMMI) with specifications in Table-row
    order inside each method. Fitters only ever see the masked trial
    data; the generator's unmasked modifier is never read here.
    Non-convergence of any ingredient yields NaN records flagged
    ``converged=False`` instead of aborting the batch.
    """
    if k < 1:
        raise ValidationError("iteration numbers start at 1")
    rng = RngStream(config.seed_base * k)
    data = generate(config.trial, rng).data

    records: list[IterationRecord] = []
    if "CCA" in config.methods:
        try:
            fit = fit_gee(
                data,
                OUTCOME_FORMULA,
                working=config.working,
                weights=data.observed,
                modifier_values=data.modifier,
            )
            records += _single_fit_records(
                k, "CCA", "", fit, data.modifier[data.observed], config
            )
        except ConvergenceError:
            records += _failed_records(k, "CCA", "")

    # SI and MI reuse one single-level fit per specification; MMI fits
    # the multilevel version once. Fitting consumes no randomness, so
    # caching does not disturb the draw sequence.
    model_cache: dict = {}

    def imputation_model(spec: ImputationSpec):
        key = (spec.formula_kind, spec.multilevel)
        if key not in model_cache:
            try:
                model_cache[key] = fit_imputation_model(data, spec)
            except ConvergenceError as exc:
                model_cache[key] = exc
        cached = model_cache[key]
        if isinstance(cached, ConvergenceError):
            raise cached
        return cached

    for method in config.methods:
        if method == "CCA":
            continue
        for kind in config.spec_kinds:
            try:
                if method == "SI":
                    spec = ImputationSpec(kind, n_imputations=config.n_imputations)
                    completed = draw_completion(imputation_model(spec), data, rng)
                    fit = fit_gee(
                        data,
                        OUTCOME_FORMULA,
                        working=config.working,
                        modifier_values=completed.imputed_modifier,
                    )
                    records += _single_fit_records(
                        k, method, kind, fit, completed.imputed_modifier, config
                    )
                    continue
                if method == "MI":
                    spec = ImputationSpec(kind, n_imputations=config.n_imputations)
                    model = imputation_model(spec)
                    completions = [
                        draw_completion(model, data, rng)
                        for _ in range(config.n_imputations)
                    ]
                elif method == "MMI":
                    spec = ImputationSpec(
                        kind, multilevel=True, n_imputations=config.n_imputations
                    )
                    model = imputation_model(spec)
                    completions = [
                        draw_completion(model, data, rng)
                        for _ in range(config.n_imputations)
                    ]
                else:
                    spec = ImputationSpec(
                        kind, multilevel=True, n_imputations=config.n_imputations
                    )
                    completions = bmmi_impute(
                        data, spec, config.gibbs_config(), rng
                    )
                fits = [
                    fit_gee(
                        data,
                        OUTCOME_FORMULA,
                        working=config.working,
                        modifier_values=comp.imputed_modifier,
                    )
                    for comp in completions
                ]
                records += _pooled_records(
                    k, method, kind, fits, completions, config
                )
            except ConvergenceError:
                records += _failed_records(k, method, kind)
    return records


def _iteration_task(config: RunConfig, k: int) -> list[IterationRecord]:
    return run_iteration(config, k)


def run_grid(config: RunConfig, n_workers: int = 1) -> list[IterationRecord]:
    """Run all iterations; output order is fixed regardless of workers."""
    if n_workers < 1:
        raise ValidationError("n_workers must be positive")
    ks = range(1, config.n_iterations + 1)
    if n_workers == 1:
        batches = [run_iteration(config, k) for k in ks]
    else:
        chunk = max(1, config.n_iterations // (4 * n_workers))
        with ProcessPoolExecutor(max_workers=n_workers) as pool_:
            batches = list(
                pool_.map(_iteration_task, [config] * len(ks), ks, chunksize=chunk)
            )
    return [record for batch in batches for record in batch]


def expected_record_count(config: RunConfig) -> int:
    n_cells = ("CCA" in config.methods) + (
        len(config.methods) - ("CCA" in config.methods)
    ) * len(config.spec_kinds)
    return config.n_iterations * n_cells * len(ESTIMANDS)


def compute_metrics(
    records: list[IterationRecord], truth: TrueEstimands
) -> list[MetricCell]:
    """Aggregate records into per-cell performance measures.

    Only converged records enter each cell; an empty cell keeps NaN
    measures with ``n_converged = 0``. Coverage and rejection are judged
    against the oracle truth of the record's estimand.
    """
    truth_by_estimand = {"HTE": truth.gamma3_true, "ATE": truth.ate_true}
    cells: dict[tuple, list[IterationRecord]] = {}
    for record in records:
        key = (record.method, record.imputation_spec, record.estimand)
        cells.setdefault(key, []).append(record)

    out = []
    for key in sorted(
        cells,
        key=lambda key: (
            METHODS.index(key[0]),
            "" if key[1] == "" else FORMULA_KINDS.index(key[1]),
            ESTIMANDS.index(key[2]),
        ),
    ):
        # fixed summation order makes the measures exactly invariant to
        # the order records arrive in
        group = sorted(
            (r for r in cells[key] if r.converged), key=lambda r: r.iteration
        )
        n = len(group)
        if n == 0:
            out.append(
                MetricCell(*key, 0, *([float("nan")] * 5))
            )
            continue
        target = truth_by_estimand[key[2]]
        estimates = np.array([r.estimate for r in group])
        covered = np.array(
            [r.ci_low <= target <= r.ci_high for r in group], dtype=float
        )
        coverage = float(covered.mean())
        out.append(
            MetricCell(
                method=key[0],
                imputation_spec=key[1],
                estimand=key[2],
                n_converged=n,
                bias=float(np.mean(estimates - target)),
                coverage=coverage,
                power_or_type1=float(
                    np.mean([r.rejected_null for r in group])
                ),
                mse=float(np.mean((estimates - target) ** 2)),
                mcse_coverage=math.sqrt(coverage * (1.0 - coverage) / n),
            )
        )
    return out
