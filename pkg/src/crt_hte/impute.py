"""Frequentist imputation drivers for the partially missing modifier.

Builds the five benchmark imputation-model formulas, fits a logistic
model for the modifier on complete cases (plain, or with a cluster
random intercept), and generates completed datasets by improper
imputation: the model is fit once and every draw treats its parameters
as fixed. Missing entries are filled with Bernoulli draws from the
fitted probabilities, never with thresholded predictions, so the
imputed modifier keeps its distributional spread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Formula, TrialData, build_design
from .errors import ConvergenceError, ValidationError
from .glmm import GlmmFit, fit_logistic, fit_logistic_glmm, predict_logistic
from .rng import RngStream

__all__ = [
    "ImputationSpec",
    "CompletedDataset",
    "ImputationModel",
    "expand_formula",
    "fit_imputation_model",
    "missing_probabilities",
    "draw_completion",
    "single_impute",
    "multiple_impute",
]

FORMULA_KINDS = ("main", "axy", "xxa", "xxa_yxa", "threeway")


def _canonical_kind(kind: str) -> str:
    name = kind.strip().lower().replace("-", "_")
    if name not in FORMULA_KINDS:
        raise ValidationError(
            f"unknown imputation formula kind {kind!r}; expected one of {FORMULA_KINDS}"
        )
    return name


@dataclass(frozen=True)
class ImputationSpec:
    """One imputation configuration: formula row, level, and draw count."""

    formula_kind: str
    multilevel: bool = False
    n_imputations: int = 15

    def __post_init__(self):
        object.__setattr__(self, "formula_kind", _canonical_kind(self.formula_kind))
        if self.n_imputations < 1:
            raise ValidationError("n_imputations must be positive")


@dataclass(frozen=True)
class CompletedDataset:
    """A trial with every modifier entry filled in.

    Observed entries are carried over unchanged; only entries that were
    missing in ``base`` are imputed.
    """

    base: TrialData
    imputed_modifier: np.ndarray

    @property
    def data(self) -> TrialData:
        return self.base.with_modifier(self.imputed_modifier)


@dataclass(frozen=True)
class ImputationModel:
    """A fitted imputation model, reusable across draws."""

    spec: ImputationSpec
    formula: Formula
    fit: GlmmFit


def expand_formula(spec: ImputationSpec, p: int) -> Formula:
    """Expand a formula kind against p covariates.

    The term order is pinned: intercept, covariate main effects,
    treatment, outcome, then interaction blocks (covariate-by-treatment,
    treatment-by-outcome, covariate-by-outcome, three-way), each block
    walking the covariates in index order.
    """
    if p < 1:
        raise ValidationError("imputation formulas require at least one covariate")
    xs = [f"X{k}" for k in range(1, p + 1)]
    terms = [()] + [(x,) for x in xs] + [("A",), ("Y",)]
    kind = spec.formula_kind
    if kind in ("xxa", "xxa_yxa", "threeway"):
        terms += [(x, "A") for x in xs]
    if kind in ("axy", "xxa_yxa", "threeway"):
        terms += [("A", "Y")]
    if kind == "threeway":
        terms += [(x, "Y") for x in xs]
        terms += [(x, "A", "Y") for x in xs]
    return Formula(terms=tuple(terms), has_random_intercept=spec.multilevel)


def fit_imputation_model(
    data: TrialData, spec: ImputationSpec, formula: Formula | None = None
) -> ImputationModel:
    """Fit the logistic imputation model on complete cases.

    ``formula`` overrides the Table-row expansion for callers that need
    a custom predictor set (the worksite reanalysis does). Raises
    ConvergenceError when the fitter does not converge (including
    separation), so callers can log and skip the iteration.
    """
    if formula is None:
        formula = expand_formula(spec, data.n_covariates)
    design = build_design(formula, data)
    obs = data.observed
    w = design.values[obs]
    y = data.modifier[obs].astype(float)
    if spec.multilevel:
        fit = fit_logistic_glmm(
            w, y, data.cluster_index[obs], data.n_clusters
        )
    else:
        fit = fit_logistic(w, y)
    if not fit.converged:
        raise ConvergenceError(
            f"imputation model ({spec.formula_kind}, "
            f"multilevel={spec.multilevel}) did not converge"
            + (" (separation)" if fit.separation else "")
        )
    return ImputationModel(spec=spec, formula=formula, fit=fit)


def missing_probabilities(model: ImputationModel, data: TrialData) -> np.ndarray:
    """Fitted success probabilities for the missing entries, in row order.

    Multilevel models condition on the estimated cluster intercepts, so
    clusters with unusually many observed ones get higher probabilities.
    """
    design = build_design(model.formula, data)
    miss = ~data.observed
    w = design.values[miss]
    cluster_index = data.cluster_index[miss] if model.fit.has_random_intercept else None
    return predict_logistic(model.fit, w, cluster_index)


def draw_completion(
    model: ImputationModel, data: TrialData, rng: RngStream
) -> CompletedDataset:
    """One Bernoulli completion from the fixed fitted model.

    Consumes no randomness when nothing is missing.
    """
    miss = ~data.observed
    imputed = data.modifier.astype(float).copy()
    if miss.any():
        imputed[miss] = rng.bernoulli(missing_probabilities(model, data)).astype(float)
    return CompletedDataset(base=data, imputed_modifier=imputed)


def single_impute(
    data: TrialData,
    spec: ImputationSpec,
    rng: RngStream,
    formula: Formula | None = None,
) -> CompletedDataset:
    """Fit once and return a single completed dataset."""
    return draw_completion(fit_imputation_model(data, spec, formula), data, rng)


def multiple_impute(
    data: TrialData,
    spec: ImputationSpec,
    rng: RngStream,
    formula: Formula | None = None,
) -> list[CompletedDataset]:
    """Fit once and return spec.n_imputations completed datasets."""
    if spec.n_imputations < 2:
        raise ValidationError("multiple imputation requires at least two draws")
    model = fit_imputation_model(data, spec, formula)
    return [draw_completion(model, data, rng) for _ in range(spec.n_imputations)]
