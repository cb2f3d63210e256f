"""Pólya-Gamma Gibbs sampler for Bayesian multilevel imputation.

The modifier follows a logistic random-intercept model. Each sweep
augments with Pólya-Gamma latents (Polson, Scott & Windle 2013), which
makes the fixed-effect and random-intercept conditionals Gaussian and
the precision conditional Gamma, then redraws the missing modifier
entries from their Bernoulli conditionals. Thinned post-burnin states
provide posterior-sampled completions; unlike the improper frequentist
draws, successive completions reflect imputation-parameter uncertainty.

The fixed-effect prior is N(eta_hat_O, prior_variance * I) centered at a
frequentist fit of the imputation model, per-cluster intercepts are
N(0, 1/tau_alpha), and tau_alpha carries a Gamma(c, d) hyperprior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from .data import Formula, TrialData, build_design
from .errors import ConvergenceError, ValidationError
from .glmm import fit_logistic, fit_logistic_glmm
from .impute import CompletedDataset, ImputationSpec, expand_formula
from .rng import RngStream

__all__ = [
    "GibbsConfig",
    "GibbsState",
    "GibbsContext",
    "gibbs_init",
    "gibbs_sweep",
    "eta_conditional",
    "alpha_conditional",
    "tau_conditional",
    "bmmi_impute",
]

TAU_UPDATES = ("standard", "literal")


@dataclass(frozen=True)
class GibbsConfig:
    """Chain-length and prior settings for the sampler."""

    burnin: int = 1000
    thin: int = 100
    n_imputations: int = 15
    prior_variance: float = 100.0
    c_hyper: float = 0.01
    d_hyper: float = 0.01
    tau_update: str = "standard"

    def __post_init__(self):
        if self.burnin < 0:
            raise ValidationError("burnin must be nonnegative")
        if self.thin < 1:
            raise ValidationError("thin must be positive")
        if self.n_imputations < 1:
            raise ValidationError("n_imputations must be positive")
        if self.prior_variance <= 0.0:
            raise ValidationError("prior_variance must be positive")
        if self.c_hyper <= 0.0 or self.d_hyper <= 0.0:
            raise ValidationError("Gamma hyperparameters must be positive")
        if self.tau_update not in TAU_UPDATES:
            raise ValidationError(
                f"tau_update must be one of {TAU_UPDATES}, got {self.tau_update!r}"
            )

    @property
    def total_sweeps(self) -> int:
        return self.burnin + self.thin * self.n_imputations

    def collection_sweeps(self) -> tuple[int, ...]:
        """1-based sweep indices at which completions are collected."""
        return tuple(
            self.burnin + self.thin * (d + 1) for d in range(self.n_imputations)
        )


@dataclass
class GibbsState:
    """Mutable chain state; one instance is advanced in place."""

    eta: np.ndarray
    alpha: np.ndarray
    tau_alpha: float
    m_current: np.ndarray
    omega: np.ndarray


@dataclass(frozen=True)
class GibbsContext:
    """Immutable quantities shared by every sweep of one chain.

    The design matrix never involves the modifier, so it is fixed for
    the whole chain even as missing modifier entries are redrawn.
    """

    design: np.ndarray
    eta_prior: np.ndarray
    cluster_index: np.ndarray
    cluster_sizes: np.ndarray
    starts: np.ndarray
    missing: np.ndarray
    config: GibbsConfig
    column_labels: tuple[str, ...] = field(default=())


def gibbs_init(
    data: TrialData,
    spec: ImputationSpec,
    config: GibbsConfig,
    rng: RngStream,
    formula: Formula | None = None,
) -> tuple[GibbsState, GibbsContext]:
    """Build the chain state: steps 1-3 of the sweep scheme.

    Missing modifier entries are initialized with Bernoulli draws at the
    observed prevalence; the prior center eta_hat_O is a random-intercept
    fit of the imputation model on the initialized data, falling back to
    a plain logistic fit when the mixed fit does not converge. Both
    failing aborts the chain with ConvergenceError.
    """
    if formula is None:
        formula = expand_formula(spec, data.n_covariates)
    design = build_design(formula, data)
    w = design.values
    obs = data.observed
    if not obs.any():
        raise ConvergenceError("no observed modifier values to initialize from")

    m_current = data.modifier.astype(float).copy()
    miss = ~obs
    if miss.any():
        prevalence = float(data.modifier[obs].mean())
        m_current[miss] = rng.bernoulli(
            np.full(int(miss.sum()), prevalence)
        ).astype(float)

    eta_prior = None
    try:
        mixed = fit_logistic_glmm(
            w, m_current, data.cluster_index, data.n_clusters
        )
        if mixed.converged:
            eta_prior = mixed.eta_hat
    except ConvergenceError:
        pass
    if eta_prior is None:
        plain = fit_logistic(w, m_current)
        if not plain.converged:
            raise ConvergenceError(
                "both prior-center fits (mixed and plain) failed to converge"
            )
        eta_prior = plain.eta_hat

    state = GibbsState(
        eta=eta_prior.copy(),
        alpha=np.zeros(data.n_clusters),
        tau_alpha=0.5,
        m_current=m_current,
        omega=np.ones(data.n_total),
    )
    context = GibbsContext(
        design=w,
        eta_prior=eta_prior.copy(),
        cluster_index=data.cluster_index,
        cluster_sizes=data.cluster_sizes.astype(float),
        starts=data.starts,
        missing=miss,
        config=config,
        column_labels=design.column_labels,
    )
    return state, context


def _eta_system(context, m_current, omega, alpha):
    """Precision matrix and right-hand side of the eta conditional."""
    w = context.design
    prior_prec = 1.0 / context.config.prior_variance
    kappa = m_current - 0.5
    alpha_rows = alpha[context.cluster_index]
    precision = w.T @ (omega[:, None] * w)
    precision[np.diag_indices_from(precision)] += prior_prec
    rhs = prior_prec * context.eta_prior + w.T @ (kappa - omega * alpha_rows)
    return rhs, precision


def eta_conditional(context, m_current, omega, alpha):
    """Gaussian conditional for the fixed effects given everything else.

    Returns (mean, precision) with precision W'OW + Sigma^-1 and mean
    solving it against Sigma^-1 eta_O + W'(kappa - omega * alpha_rows).
    """
    rhs, precision = _eta_system(context, m_current, omega, alpha)
    return np.linalg.solve(precision, rhs), precision


def alpha_conditional(context, m_current, omega, eta, tau_alpha):
    """Per-cluster Gaussian conditional for the random intercepts given
    the freshly drawn eta.

    Returns (means, precisions); precision_i = tau + sum_j omega_ij and
    the mean averages kappa_ij - omega_ij * (w_ij' eta) with it.
    """
    kappa = m_current - 0.5
    lp_fixed = context.design @ eta
    starts = context.starts
    precisions = tau_alpha + np.add.reduceat(omega, starts)
    numerators = np.add.reduceat(kappa - omega * lp_fixed, starts)
    return numerators / precisions, precisions


def tau_conditional(context, alpha):
    """Gamma conditional (shape, rate) for the intercept precision.

    The standard rate sums alpha_i^2/2; the literal variant weights each
    cluster by its size.
    """
    config = context.config
    shape = config.c_hyper + alpha.size / 2.0
    if config.tau_update == "literal":
        rate = config.d_hyper + 0.5 * float(
            np.sum(context.cluster_sizes * alpha**2)
        )
    else:
        rate = config.d_hyper + 0.5 * float(np.sum(alpha**2))
    return shape, rate


def _draw_eta(context, m_current, omega, alpha, rng):
    """Draw eta from its Gaussian conditional via its precision Cholesky.

    A failed factorization signals numerically degenerate omega; one
    retry with 1e-8 diagonal jitter is allowed before giving up.
    """
    rhs, precision = _eta_system(context, m_current, omega, alpha)
    try:
        lower = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        precision[np.diag_indices_from(precision)] += 1e-8
        try:
            lower = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError:
            raise ConvergenceError(
                "fixed-effect conditional precision not positive definite"
            ) from None
    mean = cho_solve((lower, True), rhs)
    z = rng.standard_normal(rhs.size)
    return mean + solve_triangular(lower, z, lower=True, trans="T")


def gibbs_sweep(state: GibbsState, context: GibbsContext, rng: RngStream) -> GibbsState:
    """Advance the chain one full sweep in place.

    Order: redraw missing modifiers, then omega, eta, alpha, tau. The
    linear predictor is computed once and serves both the modifier and
    omega draws; the alpha update uses the freshly drawn eta.
    """
    w = context.design
    ci = context.cluster_index
    lp = w @ state.eta + state.alpha[ci]

    miss = context.missing
    if miss.any():
        state.m_current[miss] = rng.bernoulli(expit(lp[miss])).astype(float)

    state.omega = rng.polya_gamma_vector(lp)

    state.eta = _draw_eta(context, state.m_current, state.omega, state.alpha, rng)

    means, precisions = alpha_conditional(
        context, state.m_current, state.omega, state.eta, state.tau_alpha
    )
    state.alpha = rng.normal(means, 1.0 / precisions)

    shape, rate = tau_conditional(context, state.alpha)
    state.tau_alpha = float(rng.gamma(shape, rate))
    return state


def bmmi_impute(
    data: TrialData,
    spec: ImputationSpec,
    config: GibbsConfig,
    rng: RngStream,
    formula: Formula | None = None,
    trace_path=None,
) -> list[CompletedDataset]:
    """Run the chain and collect thinned post-burnin completions.

    With defaults this runs 2500 sweeps and collects every 100th state
    after the 1000-sweep burnin. ``trace_path`` optionally dumps a CSV
    of (sweep, eta components, tau_alpha) for convergence inspection.
    """
    state, context = gibbs_init(data, spec, config, rng, formula)
    collect = set(config.collection_sweeps())
    completions: list[CompletedDataset] = []
    trace_file = open(trace_path, "w") if trace_path is not None else None
    try:
        if trace_file is not None:
            labels = context.column_labels or tuple(
                f"eta_{j}" for j in range(state.eta.size)
            )
            trace_file.write(
                "sweep," + ",".join(f"eta[{c}]" for c in labels) + ",tau_alpha\n"
            )
        for sweep in range(1, config.total_sweeps + 1):
            state = gibbs_sweep(state, context, rng)
            if trace_file is not None:
                values = ",".join(f"{v:.17g}" for v in state.eta)
                trace_file.write(f"{sweep},{values},{state.tau_alpha:.17g}\n")
            if sweep in collect:
                completions.append(
                    CompletedDataset(
                        base=data, imputed_modifier=state.m_current.copy()
                    )
                )
    finally:
        if trace_file is not None:
            trace_file.close()
    return completions
