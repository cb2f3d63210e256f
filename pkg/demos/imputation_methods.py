"""The five analysis routes on one trial with a missing modifier.

Generates a scenario-1 trial where about a third of the modifier values
are missing (the missingness depends on the outcome, so complete-case
analysis is systematically off), then runs complete-case analysis and
the four imputation routes with the three-way imputation specification.
The printed table shows the heterogeneity estimate with its interval
from each route; the imputation-based intervals account for the
uncertainty of the filled-in values through Rubin's rules.
"""

from crt_hte.data import Formula
from crt_hte.dgm import BETA3_NONNULL, ScenarioConfig, generate
from crt_hte.gee import fit_gee
from crt_hte.gibbs import GibbsConfig, bmmi_impute
from crt_hte.impute import ImputationSpec, draw_completion, fit_imputation_model
from crt_hte.pooling import pool, wald_interval
from crt_hte.rng import RngStream

OUTCOME = Formula(terms=((), ("A",), ("M",), ("A", "M")))
D = 10

rng = RngStream(7)
trial = generate(ScenarioConfig(scenario=1, n_clusters=40, beta3=BETA3_NONNULL), rng)
data = trial.data
print(
    f"missing modifier fraction: {trial.missing_fraction:.3f} "
    f"({data.n_total} individuals in {data.n_clusters} clusters)"
)
print(f"generating beta3 = {BETA3_NONNULL:.4f}\n")


def report(name, estimate, lo, hi):
    print(f"  {name:22s} {estimate:+.4f}  [{lo:+.4f}, {hi:+.4f}]")


def hte(fit):
    j = fit.column_labels.index("A:M")
    return float(fit.gamma_hat[j]), float(fit.robust_cov[j, j])


# Complete-case: drop rows with a missing modifier.
fit = fit_gee(
    data, OUTCOME, working="exchangeable", weights=data.observed,
    modifier_values=data.modifier,
)
est, var = hte(fit)
lo, hi, _ = wald_interval(est, var)
report("complete-case", est, lo, hi)

spec = ImputationSpec("threeway", n_imputations=D)
model = fit_imputation_model(data, spec)

# Single imputation: one completion, treated as if observed.
completed = draw_completion(model, data, rng)
fit = fit_gee(
    data, OUTCOME, working="exchangeable",
    modifier_values=completed.imputed_modifier,
)
est, var = hte(fit)
lo, hi, _ = wald_interval(est, var)
report("single imputation", est, lo, hi)


def pooled(name, completions):
    fits = [
        fit_gee(
            data, OUTCOME, working="exchangeable",
            modifier_values=comp.imputed_modifier,
        )
        for comp in completions
    ]
    pairs = [hte(f) for f in fits]
    result = pool(
        [p[0] for p in pairs], [p[1] for p in pairs],
        n_clusters=data.n_clusters,
    )
    report(name, result.estimate, result.ci_low, result.ci_high)


# Multiple imputation from the single-level model.
pooled("multiple imputation", [draw_completion(model, data, rng) for _ in range(D)])

# Multilevel multiple imputation: random-intercept imputation model.
mspec = ImputationSpec("threeway", multilevel=True, n_imputations=D)
mmodel = fit_imputation_model(data, mspec)
pooled(
    "multilevel MI", [draw_completion(mmodel, data, rng) for _ in range(D)]
)

# Bayesian multilevel MI: completions from the posterior chain.
gibbs = GibbsConfig(burnin=300, thin=30, n_imputations=D)
pooled("Bayesian multilevel MI", bmmi_impute(data, mspec, gibbs, rng))

print(
    "\nComplete-case drops a third of the rows and leans on a"
    " missingness-biased subsample; single imputation's interval ignores"
    " imputation noise; the pooled routes widen honestly."
)
