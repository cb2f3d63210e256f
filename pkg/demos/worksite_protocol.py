"""The worksite reanalysis protocol on synthetic stand-in data.

Builds a synthetic worksite trial (30 sites, fully observed employee
type), runs the zero-missingness diagnostic (every method must reproduce
the complete-data fit exactly), then imposes the covariate/outcome-driven
missingness scenario repeatedly and compares each method's interval with
the complete-data interval. Single imputation's interval falls below the
complete-data one often; the properly pooled methods' almost never do.
"""

from crt_hte.rng import RngStream
from crt_hte.wfhs import (
    WfhsConfig,
    synthesize_worksite,
    wfhs_replicate,
)

base = synthesize_worksite(RngStream(7))
print(
    f"stand-in trial: {base.n_clusters} sites of "
    f"{base.cluster_sizes.min()}-{base.cluster_sizes.max()} employees, "
    f"{base.n_total} total"
)

# Diagnostic: no missingness; everything must match the reference fit.
diag = wfhs_replicate(
    base,
    WfhsConfig(scenario=0, n_replications=1, n_imputations=4,
               gibbs_burnin=100, gibbs_thin=20),
    RngStream(1),
)
exact = all(
    s.mean_estimate == diag.complete_reference[s.estimand]["estimate"]
    and s.pct_covering == 1.0
    for s in diag.summaries
)
print(f"zero-missingness diagnostic: all methods exact -> {exact}\n")

# Scenario 2: observation depends on the outcome and both covariates.
config = WfhsConfig(
    scenario=2, n_replications=25, n_imputations=8,
    gibbs_burnin=200, gibbs_thin=25,
)
result = wfhs_replicate(base, config, RngStream(99))
print(
    f"scenario 2, {config.n_replications} replications, "
    f"mean missing fraction {result.missing_fraction_mean:.3f}"
)
ref = result.complete_reference["HTE"]
print(
    f"complete-data HTE {ref['estimate']:+.4f} "
    f"[{ref['ci_low']:+.4f}, {ref['ci_high']:+.4f}]\n"
)
print(f"{'method':6s} {'estimate':>9s} {'narrower':>9s} {'covering':>9s} {'dropped':>8s}")
for s in result.summaries:
    if s.estimand != "HTE":
        continue
    print(
        f"{s.method:6s} {s.mean_estimate:+9.4f} {s.pct_narrower:9.2f} "
        f"{s.pct_covering:9.2f} {s.n_dropped:8d}"
    )
print(
    "\n'narrower' = share of replications whose interval is narrower than"
    "\nthe complete-data interval; 'covering' = share whose interval"
    "\ncontains it entirely."
)
