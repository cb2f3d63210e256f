"""Estimation of heterogeneous treatment effects in cluster-randomized
trials when a binary effect modifier is partially missing.

The package provides the five analysis routes compared in the simulation
harness (complete-case analysis and single, multiple, multilevel
multiple, and fully Bayesian multilevel multiple imputation), GEE
outcome models with robust variance, the data-generating mechanisms, and
reporting utilities.  See the submodules for the pieces:

- :mod:`crt_hte.data`: trial containers, formulas, design matrices, CSV I/O
- :mod:`crt_hte.rng`: seeded streams and exact Polya-Gamma sampling
- :mod:`crt_hte.gee`: GEE estimation with sandwich covariance
- :mod:`crt_hte.glmm`: logistic random-intercept models (adaptive quadrature)
- :mod:`crt_hte.impute`: imputation model specifications and draws
- :mod:`crt_hte.gibbs`: the Bayesian multilevel imputation sampler
- :mod:`crt_hte.pooling`: combining rules across imputed datasets
- :mod:`crt_hte.dgm`: simulation scenarios
- :mod:`crt_hte.harness`: per-iteration analysis and metric aggregation
- :mod:`crt_hte.wfhs`: the worksite-trial reanalysis protocol
- :mod:`crt_hte.report`: CSV/JSON/SVG outputs
- :mod:`crt_hte.cli`: the ``crt-hte`` command-line entry point
"""

__version__ = "0.1.0"
