"""Trial data containers, model formulas, and design-matrix construction.

Data from a two-arm cluster-randomized trial are stored column-wise in
cluster-contiguous order: individuals of cluster 1 first, then cluster 2,
and so on.  Treatment is constant within a cluster, so it is stored once
per cluster.  The binary effect modifier may be partially missing; its
missingness is carried by an explicit boolean ``observed`` mask rather
than a sentinel value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

# Variables a formula term may reference.  "X<k>" refers to the k-th
# auxiliary covariate column (1-based).
_BASE_VARIABLES = ("A", "M", "Y")


@dataclass(frozen=True)
class TrialData:
    """Columnar trial data in cluster-contiguous order.

    Attributes:
        cluster_sizes: Number of individuals per cluster, shape (C,).
        treatment: Cluster-level treatment arm in {0, 1}, shape (C,).
        outcome: Continuous outcome, shape (N,).
        modifier: Binary effect modifier, shape (N,).  Entries where
            ``observed`` is False are placeholders and must not be read.
        observed: True where the modifier was recorded, shape (N,).
        covariates: Fully observed auxiliary covariates, shape (N, p).
    """

    cluster_sizes: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    modifier: np.ndarray
    observed: np.ndarray
    covariates: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.cluster_sizes.shape[0]

    @property
    def n_total(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def starts(self) -> np.ndarray:
        """Row index where each cluster begins, shape (C,)."""
        out = np.zeros(self.n_clusters, dtype=np.int64)
        np.cumsum(self.cluster_sizes[:-1], out=out[1:])
        return out

    @property
    def cluster_index(self) -> np.ndarray:
        """0-based cluster index per individual, shape (N,)."""
        return np.repeat(np.arange(self.n_clusters), self.cluster_sizes)

    @property
    def cluster_id(self) -> np.ndarray:
        """1-based cluster label per individual, shape (N,)."""
        return self.cluster_index + 1

    @property
    def treatment_by_row(self) -> np.ndarray:
        """Treatment expanded to one value per individual, shape (N,)."""
        return np.repeat(self.treatment, self.cluster_sizes)

    def subset(self, mask: np.ndarray) -> "TrialData":
        """Return the rows where ``mask`` is True as a new TrialData.

        Clusters that lose all their rows are dropped and the remaining
        clusters are renumbered consecutively; relative order is kept.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_total,):
            raise ValidationError("subset mask must have one entry per individual")
        kept_sizes = np.add.reduceat(mask.astype(np.int64), self.starts)
        nonempty = kept_sizes > 0
        return TrialData(
            cluster_sizes=kept_sizes[nonempty],
            treatment=self.treatment[nonempty],
            outcome=self.outcome[mask],
            modifier=self.modifier[mask],
            observed=self.observed[mask],
            covariates=self.covariates[mask],
        )

    def with_modifier(self, values: np.ndarray) -> "TrialData":
        """Return a copy whose modifier is fully observed with ``values``."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_total,):
            raise ValidationError("modifier values must have one entry per individual")
        return replace(
            self,
            modifier=values,
            observed=np.ones(self.n_total, dtype=bool),
        )

    @staticmethod
    def from_long(
        cluster_id: np.ndarray,
        treatment: np.ndarray,
        outcome: np.ndarray,
        modifier: np.ndarray,
        observed: np.ndarray,
        covariates: np.ndarray,
    ) -> "TrialData":
        """Build from per-individual arrays in arbitrary row order.

        Rows are grouped by ``cluster_id`` in order of first appearance;
        within a cluster the original row order is preserved.  Treatment
        must be constant within each cluster.
        """
        cluster_id = np.asarray(cluster_id)
        n = cluster_id.shape[0]
        _, first_pos, inverse = np.unique(
            cluster_id, return_index=True, return_inverse=True
        )
        # np.unique sorts labels; recover first-appearance order instead.
        appearance = np.argsort(np.argsort(first_pos, kind="stable"), kind="stable")
        rank = appearance[inverse]
        order = np.argsort(rank, kind="stable")

        rank = rank[order]
        treatment = np.asarray(treatment, dtype=np.int64)[order]
        sizes = np.bincount(rank)
        starts = np.zeros(sizes.shape[0], dtype=np.int64)
        np.cumsum(sizes[:-1], out=starts[1:])
        arm = treatment[starts]
        if np.any(treatment != np.repeat(arm, sizes)):
            raise ValidationError("treatment varies within a cluster")
        return TrialData(
            cluster_sizes=sizes,
            treatment=arm,
            outcome=np.asarray(outcome, dtype=float)[order],
            modifier=np.asarray(modifier, dtype=float)[order],
            observed=np.asarray(observed, dtype=bool)[order],
            covariates=np.asarray(covariates, dtype=float)[order],
        )


def validate(data: TrialData) -> None:
    """Check structural invariants; raise ValidationError on the first failure."""
    c = data.n_clusters
    n = data.n_total
    if c == 0:
        raise ValidationError("trial has no clusters")
    if np.any(data.cluster_sizes < 1):
        raise ValidationError("every cluster must contain at least one individual")
    if int(data.cluster_sizes.sum()) != n:
        raise ValidationError("cluster sizes do not sum to the number of rows")
    if data.treatment.shape != (c,):
        raise ValidationError("treatment must hold one value per cluster")
    if not np.isin(data.treatment, (0, 1)).all():
        raise ValidationError("treatment values must be 0 or 1")
    for name in ("modifier", "observed"):
        if getattr(data, name).shape != (n,):
            raise ValidationError(f"{name} must have one entry per individual")
    if data.observed.dtype != np.bool_:
        raise ValidationError("observed must be a boolean mask")
    if not np.isfinite(data.outcome).all():
        raise ValidationError("outcome must be fully observed and finite")
    if data.covariates.ndim != 2 or data.covariates.shape[0] != n:
        raise ValidationError("covariates must be a (n_total, p) array")
    if not np.isfinite(data.covariates).all():
        raise ValidationError("covariates must be fully observed and finite")
    m_obs = data.modifier[data.observed]
    if not np.isin(m_obs, (0.0, 1.0)).all():
        raise ValidationError("observed modifier values must be 0 or 1")


@dataclass(frozen=True)
class Formula:
    """Mean-model formula as a sequence of product terms.

    Each term is a tuple of variable names drawn from {"A", "M", "Y",
    "X1", ..., "Xp"}; the empty tuple is the intercept and must come
    first.  ``has_random_intercept`` marks a cluster-level random
    intercept for models that support one (it adds no fixed-effect
    column).
    """

    terms: tuple[tuple[str, ...], ...]
    has_random_intercept: bool = False

    def labels(self) -> tuple[str, ...]:
        return tuple("1" if t == () else ":".join(t) for t in self.terms)

    def references(self, variable: str) -> bool:
        return any(variable in t for t in self.terms)


def validate_formula(formula: Formula, n_covariates: int) -> None:
    """Raise ValidationError unless ``formula`` is well formed for p covariates."""
    if not formula.terms:
        raise ValidationError("formula needs at least one term")
    if formula.terms[0] != ():
        raise ValidationError("first formula term must be the intercept")
    seen = set()
    for term in formula.terms:
        key = tuple(sorted(term))
        if key in seen:
            raise ValidationError(f"duplicate formula term {term!r}")
        seen.add(key)
        for v in term:
            if v in _BASE_VARIABLES:
                continue
            if v.startswith("X") and v[1:].isdigit():
                k = int(v[1:])
                if 1 <= k <= n_covariates:
                    continue
                raise ValidationError(
                    f"term references {v} but only {n_covariates} covariates exist"
                )
            raise ValidationError(f"unknown variable {v!r} in formula term")


@dataclass(frozen=True)
class DesignMatrix:
    """Dense fixed-effects design with per-column labels."""

    values: np.ndarray
    column_labels: tuple[str, ...]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]


def build_design(
    formula: Formula,
    data: TrialData,
    modifier_values: np.ndarray | None = None,
) -> DesignMatrix:
    """Evaluate a formula against trial data.

    Args:
        formula: Terms to evaluate; validated against ``data``.
        data: Source columns.
        modifier_values: Optional complete replacement for the modifier
            column (for example an imputed version).  Required whenever
            the formula references M and the stored modifier has missing
            entries.

    Returns:
        DesignMatrix with one column per term, intercept first.
    """
    validate_formula(formula, data.n_covariates)
    n = data.n_total
    if modifier_values is not None:
        modifier_values = np.asarray(modifier_values, dtype=float)
        if modifier_values.shape != (n,):
            raise ValidationError("modifier_values must have one entry per individual")
    columns = {}

    def resolve(var: str) -> np.ndarray:
        if var not in columns:
            if var == "A":
                columns[var] = data.treatment_by_row.astype(float)
            elif var == "Y":
                columns[var] = data.outcome
            elif var == "M":
                if modifier_values is not None:
                    columns[var] = modifier_values
                elif data.observed.all():
                    columns[var] = data.modifier
                else:
                    raise ValidationError(
                        "formula references M but the modifier has missing values"
                        " and no replacement was supplied"
                    )
            else:
                columns[var] = data.covariates[:, int(var[1:]) - 1]
        return columns[var]

    out = np.empty((n, len(formula.terms)))
    for j, term in enumerate(formula.terms):
        if term == ():
            out[:, j] = 1.0
        else:
            col = resolve(term[0]).copy()
            for var in term[1:]:
                col *= resolve(var)
            out[:, j] = col
    return DesignMatrix(values=out, column_labels=formula.labels())


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

_FIXED_COLUMNS = ("cluster_id", "treatment", "outcome", "modifier")


def read_trial_csv(path) -> TrialData:
    """Read a trial from CSV.

    Expected header: ``cluster_id,treatment,outcome,modifier,x1,...,xp``
    (any number of trailing covariate columns, possibly none).  A missing
    modifier is an empty field or ``NA``.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty CSV file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != _FIXED_COLUMNS:
            raise ValidationError(
                "CSV header must start with cluster_id,treatment,outcome,modifier"
            )
        p = len(header) - 4
        for k, name in enumerate(header[4:], start=1):
            if name.lower() != f"x{k}":
                raise ValidationError(f"covariate column {k} must be named x{k}")
        rows = [row for row in reader if row]
    if not rows:
        raise ValidationError("CSV contains a header but no data rows")

    n = len(rows)
    cluster = np.empty(n, dtype=np.int64)
    arm = np.empty(n, dtype=np.int64)
    outcome = np.empty(n)
    modifier = np.zeros(n)
    observed = np.zeros(n, dtype=bool)
    covs = np.empty((n, p))
    for i, row in enumerate(rows):
        if len(row) != 4 + p:
            raise ValidationError(f"row {i + 2} has {len(row)} fields, expected {4 + p}")
        cluster[i] = int(row[0])
        arm[i] = int(row[1])
        outcome[i] = float(row[2])
        cell = row[3].strip()
        if cell not in ("", "NA"):
            modifier[i] = float(cell)
            observed[i] = True
        for k in range(p):
            covs[i, k] = float(row[4 + k])

    data = TrialData.from_long(cluster, arm, outcome, modifier, observed, covs)
    validate(data)
    return data


def write_trial_csv(data: TrialData, path) -> None:
    """Write a trial in the format accepted by :func:`read_trial_csv`.

    Floats carry 17 significant digits so a round trip is exact.
    """
    p = data.n_covariates
    header = list(_FIXED_COLUMNS) + [f"x{k}" for k in range(1, p + 1)]
    ids = data.cluster_id
    arm = data.treatment_by_row
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for i in range(data.n_total):
            row = [
                str(int(ids[i])),
                str(int(arm[i])),
                format(data.outcome[i], ".17g"),
                format(data.modifier[i], ".17g") if data.observed[i] else "NA",
            ]
            row.extend(format(data.covariates[i, k], ".17g") for k in range(p))
            writer.writerow(row)
