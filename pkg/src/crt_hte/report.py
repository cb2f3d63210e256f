"""Run outputs: records/metrics CSV, run manifest JSON, and SVG figures.

Floats are written with 17 significant digits so files round-trip
exactly and identical runs produce byte-identical tables. Figures are
self-contained SVG: one file per estimand, metric rows by method
columns, each panel tracing the metric across imputation-model
specifications with the complete-case value as a dashed reference line.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

from . import __version__
from .dgm import true_estimands
from .harness import ESTIMANDS, IterationRecord, MetricCell, RunConfig

__all__ = [
    "RECORD_COLUMNS",
    "METRIC_COLUMNS",
    "RunManifest",
    "write_records",
    "read_records",
    "write_metrics",
    "write_figures",
    "build_manifest",
    "write_manifest",
]

RECORD_COLUMNS = (
    "iteration",
    "method",
    "imputation_spec",
    "estimand",
    "estimate",
    "std_error",
    "ci_low",
    "ci_high",
    "rejected_null",
    "converged",
)

METRIC_COLUMNS = (
    "method",
    "imputation_spec",
    "estimand",
    "n_converged",
    "bias",
    "coverage",
    "power_or_type1",
    "mse",
    "mcse_coverage",
)

_FIGURE_ROWS = (
    ("bias", "Bias"),
    ("coverage", "Coverage"),
    ("mse", "MSE"),
    ("power_or_type1", "Type I Error / Power"),
)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _fmt_bool(value: bool) -> str:
    return "true" if value else "false"


def _open_write(path):
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_records(records: list[IterationRecord], path) -> None:
    """Write records as CSV in the fixed column order."""
    with _open_write(path) as handle:
        handle.write(",".join(RECORD_COLUMNS) + "\n")
        for r in records:
            handle.write(
                ",".join(
                    (
                        str(r.iteration),
                        r.method,
                        r.imputation_spec,
                        r.estimand,
                        _fmt(r.estimate),
                        _fmt(r.std_error),
                        _fmt(r.ci_low),
                        _fmt(r.ci_high),
                        _fmt_bool(r.rejected_null),
                        _fmt_bool(r.converged),
                    )
                )
                + "\n"
            )


def read_records(path) -> list[IterationRecord]:
    """Read a records CSV written by :func:`write_records`."""
    try:
        with open(path, newline="") as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not lines or tuple(lines[0].split(",")) != RECORD_COLUMNS:
        raise ValueError(f"{path} is not a records CSV")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        f = line.split(",")
        out.append(
            IterationRecord(
                iteration=int(f[0]),
                method=f[1],
                imputation_spec=f[2],
                estimand=f[3],
                estimate=float(f[4]),
                std_error=float(f[5]),
                ci_low=float(f[6]),
                ci_high=float(f[7]),
                rejected_null=f[8] == "true",
                converged=f[9] == "true",
            )
        )
    return out


def write_metrics(table: list[MetricCell], path) -> None:
    """Write the metric table as CSV in the fixed column order."""
    with _open_write(path) as handle:
        handle.write(",".join(METRIC_COLUMNS) + "\n")
        for cell in table:
            handle.write(
                ",".join(
                    (
                        cell.method,
                        cell.imputation_spec,
                        cell.estimand,
                        str(cell.n_converged),
                        _fmt(cell.bias),
                        _fmt(cell.coverage),
                        _fmt(cell.power_or_type1),
                        _fmt(cell.mse),
                        _fmt(cell.mcse_coverage),
                    )
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

_PANEL_W = 190
_PANEL_H = 130
_MARGIN_LEFT = 70
_MARGIN_TOP = 40
_MARGIN_BOTTOM = 50
_GAP = 18


def _row_range(values):
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return (0.0, 1.0)
    low, high = min(finite), max(finite)
    if high - low < 1e-12:
        pad = max(0.5, abs(high) * 0.1)
        return (low - pad, high + pad)
    pad = 0.08 * (high - low)
    return (low - pad, high + pad)


def _svg_escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_figures(table: list[MetricCell], out_dir) -> None:
    """Write one SVG per estimand into ``out_dir``.

    Layout: metric rows (bias, coverage, MSE, rejection rate) by method
    columns; each panel plots the metric against the imputation-model
    specification, with the complete-case value as a dashed horizontal
    reference where available.
    """
    os.makedirs(out_dir, exist_ok=True)
    for estimand in ESTIMANDS:
        cells = [c for c in table if c.estimand == estimand]
        if not cells:
            continue
        methods = []
        for c in cells:
            if c.method != "CCA" and c.method not in methods:
                methods.append(c.method)
        specs = []
        for c in cells:
            if c.imputation_spec and c.imputation_spec not in specs:
                specs.append(c.imputation_spec)
        cca = {
            (c.estimand): c for c in cells if c.method == "CCA"
        }.get(estimand)
        if not methods or not specs:
            continue

        width = _MARGIN_LEFT + len(methods) * (_PANEL_W + _GAP)
        height = _MARGIN_TOP + len(_FIGURE_ROWS) * (_PANEL_H + _GAP) + _MARGIN_BOTTOM
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            'font-family="sans-serif" font-size="10">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" '
            f'font-size="13">{_svg_escape(estimand)} performance by method '
            "and imputation model</text>",
        ]

        by_key = {(c.method, c.imputation_spec): c for c in cells}
        for i, (field, row_label) in enumerate(_FIGURE_ROWS):
            row_values = [
                getattr(by_key[(m, s)], field)
                for m in methods
                for s in specs
                if (m, s) in by_key
            ]
            if cca is not None:
                row_values.append(getattr(cca, field))
            lo, hi = _row_range(row_values)
            y0 = _MARGIN_TOP + i * (_PANEL_H + _GAP)

            def to_y(v):
                return y0 + _PANEL_H * (1.0 - (v - lo) / (hi - lo))

            parts.append(
                f'<text x="14" y="{y0 + _PANEL_H / 2:.1f}" text-anchor="middle" '
                f'transform="rotate(-90 14 {y0 + _PANEL_H / 2:.1f})">'
                f"{_svg_escape(row_label)}</text>"
            )
            for j, method in enumerate(methods):
                x0 = _MARGIN_LEFT + j * (_PANEL_W + _GAP)
                parts.append(
                    f'<rect x="{x0}" y="{y0}" width="{_PANEL_W}" '
                    f'height="{_PANEL_H}" fill="none" stroke="#888"/>'
                )
                if i == 0:
                    parts.append(
                        f'<text x="{x0 + _PANEL_W / 2:.1f}" y="{y0 - 6}" '
                        f'text-anchor="middle" font-size="12">'
                        f"{_svg_escape(method)}</text>"
                    )
                for value, yy in ((lo, to_y(lo)), (hi, to_y(hi))):
                    parts.append(
                        f'<text x="{x0 - 4}" y="{yy + 3:.1f}" '
                        f'text-anchor="end" font-size="8">{value:.3g}</text>'
                    )
                if cca is not None and math.isfinite(getattr(cca, field)):
                    yy = to_y(getattr(cca, field))
                    parts.append(
                        f'<line x1="{x0}" y1="{yy:.1f}" x2="{x0 + _PANEL_W}" '
                        f'y2="{yy:.1f}" stroke="#b22" stroke-dasharray="5,3"/>'
                    )
                step = _PANEL_W / (len(specs) + 1)
                points = []
                for s_idx, spec in enumerate(specs):
                    cell = by_key.get((method, spec))
                    if cell is None or not math.isfinite(getattr(cell, field)):
                        continue
                    px = x0 + step * (s_idx + 1)
                    py = to_y(getattr(cell, field))
                    points.append((px, py))
                    parts.append(
                        f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" '
                        'fill="#226"/>'
                    )
                if len(points) > 1:
                    path = " ".join(f"{px:.1f},{py:.1f}" for px, py in points)
                    parts.append(
                        f'<polyline points="{path}" fill="none" stroke="#226"/>'
                    )
                if i == len(_FIGURE_ROWS) - 1:
                    for s_idx, spec in enumerate(specs):
                        px = x0 + step * (s_idx + 1)
                        parts.append(
                            f'<text x="{px:.1f}" y="{y0 + _PANEL_H + 12}" '
                            f'text-anchor="end" font-size="8" transform='
                            f'"rotate(-35 {px:.1f} {y0 + _PANEL_H + 12})">'
                            f"{_svg_escape(spec)}</text>"
                        )
        if cca is not None:
            parts.append(
                f'<text x="{_MARGIN_LEFT}" y="{height - 8}" font-size="9" '
                'fill="#b22">dashed line: complete-case analysis</text>'
            )
        parts.append("</svg>")
        path = os.path.join(out_dir, f"{estimand.lower()}.svg")
        with _open_write(path) as handle:
            handle.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to rerun and audit a simulation run."""

    version: str
    config: dict
    seed_base: int
    n_workers: int
    decision_flags: dict
    estimand_truth: dict
    record_count: int
    non_convergent_records: int
    non_convergent_by_method: dict
    started: str
    finished: str


def build_manifest(
    config: RunConfig,
    records: list[IterationRecord],
    *,
    n_workers: int,
    started: str,
    finished: str,
) -> RunManifest:
    """Assemble the manifest for a finished run.

    The estimand block carries both the oracle ATE truth (built on the
    Monte Carlo modifier prevalence, which the latent intercept pulls
    below the plain inverse-logit value) and the conventional rounded
    reference, so the difference between them is visible in the output
    rather than silently resolved.
    """
    truth = true_estimands(config.trial)
    bad = [r for r in records if not r.converged]
    by_method: dict[str, int] = {}
    for r in bad:
        by_method[r.method] = by_method.get(r.method, 0) + 1
    return RunManifest(
        version=__version__,
        config=dataclasses.asdict(config),
        seed_base=config.seed_base,
        n_workers=n_workers,
        decision_flags={
            "working_correlation": config.working,
            "wald_reference": config.wald_reference,
            "nu_obs_mode": config.nu_obs_mode,
            "tau_update": config.tau_update,
            "imputation_draws": "eblup_conditional_bernoulli",
        },
        estimand_truth={
            "gamma3_true": truth.gamma3_true,
            "e_m_oracle": truth.e_m,
            "ate_true": truth.ate_true,
            "ate_reference_rounded": truth.ate_reference_rounded,
        },
        record_count=len(records),
        non_convergent_records=len(bad),
        non_convergent_by_method=by_method,
        started=started,
        finished=finished,
    )


def write_manifest(manifest: RunManifest, path) -> None:
    with _open_write(path) as handle:
        json.dump(dataclasses.asdict(manifest), handle, indent=2, sort_keys=True)
        handle.write("\n")
