"""Command-line interface.

Four subcommands: ``simulate`` runs the simulation grid and writes
records, metrics, figures, and run metadata; ``wfhs`` runs the worksite
reanalysis protocol; ``pg-check`` verifies the Polya-Gamma sampler's
empirical means against the closed form; ``oracle-em`` prints the
modifier-prevalence oracle and the estimand truths derived from it.

``simulate`` and ``wfhs`` accept ``--config FILE`` pointing at a JSON
object whose keys are the long flag names (with or without hyphens);
flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dgm import (
    BETA3_NONNULL,
    ScenarioConfig,
    latent_icc_to_variance,
    modifier_prevalence_oracle,
    true_estimands,
)
from .errors import ValidationError
from .harness import RunConfig, compute_metrics, run_grid
from .impute import FORMULA_KINDS
from .report import (
    build_manifest,
    write_figures,
    write_manifest,
    write_metrics,
    write_records,
)
from .rng import RngStream, pg_mean, pg_var
from .wfhs import (
    WfhsConfig,
    load_worksite_csv,
    synthesize_worksite,
    wfhs_replicate,
    write_summary,
)

_PG_CHECK_GRID = (0.0, 0.5, 1.0, 2.0, 4.0)


def _spec_to_kind(name: str) -> str:
    return name.strip().replace("-", "_")


def _kind_to_spec(kind: str) -> str:
    return kind.replace("_", "-")


def _load_config_file(path) -> dict:
    try:
        with open(path) as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return {str(k).replace("-", "_"): v for k, v in raw.items()}


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Resolve each option as: command line, else config file, else default."""
    file_values = {}
    if getattr(args, "config", None) is not None:
        file_values = _load_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ValidationError(
                f"config file sets unknown options {sorted(unknown)}"
            )
    merged = {}
    for name, default in defaults.items():
        given = getattr(args, name)
        if given is not None:
            merged[name] = given
        elif name in file_values:
            merged[name] = file_values[name]
        else:
            merged[name] = default
    return merged


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


_SIMULATE_DEFAULTS = {
    "scenario": 1,
    "clusters": 50,
    "beta3": "null",
    "methods": "cca,si,mi,mmi,bmmi",
    "specs": ",".join(_kind_to_spec(k) for k in FORMULA_KINDS),
    "iterations": 100,
    "threads": 1,
    "seed_base": 1000,
    "tau_update": "standard",
    "nu_obs": "standard",
    "out": None,
}


def _run_simulate(args: argparse.Namespace) -> int:
    opts = _merge_config(args, _SIMULATE_DEFAULTS)
    if opts["out"] is None:
        raise ValidationError("--out is required (flag or config file)")
    if opts["beta3"] not in ("null", "nonnull"):
        raise ValidationError("--beta3 must be 'null' or 'nonnull'")
    beta3 = 0.0 if opts["beta3"] == "null" else BETA3_NONNULL
    config = RunConfig(
        trial=ScenarioConfig(
            scenario=int(opts["scenario"]),
            n_clusters=int(opts["clusters"]),
            beta3=beta3,
        ),
        n_iterations=int(opts["iterations"]),
        methods=tuple(m.strip() for m in str(opts["methods"]).split(",")),
        spec_kinds=tuple(
            _spec_to_kind(s) for s in str(opts["specs"]).split(",")
        ),
        seed_base=int(opts["seed_base"]),
        nu_obs_mode=str(opts["nu_obs"]),
        tau_update=str(opts["tau_update"]),
    )
    threads = int(opts["threads"])
    out = _prepare_out(opts["out"])

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    records = run_grid(config, n_workers=threads)
    finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    write_records(records, out / "records.csv")
    table = compute_metrics(records, true_estimands(config.trial))
    write_metrics(table, out / "metrics.csv")
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    write_figures(table, figures)
    manifest = build_manifest(
        config, records, n_workers=threads, started=started, finished=finished
    )
    write_manifest(manifest, out / "run-meta.json")

    bad = sum(not r.converged for r in records)
    print(
        f"simulate: {len(records)} records ({bad} non-converged) -> {out}"
    )
    return 0


_WFHS_DEFAULTS = {
    "data": None,
    "scenario": 2,
    "replications": 500,
    "seed": 1000,
    "tau_update": "standard",
    "nu_obs": "standard",
    "out": None,
}


def _run_wfhs(args: argparse.Namespace) -> int:
    opts = _merge_config(args, _WFHS_DEFAULTS)
    if opts["out"] is None:
        raise ValidationError("--out is required (flag or config file)")
    rng = RngStream(int(opts["seed"]))
    if opts["data"] is None:
        base = synthesize_worksite(rng)
        source = "synthetic"
    else:
        base = load_worksite_csv(opts["data"])
        source = str(opts["data"])
    config = WfhsConfig(
        scenario=int(opts["scenario"]),
        n_replications=int(opts["replications"]),
        nu_obs_mode=str(opts["nu_obs"]),
        tau_update=str(opts["tau_update"]),
    )
    out = _prepare_out(opts["out"])

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    result = wfhs_replicate(base, config, rng)
    finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    write_records(result.records, out / "records.csv")
    write_summary(result, out / "summary.csv")
    dropped = {
        s.method: s.n_dropped
        for s in result.summaries
        if s.estimand == "HTE" and s.n_dropped
    }
    meta = {
        "version": __version__,
        "command": "wfhs",
        "data": source,
        "n_clusters": base.n_clusters,
        "n_individuals": base.n_total,
        "seed": int(opts["seed"]),
        "config": {
            "scenario": config.scenario,
            "n_replications": config.n_replications,
            "n_imputations": config.n_imputations,
            "level": config.level,
            "working": config.working,
            "wald_reference": config.wald_reference,
            "nu_obs_mode": config.nu_obs_mode,
            "tau_update": config.tau_update,
            "gibbs_burnin": config.gibbs_burnin,
            "gibbs_thin": config.gibbs_thin,
        },
        "complete_reference": result.complete_reference,
        "missing_fraction_mean": result.missing_fraction_mean,
        "dropped_replications_by_method": dropped,
        "started": started,
        "finished": finished,
    }
    try:
        with open(out / "run-meta.json", "w") as handle:
            json.dump(meta, handle, indent=2, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {out / 'run-meta.json'}: {exc}") from exc

    print(
        f"wfhs scenario {config.scenario}: {config.n_replications} replications,"
        f" missing fraction {result.missing_fraction_mean:.4f} -> {out}"
    )
    return 0


def run_pg_check(n_draws: int = 100_000, seed: int = 1) -> list[dict]:
    """Empirical PG(1, c) means over the check grid vs the closed form.

    Each row carries the absolute z statistic of the mean against its
    Monte Carlo standard error; "ok" means |z| < 4.
    """
    if n_draws < 100:
        raise ValidationError("pg-check needs at least 100 draws")
    rng = RngStream(seed)
    rows = []
    for c in _PG_CHECK_GRID:
        draws = rng.polya_gamma_vector(np.full(n_draws, c))
        expected = pg_mean(1, c)
        se = math.sqrt(pg_var(1, c) / n_draws)
        z = abs(float(draws.mean()) - expected) / se
        rows.append(
            {
                "c": c,
                "mean": float(draws.mean()),
                "expected": expected,
                "z": z,
                "ok": z < 4.0,
            }
        )
    return rows


def _run_pg_check(args: argparse.Namespace) -> int:
    rows = run_pg_check(n_draws=args.draws, seed=args.seed)
    for row in rows:
        status = "ok" if row["ok"] else "FAIL"
        print(
            f"c={row['c']:<4g} mean={row['mean']:.6f} "
            f"expected={row['expected']:.6f} |z|={row['z']:.2f} {status}"
        )
    return 0 if all(row["ok"] for row in rows) else 1


def _run_oracle_em(args: argparse.Namespace) -> int:
    icc = args.icc
    e_m = modifier_prevalence_oracle(icc)
    print(f"latent ICC:          {icc:g}")
    print(f"latent variance:     {latent_icc_to_variance(icc):.6f}")
    print(f"E[modifier] oracle:  {e_m:.14f}")
    if icc == 0.1:
        truth = true_estimands(
            ScenarioConfig(scenario=1, n_clusters=20, beta3=BETA3_NONNULL)
        )
        print(f"ATE at non-null beta3: {truth.ate_true:.14f}")
        print(f"rounded reference:     {truth.ate_reference_rounded:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crt-hte",
        description="Missing-modifier methods for cluster-randomized trials",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the simulation grid")
    sim.add_argument("--config", help="JSON file pre-setting any flag")
    sim.add_argument("--scenario", type=int, choices=(1, 2))
    sim.add_argument("--clusters", type=int, help="number of clusters")
    sim.add_argument("--beta3", choices=("null", "nonnull"))
    sim.add_argument("--methods", help="comma list, e.g. cca,si,mi,mmi,bmmi")
    sim.add_argument(
        "--specs", help="comma list, e.g. main,axy,xxa,xxa-yxa,threeway"
    )
    sim.add_argument("--iterations", type=int)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--seed-base", dest="seed_base", type=int)
    sim.add_argument("--tau-update", dest="tau_update",
                     choices=("standard", "literal"))
    sim.add_argument("--nu-obs", dest="nu_obs",
                     choices=("standard", "literal"))
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(run=_run_simulate)

    wf = sub.add_parser("wfhs", help="run the worksite reanalysis protocol")
    wf.add_argument("--config", help="JSON file pre-setting any flag")
    wf.add_argument(
        "--data", help="worksite CSV; omitted -> synthetic stand-in"
    )
    wf.add_argument("--scenario", type=int, choices=(1, 2, 3))
    wf.add_argument("--replications", type=int)
    wf.add_argument("--seed", type=int)
    wf.add_argument("--tau-update", dest="tau_update",
                    choices=("standard", "literal"))
    wf.add_argument("--nu-obs", dest="nu_obs",
                    choices=("standard", "literal"))
    wf.add_argument("--out", help="output directory")
    wf.set_defaults(run=_run_wfhs)

    pg = sub.add_parser("pg-check", help="verify Polya-Gamma sampler means")
    pg.add_argument("--draws", type=int, default=100_000)
    pg.add_argument("--seed", type=int, default=1)
    pg.set_defaults(run=_run_pg_check)

    em = sub.add_parser(
        "oracle-em", help="print the modifier-prevalence oracle"
    )
    em.add_argument("--icc", type=float, default=0.1)
    em.set_defaults(run=_run_oracle_em)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
