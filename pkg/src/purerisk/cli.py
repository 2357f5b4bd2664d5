"""Command-line front end.

Three subcommands share one convention: settings come from an optional JSON
config file, explicit flags override file values, and every run writes the
fully resolved configuration next to its outputs.

* ``simulate`` runs a synthetic study and writes bias/variance/coverage
  metrics (CSV plus an aligned text table).
* ``fit`` estimates hazard ratios and pure risks from cohort/survey CSV files
  and a registry JSON, writing one model JSON per method and the baseline
  hazard step functions.
* ``risk`` evaluates fitted models at new times, with standard errors where
  the stored replication supports them.

Commands are thin adapters over the library; all statistical work happens in
the imported modules. Exit codes: 0 success, 2 configuration problem, 3 data
problem, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .datamodel import (
    BaselineHazard,
    WeightedSample,
    read_registry_json,
    read_sample_csv,
)
from .coxengine import pure_risk
from .errors import ConfigError, DataError, EstimationError
from .pipeline import METHODS, AnalysisConfig, estimate
from .simharness import ScenarioConfig, run_scenario

_FLOAT_LIST = "comma-separated floats"


def _repr_cell(v) -> str:
    if v is None:
        return ""
    f = float(v)
    return "" if np.isnan(f) else repr(f)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return payload


# list-valued options accept either a JSON array or the flag's comma syntax
_LIST_KINDS = {"methods": str, "propensity_terms": str, "risk_times": float, "profile": float}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, config-file values, and explicit flags (in that order)."""
    cfg = dict(defaults)
    file_cfg = _load_config_file(args.config)
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid: {sorted(defaults)}")
    cfg.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key, kind in _LIST_KINDS.items():
        if isinstance(cfg.get(key), str):
            try:
                cfg[key] = _csv_list(kind)(cfg[key])
            except argparse.ArgumentTypeError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    return cfg


def _csv_list(kind):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [kind(v) for v in text]
        try:
            return [kind(part) for part in str(text).split(",") if part.strip() != ""]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _ensure_outdir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_json(path: str, payload: dict) -> None:
    def default(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        raise TypeError(f"cannot serialize {type(obj).__name__}")

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


# ---------------------------------------------------------------------------
# simulate

_SIMULATE_DEFAULTS = {
    "scenario": 1,
    "participation": "noninformative",
    "sims": 200,
    "seed": None,  # harness default applies when omitted
    "methods": list(METHODS),
    "jackknife": False,
    "population_size": 300_000,
    "cohort_size": 3_000,
    "survey_size": 6_000,
    "cohort_groups": 50,
    "survey_groups": 100,
    "risk_times": [1.0, 7.0, 15.0],
    "max_failure_rate": 0.05,
    "threads": 1,
    "save_replicates": False,
}


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _SIMULATE_DEFAULTS)
    out_dir = _ensure_outdir(args.out)
    kwargs = dict(
        scenario=int(cfg["scenario"]),
        participation=str(cfg["participation"]),
        population_size=int(cfg["population_size"]),
        cohort_size=int(cfg["cohort_size"]),
        survey_size=int(cfg["survey_size"]),
        n_sims=int(cfg["sims"]),
        methods=tuple(cfg["methods"]),
        jackknife=bool(cfg["jackknife"]),
        cohort_groups=int(cfg["cohort_groups"]),
        survey_groups=int(cfg["survey_groups"]),
        risk_times=tuple(float(t) for t in cfg["risk_times"]),
        max_failure_rate=float(cfg["max_failure_rate"]),
    )
    if cfg["seed"] is not None:
        kwargs["master_seed"] = int(cfg["seed"])
    scenario_cfg = ScenarioConfig(**kwargs)
    threads = int(cfg["threads"])
    resolved = dict(cfg, command="simulate", seed=scenario_cfg.master_seed, out=out_dir)
    _write_json(os.path.join(out_dir, "resolved_config.json"), resolved)

    result = run_scenario(scenario_cfg, threads=threads)

    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["method", "component", "truth", "mean_estimate",
             "rel_bias_pct", "variance", "mse", "coverage"]
        )
        for r in result.metrics.rows:
            w.writerow(
                [r.method, r.component, _repr_cell(r.truth), _repr_cell(r.mean_estimate),
                 _repr_cell(r.rel_bias_pct), _repr_cell(r.variance), _repr_cell(r.mse),
                 _repr_cell(r.coverage)]
            )
    text = result.metrics.to_text()
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(text + "\n")
    if cfg["save_replicates"]:
        with open(os.path.join(out_dir, "replicates.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["method", "replicate", "component", "estimate"]
            if result.standard_errors is not None:
                header.append("se")
            w.writerow(header)
            for m in scenario_cfg.methods:
                block = result.estimates[m]
                for r_idx in range(block.shape[0]):
                    for j, comp in enumerate(result.components):
                        row = [m, r_idx, comp, _repr_cell(block[r_idx, j])]
                        if result.standard_errors is not None:
                            row.append(_repr_cell(result.standard_errors[m][r_idx, j]))
                        w.writerow(row)
    print(text)
    if result.failed_sims:
        print(f"excluded {len(result.failed_sims)} failed simulation(s)", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# fit

_FIT_DEFAULTS = {
    "methods": list(METHODS),
    "propensity_terms": ["z1", "z2"],
    "risk_times": [1.0, 7.0, 15.0],
    "profile": None,
    "t_max": None,
    "jackknife": True,
    "cohort_groups": 50,
    "survey_groups": 100,
    "seed": 0,
    "poststratify": False,
    "truncate_negative": False,
    "collapse_empty": False,
    "max_failure_rate": 0.05,
    "threads": 1,
    "save_replicates": False,
}


def _strip_survey_incidence(survey: WeightedSample) -> WeightedSample:
    if all(r.incidence is None for r in survey.records):
        return survey
    print(
        "warning: survey file carries incidence columns; the reference survey "
        "contributes mortality follow-up only, so they are ignored",
        file=sys.stderr,
    )
    records = [replace(r, incidence=None, imputed_incidence=None) for r in survey.records]
    return WeightedSample(records, survey.weights)


def _model_payload(name: str, res, diagnostics: dict) -> dict:
    payload = {
        "method": name,
        "coefficients": res.beta.tolist(),
        "coefficient_se": None if res.beta_se is None else res.beta_se.tolist(),
        "profile": res.profile.tolist(),
        "risk_times": res.risk_times.tolist(),
        "risk": res.risk.tolist(),
        "risk_se": None if res.risk_se is None else res.risk_se.tolist(),
        "baseline": {
            "kind": res.baseline.kind,
            "times": res.baseline.times.tolist(),
            "cumulative": res.baseline.cumulative.tolist(),
        },
        "diagnostics": diagnostics,
        "failed_replicates": list(res.failed_replicates),
    }
    if res.beta_se is not None:
        payload["confidence_intervals"] = {
            k: v.tolist() for k, v in res.confidence_intervals().items()
        }
    return payload


def _read_input(reader, path: str):
    try:
        return reader(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _FIT_DEFAULTS)
    out_dir = _ensure_outdir(args.out)
    cohort = _read_input(read_sample_csv, args.cohort)
    survey = None
    if args.survey is not None:
        survey = _strip_survey_incidence(_read_input(read_sample_csv, args.survey))
    registry = _read_input(read_registry_json, args.registry)
    analysis = AnalysisConfig(
        methods=tuple(cfg["methods"]),
        propensity_terms=tuple(cfg["propensity_terms"]),
        risk_times=tuple(float(t) for t in cfg["risk_times"]),
        profile=None if cfg["profile"] is None else tuple(float(v) for v in cfg["profile"]),
        t_max=None if cfg["t_max"] is None else float(cfg["t_max"]),
        jackknife=bool(cfg["jackknife"]),
        cohort_groups=int(cfg["cohort_groups"]),
        survey_groups=int(cfg["survey_groups"]),
        seed=int(cfg["seed"]),
        poststratify=bool(cfg["poststratify"]),
        truncate_negative=bool(cfg["truncate_negative"]),
        collapse_empty=bool(cfg["collapse_empty"]),
        max_failure_rate=float(cfg["max_failure_rate"]),
    )
    if int(cfg["threads"]) > 1:
        print(
            "warning: fit replication runs sequentially; --threads applies to simulate",
            file=sys.stderr,
        )
    resolved = dict(
        cfg,
        command="fit",
        cohort=args.cohort,
        survey=args.survey,
        registry=args.registry,
        out=out_dir,
    )
    _write_json(os.path.join(out_dir, "resolved_config.json"), resolved)

    result = estimate(cohort, survey, registry, analysis)

    diagnostics = {
        k: (v.tolist() if isinstance(v, np.ndarray) else v)
        for k, v in result.diagnostics.items()
    }
    for m in analysis.methods:
        res = result[m]
        _write_json(os.path.join(out_dir, f"model_{m}.json"), _model_payload(m, res, diagnostics))
    with open(os.path.join(out_dir, "hazards.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "time", "cumulative_hazard"])
        for m in analysis.methods:
            base = result[m].baseline
            for t, v in zip(base.times, base.cumulative):
                w.writerow([m, _repr_cell(t), _repr_cell(v)])
    if cfg["save_replicates"] and analysis.jackknife:
        with open(os.path.join(out_dir, "replicates.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "replicate", "component", "estimate", "variance_factor"])
            for m in analysis.methods:
                res = result[m]
                comps = [f"beta_z{j + 1}" for j in range(len(res.beta))]
                comps += [f"risk_{t:g}" for t in res.risk_times]
                for r_idx, label in enumerate(res.replicate_labels):
                    for j, comp in enumerate(comps):
                        w.writerow(
                            [m, label, comp,
                             _repr_cell(res.replicate_estimates[r_idx, j]),
                             _repr_cell(res.variance_factors[r_idx])]
                        )
    for m in analysis.methods:
        res = result[m]
        coef = ", ".join(f"{b:+.4f}" for b in res.beta)
        if res.beta_se is not None:
            se = ", ".join(f"{s:.4f}" for s in res.beta_se)
            print(f"{m}: coefficients [{coef}] (se [{se}])")
        else:
            print(f"{m}: coefficients [{coef}]")
        for t, r in zip(res.risk_times, res.risk):
            print(f"{m}: risk at t={t:g} for the fitted profile: {r:.6f}")
    return 0


# ---------------------------------------------------------------------------
# risk

def _load_model(path: str) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("method", "coefficients", "profile", "risk_times", "baseline"):
        if key not in payload:
            raise DataError(f"{path}: missing model field {key!r}")
    return payload


def cmd_risk(args: argparse.Namespace) -> int:
    times = np.asarray(args.times, dtype=float)
    if times.size == 0:
        raise ConfigError("at least one evaluation time is required")
    if np.any(times < 0):
        raise ConfigError("evaluation times must be >= 0")
    rows = []
    for path in args.model:
        model = _load_model(path)
        beta = np.asarray(model["coefficients"], dtype=float)
        stored_profile = np.asarray(model["profile"], dtype=float)
        profile = stored_profile if args.profile is None else np.asarray(args.profile, dtype=float)
        if profile.shape != beta.shape:
            raise ConfigError(
                f"profile needs {len(beta)} covariate values, got {len(profile)}"
            )
        baseline = BaselineHazard(
            times=np.asarray(model["baseline"]["times"], dtype=float),
            cumulative=np.asarray(model["baseline"]["cumulative"], dtype=float),
            kind=model["baseline"].get("kind", "breslow"),
        )
        risks = pure_risk(baseline, beta, profile, times)
        # replication SEs are stored for the fitted profile at the fitted
        # grid; elsewhere only the point estimate is available
        se_known = (
            model.get("risk_se") is not None
            and np.array_equal(profile, stored_profile)
        )
        grid = np.asarray(model["risk_times"], dtype=float)
        grid_se = None if model.get("risk_se") is None else np.asarray(model["risk_se"], dtype=float)
        for t, r in zip(times, risks):
            se = lo = hi = None
            if t == 0.0:
                se, lo, hi = 0.0, 0.0, 0.0
            elif se_known:
                hit = np.flatnonzero(grid == t)
                if hit.size:
                    se = float(grid_se[hit[0]])
                    lo = float(r - 1.96 * se)
                    hi = float(r + 1.96 * se)
            rows.append((model["method"], float(t), float(r), se, lo, hi))
    header = ("method", "time", "risk", "se", "lower", "upper")
    body = [
        (m, f"{t:g}", f"{r:.6f}",
         "" if se is None else f"{se:.6f}",
         "" if lo is None else f"{lo:.6f}",
         "" if hi is None else f"{hi:.6f}")
        for m, t, r, se, lo, hi in rows
    ]
    widths = [max(len(header[j]), *(len(b[j]) for b in body)) for j in range(len(header))]
    print("  ".join(h.ljust(widths[j]) for j, h in enumerate(header)))
    print("  ".join("-" * widths[j] for j in range(len(header))))
    for b in body:
        print("  ".join(b[j].ljust(widths[j]) for j in range(len(header))))
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for m, t, r, se, lo, hi in rows:
                w.writerow([m, _repr_cell(t), _repr_cell(r), _repr_cell(se),
                            _repr_cell(lo), _repr_cell(hi)])
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="purerisk",
        description="Population-representative hazard-ratio and pure-risk estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a synthetic bias/variance/coverage study")
    sim.add_argument("--config", help="JSON file with defaults for any flag below")
    sim.add_argument("--scenario", type=int, choices=(1, 2, 3))
    sim.add_argument("--participation", choices=("noninformative", "informative"))
    sim.add_argument("--sims", type=int, help="number of simulated studies")
    sim.add_argument("--seed", type=int, help="master seed for the whole study")
    sim.add_argument("--methods", type=_csv_list(str), help="comma-separated subset of: " + ",".join(METHODS))
    sim.add_argument("--jackknife", action=argparse.BooleanOptionalAction)
    sim.add_argument("--population-size", dest="population_size", type=int)
    sim.add_argument("--cohort-size", dest="cohort_size", type=int)
    sim.add_argument("--survey-size", dest="survey_size", type=int)
    sim.add_argument("--cohort-groups", dest="cohort_groups", type=int)
    sim.add_argument("--survey-groups", dest="survey_groups", type=int)
    sim.add_argument("--risk-times", dest="risk_times", type=_csv_list(float), help=_FLOAT_LIST)
    sim.add_argument("--max-failure-rate", dest="max_failure_rate", type=float)
    sim.add_argument("--threads", type=int, help="worker processes for simulation replicates")
    sim.add_argument("--save-replicates", dest="save_replicates", action="store_true", default=None)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="estimate models from cohort/survey CSVs and a registry JSON")
    fit.add_argument("--config", help="JSON file with defaults for any flag below")
    fit.add_argument("--cohort", required=True, help="cohort CSV (incidence and mortality)")
    fit.add_argument("--survey", help="reference survey CSV (mortality only)")
    fit.add_argument("--registry", required=True, help="registry JSON with composite rates")
    fit.add_argument("--methods", type=_csv_list(str))
    fit.add_argument("--propensity-terms", dest="propensity_terms", type=_csv_list(str),
                     help="comma-separated participation-model terms, e.g. z1,z2,Dtilde")
    fit.add_argument("--risk-times", dest="risk_times", type=_csv_list(float), help=_FLOAT_LIST)
    fit.add_argument("--profile", type=_csv_list(float), help="covariate profile for risks")
    fit.add_argument("--t-max", dest="t_max", type=float)
    fit.add_argument("--jackknife", action=argparse.BooleanOptionalAction)
    fit.add_argument("--cohort-groups", dest="cohort_groups", type=int)
    fit.add_argument("--survey-groups", dest="survey_groups", type=int)
    fit.add_argument("--seed", type=int, help="seed for group assignment and imputation")
    fit.add_argument("--poststratify", action=argparse.BooleanOptionalAction)
    fit.add_argument("--truncate-negative", dest="truncate_negative",
                     action=argparse.BooleanOptionalAction)
    fit.add_argument("--collapse-empty", dest="collapse_empty",
                     action=argparse.BooleanOptionalAction)
    fit.add_argument("--max-failure-rate", dest="max_failure_rate", type=float)
    fit.add_argument("--threads", type=int)
    fit.add_argument("--save-replicates", dest="save_replicates", action="store_true", default=None)
    fit.add_argument("--out", required=True, help="output directory")
    fit.set_defaults(func=cmd_fit)

    risk = sub.add_parser("risk", help="evaluate fitted models at new times")
    risk.add_argument("--model", nargs="+", required=True, help="model JSON file(s) from fit")
    risk.add_argument("--times", type=_csv_list(float), required=True, help=_FLOAT_LIST)
    risk.add_argument("--profile", type=_csv_list(float),
                      help="covariate profile; defaults to the fitted profile")
    risk.add_argument("--out", help="also write the table to this CSV file")
    risk.set_defaults(func=cmd_risk)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
