import csv
import json

import numpy as np
import pytest

from purerisk.cli import main
from purerisk.coxengine import pure_risk
from purerisk.datamodel import (
    BaselineHazard,
    read_registry_json,
    read_sample_csv,
    write_registry_json,
    write_sample_csv,
)
from purerisk.pipeline import AnalysisConfig, estimate
from purerisk.simharness import ScenarioConfig, draw_samples, generate_population, run_scenario

SMALL = dict(population_size=30_000, cohort_size=600, survey_size=1_200)


def _export_small_study(tmp_path, seed=11):
    """Write one simulated cohort/survey/registry triple to disk."""
    cfg = ScenarioConfig(scenario=1, n_sims=1, master_seed=seed, **SMALL)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pop, registry = generate_population(cfg, rng)
    cohort, survey, _ = draw_samples(pop, cfg, rng)
    paths = {
        "cohort": str(tmp_path / "cohort.csv"),
        "survey": str(tmp_path / "survey.csv"),
        "registry": str(tmp_path / "registry.json"),
    }
    write_sample_csv(cohort, paths["cohort"])
    write_sample_csv(survey, paths["survey"])
    write_registry_json(registry, paths["registry"])
    return paths


def _read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- simulate ----------------------------------------------------------------

def test_simulate_outputs_match_direct_run(tmp_path):
    out = tmp_path / "study"
    code = main(
        ["simulate", "--scenario", "1", "--sims", "2", "--seed", "77",
         "--population-size", "30000", "--cohort-size", "600",
         "--survey-size", "1200", "--no-jackknife", "--save-replicates",
         "--out", str(out)]
    )
    assert code == 0
    for name in ("resolved_config.json", "metrics.csv", "metrics.txt", "replicates.csv"):
        assert (out / name).exists()
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["scenario"] == 1 and resolved["sims"] == 2 and resolved["seed"] == 77

    direct = run_scenario(
        ScenarioConfig(scenario=1, n_sims=2, master_seed=77, jackknife=False, **SMALL)
    )
    rows = _read_metrics_csv(out / "metrics.csv")
    assert len(rows) == len(direct.metrics.rows)
    for got, want in zip(rows, direct.metrics.rows):
        assert got["method"] == want.method and got["component"] == want.component
        assert float(got["mean_estimate"]) == want.mean_estimate
        assert float(got["rel_bias_pct"]) == want.rel_bias_pct
        assert float(got["variance"]) == want.variance
        assert got["coverage"] == ""


def test_simulate_config_file_with_flag_override(tmp_path):
    cfg_path = tmp_path / "study.json"
    cfg_path.write_text(json.dumps(dict(scenario=1, sims=5, seed=77, jackknife=False, **SMALL)))
    out = tmp_path / "study"
    code = main(["simulate", "--config", str(cfg_path), "--sims", "2", "--out", str(out)])
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    # flag beats file, file beats default
    assert resolved["sims"] == 2
    assert resolved["population_size"] == SMALL["population_size"]

    direct = run_scenario(
        ScenarioConfig(scenario=1, n_sims=2, master_seed=77, jackknife=False, **SMALL)
    )
    rows = _read_metrics_csv(out / "metrics.csv")
    for got, want in zip(rows, direct.metrics.rows):
        assert float(got["mean_estimate"]) == want.mean_estimate


def test_simulate_threads_do_not_change_results(tmp_path):
    outs = []
    for threads, name in ((1, "seq"), (2, "par")):
        out = tmp_path / name
        assert main(
            ["simulate", "--scenario", "1", "--sims", "4", "--seed", "77",
             "--population-size", "30000", "--cohort-size", "600",
             "--survey-size", "1200", "--no-jackknife",
             "--threads", str(threads), "--out", str(out)]
        ) == 0
        outs.append((out / "metrics.csv").read_text())
    assert outs[0] == outs[1]


def test_simulate_bad_configuration_exits_2(tmp_path):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"scenario": 9}))
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2
    cfg_path.write_text(json.dumps({"n_sims": 3}))  # harness name, not a CLI key
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2
    cfg_path.write_text("{not json")
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2


# -- fit ---------------------------------------------------------------------

def test_fit_reproduces_in_process_pipeline_bit_for_bit(tmp_path):
    paths = _export_small_study(tmp_path)
    out = tmp_path / "fitout"
    code = main(
        ["fit", "--cohort", paths["cohort"], "--survey", paths["survey"],
         "--registry", paths["registry"], "--cohort-groups", "10",
         "--survey-groups", "20", "--seed", "99", "--save-replicates",
         "--out", str(out)]
    )
    assert code == 0

    analysis = AnalysisConfig(cohort_groups=10, survey_groups=20, seed=99)
    inproc = estimate(
        read_sample_csv(paths["cohort"]),
        read_sample_csv(paths["survey"]),
        read_registry_json(paths["registry"]),
        analysis,
    )
    for m in analysis.methods:
        model = json.loads((out / f"model_{m}.json").read_text())
        res = inproc[m]
        assert model["coefficients"] == res.beta.tolist()
        assert model["coefficient_se"] == res.beta_se.tolist()
        assert model["risk"] == res.risk.tolist()
        assert model["risk_se"] == res.risk_se.tolist()
        assert model["baseline"]["times"] == res.baseline.times.tolist()
        assert model["baseline"]["cumulative"] == res.baseline.cumulative.tolist()
        ci = res.confidence_intervals()
        assert model["confidence_intervals"]["beta_lower"] == ci["beta_lower"].tolist()

    with open(out / "hazards.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    naive_rows = [r for r in rows if r["method"] == "naive"]
    base = inproc["naive"].baseline
    assert [float(r["time"]) for r in naive_rows] == base.times.tolist()
    assert [float(r["cumulative_hazard"]) for r in naive_rows] == base.cumulative.tolist()

    with open(out / "replicates.csv", newline="") as fh:
        reps = list(csv.DictReader(fh))
    expected = sum(
        len(inproc[m].replicate_labels) * (len(inproc[m].beta) + len(inproc[m].risk_times))
        for m in analysis.methods
    )
    assert len(reps) == expected


def test_fit_warns_and_ignores_survey_incidence_columns(tmp_path, capsys):
    paths = _export_small_study(tmp_path)
    out = tmp_path / "fitout"
    # the cohort file carries D/X, so using it as the survey must trigger the warning
    code = main(
        ["fit", "--cohort", paths["cohort"], "--survey", paths["cohort"],
         "--registry", paths["registry"], "--no-jackknife", "--seed", "1",
         "--out", str(out)]
    )
    assert code == 0
    assert "ignored" in capsys.readouterr().err
    model = json.loads((out / "model_ipw.json").read_text())
    assert len(model["coefficients"]) == 3


def test_fit_error_exit_codes(tmp_path):
    paths = _export_small_study(tmp_path)
    out = str(tmp_path / "o")
    # missing input file -> data error
    assert main(["fit", "--cohort", str(tmp_path / "nope.csv"), "--survey", paths["survey"],
                 "--registry", paths["registry"], "--out", out]) == 3
    # malformed registry -> data error
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["fit", "--cohort", paths["cohort"], "--survey", paths["survey"],
                 "--registry", str(bad), "--out", out]) == 3
    # survey-dependent methods without a survey -> configuration error
    assert main(["fit", "--cohort", paths["cohort"], "--registry", paths["registry"],
                 "--out", out]) == 2
    # zero-event cohort -> estimation error
    sample = read_sample_csv(paths["cohort"])
    idx = [i for i, r in enumerate(sample.records) if r.incidence.indicator == 0]
    write_sample_csv(sample.subset(np.asarray(idx[:200])), str(tmp_path / "noevents.csv"))
    assert main(["fit", "--cohort", str(tmp_path / "noevents.csv"), "--survey", paths["survey"],
                 "--registry", paths["registry"], "--methods", "naive",
                 "--no-jackknife", "--out", out]) == 4


# -- risk --------------------------------------------------------------------

@pytest.fixture()
def fitted_models(tmp_path):
    paths = _export_small_study(tmp_path)
    out = tmp_path / "fitout"
    assert main(
        ["fit", "--cohort", paths["cohort"], "--survey", paths["survey"],
         "--registry", paths["registry"], "--cohort-groups", "10",
         "--survey-groups", "20", "--seed", "99", "--out", str(out)]
    ) == 0
    return out


def test_risk_matches_library_and_marks_known_ses(fitted_models, tmp_path):
    model_path = fitted_models / "model_cipw.json"
    out_csv = tmp_path / "risks.csv"
    code = main(
        ["risk", "--model", str(model_path), "--times", "0,2.5,7,15",
         "--out", str(out_csv)]
    )
    assert code == 0
    model = json.loads(model_path.read_text())
    baseline = BaselineHazard(
        times=np.asarray(model["baseline"]["times"]),
        cumulative=np.asarray(model["baseline"]["cumulative"]),
        kind=model["baseline"]["kind"],
    )
    want = pure_risk(
        baseline, np.asarray(model["coefficients"]), np.asarray(model["profile"]),
        np.asarray([0.0, 2.5, 7.0, 15.0]),
    )
    with open(out_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    got = np.asarray([float(r["risk"]) for r in rows])
    assert np.array_equal(got, want)
    assert np.all(np.diff(got) >= 0)  # nondecreasing in time
    by_time = {float(r["time"]): r for r in rows}
    assert by_time[0.0]["risk"] == "0.0"
    assert by_time[0.0]["lower"] == "0.0" and by_time[0.0]["upper"] == "0.0"
    assert by_time[2.5]["se"] == ""  # off the fitted grid
    assert float(by_time[7.0]["se"]) == model["risk_se"][1]
    assert float(by_time[7.0]["lower"]) == pytest.approx(
        want[2] - 1.96 * model["risk_se"][1]
    )


def test_risk_profile_handling(fitted_models, tmp_path):
    model_path = str(fitted_models / "model_naive.json")
    # wrong dimension -> configuration error
    assert main(["risk", "--model", model_path, "--times", "7", "--profile", "1,0"]) == 2
    # a different (valid) profile evaluates but has no replication SE
    out_csv = tmp_path / "r.csv"
    assert main(["risk", "--model", model_path, "--times", "7,15",
                 "--profile", "1,0,0", "--out", str(out_csv)]) == 0
    with open(out_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["se"] == "" for r in rows)
    model = json.loads((fitted_models / "model_naive.json").read_text())
    baseline = BaselineHazard(
        times=np.asarray(model["baseline"]["times"]),
        cumulative=np.asarray(model["baseline"]["cumulative"]),
    )
    want = pure_risk(
        baseline, np.asarray(model["coefficients"]), np.asarray([1.0, 0.0, 0.0]), 7.0
    )
    assert float(rows[0]["risk"]) == want[0]
    assert main(["risk", "--model", str(tmp_path / "missing.json"), "--times", "7"]) == 3
