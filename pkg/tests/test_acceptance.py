"""End-to-end acceptance gate.

One test per shipped guarantee, running at the package defaults
(M=300,000 population, 3,000-record cohort, 6,000-record survey, 200
Monte Carlo simulations per study). The jackknife study dominates the
runtime (about 15 minutes); the Monte Carlo fixtures are module-scoped so
each study runs once and feeds every criterion that reads it.
"""

import json

import numpy as np
import pytest

import oracles
from purerisk.cli import main
from purerisk.combine_calibrate import combination_scalars, solve_calibration
from purerisk.coxengine import fit_weighted_cox, influence_functions, par_baseline
from purerisk.datamodel import (
    Outcome,
    RateIntervals,
    RegistrySummary,
    SurvivalRecord,
    WeightedSample,
    read_registry_json,
    read_sample_csv,
    write_registry_json,
    write_sample_csv,
)
from purerisk.pipeline import AnalysisConfig, estimate
from purerisk.simharness import (
    HORIZON,
    TRUE_BETA,
    ScenarioConfig,
    draw_samples,
    generate_population,
    population_coefficients,
    run_scenario,
)

BETAS = ("beta_z1", "beta_z2", "beta_z3")
RISKS = ("risk_1", "risk_7", "risk_15")


# -- shared Monte Carlo studies (package-default scale and seed) --------------

@pytest.fixture(scope="module")
def populations():
    out = {}
    for s in (1, 2, 3):
        cfg = ScenarioConfig(scenario=s, n_sims=1)
        out[s] = generate_population(cfg, np.random.default_rng(s))[0]
    return out


@pytest.fixture(scope="module")
def study_sc1_jackknife():
    return run_scenario(ScenarioConfig(scenario=1, jackknife=True))


@pytest.fixture(scope="module")
def study_sc2():
    return run_scenario(ScenarioConfig(scenario=2))


@pytest.fixture(scope="module")
def study_sc3():
    return run_scenario(ScenarioConfig(scenario=3))


@pytest.fixture(scope="module")
def study_informative_naive():
    return run_scenario(
        ScenarioConfig(scenario=1, participation="informative",
                       methods=("naive",), jackknife=True)
    )


def _rel_bias(study, method, components):
    return [study.metrics.row(method, c).rel_bias_pct for c in components]


# -- generated-population fidelity --------------------------------------------

def test_population_incidence_and_mortality_rates(populations):
    incidence = [100.0 * populations[s].incidence_fraction() for s in (1, 2, 3)]
    for value in incidence:
        assert abs(value - 19.0) <= 1.0
    mortality = {s: 100.0 * populations[s].mortality_fraction() for s in (1, 2, 3)}
    assert abs(mortality[1] - 17.3) <= 1.5
    assert abs(mortality[2] - 5.8) <= 1.5
    assert abs(mortality[3] - 7.0) <= 1.5


def test_population_level_fit_recovers_the_generating_coefficients(populations):
    beta = population_coefficients(populations[1])
    rel = np.abs(beta / np.asarray(TRUE_BETA) - 1.0)
    assert np.all(rel <= 0.02)


# -- estimator bias, efficiency, and failure modes ----------------------------

def test_correctly_specified_methods_are_unbiased(
    study_sc1_jackknife, study_sc2, study_sc3
):
    for study in (study_sc1_jackknife, study_sc2, study_sc3):
        for method in ("naive", "ipw", "cipw"):
            assert np.all(np.abs(_rel_bias(study, method, BETAS)) <= 3.0), (
                study.config.scenario, method)
    assert np.all(np.abs(_rel_bias(study_sc3, "cipwi", BETAS)) <= 3.0)


def test_calibration_halves_pseudoweight_variance(study_sc1_jackknife):
    var = lambda m, c: study_sc1_jackknife.metrics.row(m, c).variance
    assert var("cipw", "beta_z1") / var("ipw", "beta_z1") < 0.5
    for c in BETAS:
        assert var("cipwi", c) <= var("cipw", c)


def test_unweighted_fit_fails_under_informative_participation(
    study_informative_naive,
):
    row = study_informative_naive.metrics.row("naive", "beta_z2")
    assert -95.0 <= row.rel_bias_pct <= -70.0
    assert row.coverage <= 0.10


def test_imputed_method_separates_gap_scenarios(study_sc2, study_sc3):
    assert study_sc2.metrics.row("cipwi", "beta_z2").rel_bias_pct <= -15.0
    assert abs(study_sc3.metrics.row("cipwi", "beta_z2").rel_bias_pct) <= 3.0


def test_jackknife_interval_coverage_is_calibrated(study_sc1_jackknife):
    for method in ("naive", "ipw", "cipw", "cipwi"):
        for c in BETAS:
            cov = study_sc1_jackknife.metrics.row(method, c).coverage
            assert 0.90 <= cov <= 0.98, (method, c, cov)


def test_pure_risk_bias_and_coverage(study_sc1_jackknife):
    for c in RISKS:
        assert study_sc1_jackknife.metrics.row("naive", c).rel_bias_pct > 30.0
        row = study_sc1_jackknife.metrics.row("cipw", c)
        assert abs(row.rel_bias_pct) <= 3.0
        assert 0.90 <= row.coverage <= 0.98


# -- deterministic oracle suites ----------------------------------------------

def _survival_arrays(n, p, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, p))
    x = rng.exponential(scale, n)
    d = rng.random(n) < 0.55
    w = rng.uniform(0.4, 2.5, n)
    return x, d, z, w


def _as_sample(x, d, z, w):
    records = [
        SurvivalRecord(
            id=f"r{i}",
            covariates=tuple(np.atleast_1d(z[i])),
            mortality=Outcome(int(d[i]), float(x[i])),
        )
        for i in range(len(x))
    ]
    return WeightedSample(records, w)


@pytest.mark.parametrize("seed", [3, 11, 27])
def test_oracle_single_covariate_fit_matches_generic_optimizer(seed):
    x, d, z, w = _survival_arrays(45, 1, seed)
    fit = fit_weighted_cox(_as_sample(x, d, z, w), "mortality")
    brute = oracles.brute_fit_1d(x, d, z[:, 0], w)
    assert abs(fit.beta[0] - brute) <= 1e-6


def test_oracle_influence_matches_finite_difference_refits():
    x, d, z, w = _survival_arrays(50, 2, 401)
    sample = _as_sample(x, d, z, w)
    fit = fit_weighted_cox(sample, "mortality")
    infl = influence_functions(sample, "mortality", fit).values
    fd = oracles.fd_influence(x, d, z, w)
    scale = np.max(np.abs(fd))
    assert np.max(np.abs(infl - fd)) <= 1e-3 * scale


def test_oracle_calibration_matches_quadratic_program():
    rng = np.random.default_rng(12)
    n = 40
    v = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(0, 2, n)])
    base = rng.uniform(0.5, 2.0, n)
    target = v.T @ base * np.array([1.1, 0.8, 1.2])
    eta, weights, residual = solve_calibration(v, base, target)
    brute = oracles.qp_calibrate(v, base, target)
    assert np.max(np.abs(weights - brute)) <= 1e-8 * max(1.0, np.max(np.abs(brute)))
    assert np.max(np.abs(v.T @ weights - target)) <= 1e-10 * max(1.0, np.max(np.abs(target)))


@pytest.mark.parametrize("seed", [0, 8, 512])
def test_oracle_combination_identity(seed):
    rng = np.random.default_rng(seed)
    wc = rng.uniform(0.2, 4.0, rng.integers(20, 200))
    ws = rng.uniform(0.5, 30.0, rng.integers(20, 200))
    s = combination_scalars(wc, ws)
    lhs = s.a_cohort * wc.sum() + s.a_survey * ws.sum()
    rhs = (wc.sum() + ws.sum()) / 2.0
    assert abs(lhs - rhs) <= 1e-12 * rhs


def test_oracle_degenerate_population_baseline_is_analytic():
    # identical zero covariates: the attributable-risk deflation is exactly 1,
    # so the cumulative baseline equals the integrated registry rate
    n = 60
    x = np.linspace(0.25, HORIZON, n)
    records = [
        SurvivalRecord(
            id=f"r{i}",
            covariates=(0.0,),
            incidence=Outcome(0, float(x[i])),
            mortality=Outcome(0, float(x[i])),
        )
        for i in range(n)
    ]
    cohort = WeightedSample(records, np.ones(n))
    rate = -np.log(0.85) / HORIZON
    registry = RegistrySummary(
        population_size=1e5,
        incidence_rates=RateIntervals((0.0, HORIZON), (rate,)),
    )
    baseline = par_baseline(cohort, np.zeros(1), registry, t_max=HORIZON)
    assert baseline(HORIZON)[0] == pytest.approx(-np.log(0.85), rel=1e-12)


# -- file interchange reproduces the in-process pipeline ----------------------

def test_exported_csv_fit_reproduces_pipeline_bit_for_bit(tmp_path):
    cfg = ScenarioConfig(
        scenario=1, n_sims=1, master_seed=11,
        population_size=30_000, cohort_size=600, survey_size=1_200,
    )
    rng = np.random.default_rng(np.random.SeedSequence(11))
    pop, registry = generate_population(cfg, rng)
    cohort, survey, _ = draw_samples(pop, cfg, rng)
    write_sample_csv(cohort, str(tmp_path / "cohort.csv"))
    write_sample_csv(survey, str(tmp_path / "survey.csv"))
    write_registry_json(registry, str(tmp_path / "registry.json"))

    analysis = AnalysisConfig(cohort_groups=10, survey_groups=20, seed=99)
    wanted = estimate(
        read_sample_csv(str(tmp_path / "cohort.csv")),
        read_sample_csv(str(tmp_path / "survey.csv")),
        read_registry_json(str(tmp_path / "registry.json")),
        analysis,
    )
    out = tmp_path / "fitout"
    assert main(
        ["fit", "--cohort", str(tmp_path / "cohort.csv"),
         "--survey", str(tmp_path / "survey.csv"),
         "--registry", str(tmp_path / "registry.json"),
         "--cohort-groups", "10", "--survey-groups", "20", "--seed", "99",
         "--out", str(out)]
    ) == 0
    for m in analysis.methods:
        model = json.loads((out / f"model_{m}.json").read_text())
        res = wanted[m]
        assert model["coefficients"] == res.beta.tolist()
        assert model["coefficient_se"] == res.beta_se.tolist()
        assert model["risk"] == res.risk.tolist()
        assert model["risk_se"] == res.risk_se.tolist()
        assert model["baseline"]["times"] == res.baseline.times.tolist()
        assert model["baseline"]["cumulative"] == res.baseline.cumulative.tolist()
