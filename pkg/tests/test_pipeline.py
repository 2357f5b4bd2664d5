import numpy as np
import pytest

from purerisk import (
    ConfigError,
    Outcome,
    RateIntervals,
    RegistrySummary,
    ReplicateFailureError,
    SurvivalRecord,
    WeightedSample,
    build_auxiliaries,
    build_combined,
    calibrate_weights,
    combination_scalars,
    fit_weighted_cox,
    influence_functions,
    ipw_pseudoweights,
    par_baseline,
    poststratify,
    pure_risk,
)
from purerisk.imputation import fit_gap_model, impute_incidence
from purerisk.jackknife import build_scheme, replicate_weights
from purerisk.pipeline import AnalysisConfig, estimate
from purerisk.propensity import PropensityModelSpec

RISK_TIMES = (2.0, 5.0, 8.0)
HORIZON = 8.0


def _make_data(seed=17, n_c=150, n_s=250):
    rng = np.random.default_rng(seed)
    censor = 10.0

    def draw(n, prefix, with_incidence, with_design):
        recs = []
        for i in range(n):
            z = rng.normal(size=2)
            onset = rng.exponential(1.0 / (0.125 * np.exp(0.3 * z[0] + 0.2 * z[1])))
            gap = abs(rng.normal(1.5, 0.5))
            death = onset + gap
            d_inc = int(onset <= censor)
            x_inc = min(onset, censor)
            d_mort = int(death <= censor)
            x_mort = min(death, censor)
            kw = {}
            if with_incidence:
                kw["incidence"] = Outcome(d_inc, x_inc)
                kw["group"] = "hi" if z[0] > 0 else "lo"
            if with_design:
                kw["stratum"] = f"s{i % 3}"
                kw["psu"] = f"u{i % 12}"
            recs.append(
                SurvivalRecord(
                    id=f"{prefix}{i}",
                    covariates=z,
                    mortality=Outcome(d_mort, x_mort),
                    **kw,
                )
            )
        return recs

    cohort = WeightedSample(draw(n_c, "c", True, False), np.ones(n_c))
    survey = WeightedSample(draw(n_s, "s", False, True), rng.gamma(4.0, 25.0, n_s))
    registry = RegistrySummary(
        population_size=100_000.0,
        incidence_rates=RateIntervals(
            edges=[0.0, 2.5, 5.0, 7.5, 10.0], rates=[0.11, 0.10, 0.09, 0.08]
        ),
        group_sizes={"hi": 52_000.0, "lo": 48_000.0},
        group_cases={"hi": {HORIZON: 31_000.0}, "lo": {HORIZON: 22_000.0}},
    )
    return cohort, survey, registry


def _config(**kw):
    base = dict(risk_times=RISK_TIMES, seed=99, jackknife=False)
    base.update(kw)
    return AnalysisConfig(**base)


def test_pipeline_matches_composed_library_calls():
    cohort, survey, registry = _make_data()
    out = estimate(cohort, survey, registry, _config())

    # unadjusted
    nfit = fit_weighted_cox(cohort, "incidence")
    nbl = par_baseline(cohort, nfit.beta, registry, HORIZON, include_times=RISK_TIMES)
    np.testing.assert_allclose(out["naive"].beta, nfit.beta, rtol=1e-12)
    np.testing.assert_allclose(
        out["naive"].risk,
        pure_risk(nbl, nfit.beta, np.zeros(2), np.asarray(RISK_TIMES)),
        rtol=1e-12,
    )

    # pseudoweighted
    spec = PropensityModelSpec(terms=("z1", "z2"))
    pw = ipw_pseudoweights(cohort, survey, spec)
    cohort_pw = cohort.with_weights(pw.pseudoweights, allow_nonpositive=True)
    ifit = fit_weighted_cox(cohort_pw, "incidence")
    ibl = par_baseline(cohort_pw, ifit.beta, registry, HORIZON, include_times=RISK_TIMES)
    np.testing.assert_allclose(out["ipw"].beta, ifit.beta, rtol=1e-12)
    np.testing.assert_allclose(
        out["ipw"].risk,
        pure_risk(ibl, ifit.beta, np.zeros(2), np.asarray(RISK_TIMES)),
        rtol=1e-12,
    )

    # calibrated, mortality scale
    scalars = combination_scalars(pw.pseudoweights, survey.weights)
    combined = build_combined(cohort_pw, survey, scalars)
    mfit = fit_weighted_cox(combined, "mortality")
    infl = influence_functions(combined, "mortality", mfit)
    aux_b = build_auxiliaries(combined, "cipw_beta", mfit, infl)
    res_b = calibrate_weights(cohort_pw, aux_b.matrix[: cohort.n], aux_b.target)
    aux_l = build_auxiliaries(combined, "cipw_lambda", mfit)
    res_l = calibrate_weights(cohort_pw, aux_l.matrix[: cohort.n], aux_l.target)
    cfit = fit_weighted_cox(
        cohort.with_weights(res_b.weights, allow_nonpositive=True), "incidence"
    )
    cbl = par_baseline(
        cohort.with_weights(res_l.weights, allow_nonpositive=True),
        cfit.beta,
        registry,
        HORIZON,
        include_times=RISK_TIMES,
    )
    np.testing.assert_allclose(out["cipw"].beta, cfit.beta, rtol=1e-12)
    np.testing.assert_allclose(
        out["cipw"].risk,
        pure_risk(cbl, cfit.beta, np.zeros(2), np.asarray(RISK_TIMES)),
        rtol=1e-12,
    )

    # calibrated, imputed incidence scale; the pipeline's draw stream is the
    # second spawn of the config seed, then its first child
    gap = fit_gap_model(cohort_pw)
    rng = np.random.default_rng(np.random.SeedSequence(99).spawn(2)[1].spawn(1)[0])
    survey_imp = impute_incidence(survey, gap, rng)
    combined_i = build_combined(cohort_pw, survey_imp, scalars)
    xfit = fit_weighted_cox(combined_i, "imputed")
    infl_i = influence_functions(combined_i, "imputed", xfit)
    aux_bi = build_auxiliaries(combined_i, "cipwi_beta", xfit, infl_i)
    res_bi = calibrate_weights(cohort_pw, aux_bi.matrix[: cohort.n], aux_bi.target)
    aux_li = build_auxiliaries(combined_i, "cipwi_lambda", xfit)
    res_li = calibrate_weights(cohort_pw, aux_li.matrix[: cohort.n], aux_li.target)
    xcfit = fit_weighted_cox(
        cohort.with_weights(res_bi.weights, allow_nonpositive=True), "incidence"
    )
    xbl = par_baseline(
        cohort.with_weights(res_li.weights, allow_nonpositive=True),
        xcfit.beta,
        registry,
        HORIZON,
        include_times=RISK_TIMES,
    )
    np.testing.assert_allclose(out["cipwi"].beta, xcfit.beta, rtol=1e-12)
    np.testing.assert_allclose(
        out["cipwi"].risk,
        pure_risk(xbl, xcfit.beta, np.zeros(2), np.asarray(RISK_TIMES)),
        rtol=1e-12,
    )


def test_pipeline_poststratified_naive_matches_hand_path():
    cohort, survey, registry = _make_data()
    out = estimate(
        cohort, survey, registry, _config(methods=("naive",), poststratify=True)
    )
    post = poststratify(cohort, registry, HORIZON)
    nfit = fit_weighted_cox(post, "incidence")
    nbl = par_baseline(post, nfit.beta, registry, HORIZON, include_times=RISK_TIMES)
    np.testing.assert_allclose(out["naive"].beta, nfit.beta, rtol=1e-12)
    np.testing.assert_allclose(
        out["naive"].risk,
        pure_risk(nbl, nfit.beta, np.zeros(2), np.asarray(RISK_TIMES)),
        rtol=1e-12,
    )


def test_jackknife_replicates_and_variance():
    cohort, survey, registry = _make_data()
    cfg = _config(jackknife=True, cohort_groups=10, survey_groups=15, seed=7)
    out = estimate(cohort, survey, registry, cfg)
    scheme = build_scheme(
        cohort,
        survey,
        cohort_groups=10,
        survey_groups=15,
        rng=np.random.default_rng(np.random.SeedSequence(7).spawn(2)[0]),
    )
    n_reps = scheme.n_replicates
    for m in cfg.methods:
        res = out[m]
        assert res.replicate_estimates.shape == (n_reps, 5)
        assert not np.any(np.isnan(res.replicate_estimates))
        assert res.beta_se.shape == (2,) and np.all(res.beta_se > 0)
        assert res.risk_se.shape == (3,) and np.all(res.risk_se > 0)
        ci = res.confidence_intervals()
        np.testing.assert_allclose(
            ci["risk_upper"] - ci["risk_lower"], 2 * 1.96 * res.risk_se, rtol=1e-12
        )

    # survey deletions leave the unadjusted estimate untouched
    np.testing.assert_array_equal(out.cohort_group_labels, scheme.cohort_groups)
    full_naive = out["naive"].estimate_vector
    for r, rep in enumerate(scheme.replicates):
        if rep.source == "survey":
            np.testing.assert_array_equal(
                out["naive"].replicate_estimates[r], full_naive
            )

    # one cohort replicate of the unadjusted method, recomputed by hand
    rep = scheme.replicates[3]
    assert rep.source == "cohort"
    wc_r, _ = replicate_weights(rep, cohort.weights, survey.weights)
    rfit = fit_weighted_cox(
        cohort.with_weights(wc_r, allow_nonpositive=True), "incidence",
        init=out["naive"].beta,
    )
    rbl = par_baseline(
        cohort.with_weights(wc_r, allow_nonpositive=True),
        rfit.beta,
        registry,
        HORIZON,
        include_times=RISK_TIMES,
    )
    expect = np.concatenate(
        [rfit.beta, pure_risk(rbl, rfit.beta, np.zeros(2), np.asarray(RISK_TIMES))]
    )
    np.testing.assert_allclose(out["naive"].replicate_estimates[3], expect, rtol=1e-9)


def test_pipeline_deterministic_per_seed():
    cohort, survey, registry = _make_data()
    cfg = _config(methods=("cipwi",), jackknife=True, cohort_groups=6, survey_groups=8)
    a = estimate(cohort, survey, registry, cfg)
    b = estimate(cohort, survey, registry, cfg)
    np.testing.assert_array_equal(
        a["cipwi"].replicate_estimates, b["cipwi"].replicate_estimates
    )
    np.testing.assert_array_equal(a["cipwi"].risk_se, b["cipwi"].risk_se)
    c = estimate(cohort, survey, registry, _config(methods=("cipwi",), jackknife=True,
                                                   cohort_groups=6, survey_groups=8,
                                                   seed=100))
    assert np.any(c["cipwi"].replicate_estimates != a["cipwi"].replicate_estimates)


def test_full_estimate_independent_of_jackknife_toggle():
    cohort, survey, registry = _make_data()
    base = estimate(cohort, survey, registry, _config(methods=("cipwi",)))
    with_jk = estimate(
        cohort, survey, registry,
        _config(methods=("cipwi",), jackknife=True, cohort_groups=5, survey_groups=5),
    )
    np.testing.assert_array_equal(base["cipwi"].beta, with_jk["cipwi"].beta)
    np.testing.assert_array_equal(base["cipwi"].risk, with_jk["cipwi"].risk)


def test_replicate_failures_raise_or_warn():
    cohort, survey, registry = _make_data()
    # keep only 6 cohort deaths: deleting a group with 2+ of them starves the
    # gap model (needs >= 5) and fails the cipwi replicate
    d, _ = cohort.outcome_arrays("mortality")
    deaths = np.flatnonzero(d == 1)
    keep = np.concatenate([np.flatnonzero(d == 0), deaths[:6]])
    keep.sort()
    small = cohort.subset(keep)
    small = small.with_weights(np.ones(small.n))
    cfg = _config(methods=("cipwi",), jackknife=True, cohort_groups=6,
                  survey_groups=5, max_failure_rate=0.0)
    with pytest.raises(ReplicateFailureError):
        estimate(small, survey, registry, cfg)
    lax = _config(methods=("cipwi",), jackknife=True, cohort_groups=6,
                  survey_groups=5, max_failure_rate=0.9)
    with pytest.warns(UserWarning, match="excluded"):
        out = estimate(small, survey, registry, lax)
    assert len(out["cipwi"].failed_replicates) > 0
    assert np.any(np.isnan(out["cipwi"].replicate_estimates))


def test_config_validation():
    with pytest.raises(ConfigError):
        AnalysisConfig(methods=("magic",))
    with pytest.raises(ConfigError):
        AnalysisConfig(risk_times=(3.0, 1.0))
    with pytest.raises(ConfigError):
        AnalysisConfig(risk_times=(1.0, 2.0), t_max=1.5)
    cohort, survey, registry = _make_data()
    with pytest.raises(ConfigError):
        estimate(cohort, None, registry, _config(methods=("ipw",)))
    with pytest.raises(ConfigError):
        estimate(cohort, survey, registry, _config(profile=(0.0,)))
