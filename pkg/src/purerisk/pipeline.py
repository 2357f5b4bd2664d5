"""End-to-end estimation: pseudoweighting, sample combination, calibration,
hazard-ratio and pure-risk estimation, and grouped-jackknife replication.

Four estimation methods share one machinery:

* ``naive``: cohort base weights, no selection adjustment.
* ``ipw``: cohort pseudoweights from the stacked propensity fit.
* ``cipw``: pseudoweights calibrated to combined-sample mortality totals,
  once targeting the coefficient estimating equation (influence columns) and
  once targeting cumulative-hazard totals.
* ``cipwi``: like ``cipw`` but on the incidence scale, after imputing onset
  times for survey deaths from the cohort's onset-to-death gap model; survey
  records without an observed death stay in the pooled risk sets censored at
  their mortality follow-up time, the only censoring time the survey observes.

Every jackknife replicate re-runs the whole chain with replicate weights
(zeros on the deleted group, inflation elsewhere), warm-starting each Newton
solve at the full-sample solution; imputation-based runs re-draw imputed
onsets per replicate from replicate-specific substreams.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .combine_calibrate import combination_scalars, poststratify, solve_calibration
from .coxengine import CoxProblem, par_baseline, pure_risk
from .datamodel import BaselineHazard, RegistrySummary, WeightedSample
from .errors import ConfigError, EstimationError, ReplicateFailureError
from .imputation import MIN_GAP, fit_gap_model
from .jackknife import build_scheme, jackknife_variance, replicate_weights
from .propensity import PropensityModelSpec, design_matrix, fit_weighted_logistic

METHODS = ("naive", "ipw", "cipw", "cipwi")
WALD_MULTIPLIER = 1.96


@dataclass(frozen=True)
class AnalysisConfig:
    """Resolved settings for one estimation run."""

    methods: tuple[str, ...] = METHODS
    propensity_terms: tuple[str, ...] = ("z1", "z2")
    risk_times: tuple[float, ...] = (1.0, 7.0, 15.0)
    profile: tuple[float, ...] | None = None  # zeros when omitted
    t_max: float | None = None  # defaults to max(risk_times)
    jackknife: bool = True
    cohort_groups: int = 50
    survey_groups: int = 100
    seed: int = 0
    clamp: float = 1e-10
    truncate_negative: bool = False
    poststratify: bool = False
    collapse_empty: bool = False
    max_failure_rate: float = 0.05

    def __post_init__(self) -> None:
        if not self.methods:
            raise ConfigError("at least one estimation method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods in the configuration")
        times = np.asarray(self.risk_times, dtype=float)
        if len(times) == 0 or np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ConfigError("risk times must be positive and strictly increasing")
        if self.t_max is not None and self.t_max < times[-1]:
            raise ConfigError("t_max must cover the largest risk time")
        if not 0.0 <= self.max_failure_rate < 1.0:
            raise ConfigError("max failure rate must be in [0, 1)")

    @property
    def horizon(self) -> float:
        return self.t_max if self.t_max is not None else float(max(self.risk_times))


@dataclass
class MethodResult:
    """One method's point estimates, variance pieces, and replicate trace."""

    method: str
    beta: np.ndarray
    baseline: BaselineHazard
    risk_times: np.ndarray
    profile: np.ndarray
    risk: np.ndarray
    beta_se: np.ndarray | None = None
    risk_se: np.ndarray | None = None
    replicate_estimates: np.ndarray | None = None  # (R, p + k); NaN rows failed
    replicate_labels: tuple[str, ...] = ()
    variance_factors: np.ndarray | None = None
    failed_replicates: tuple[str, ...] = ()

    @property
    def estimate_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.risk])

    def confidence_intervals(self) -> dict[str, np.ndarray]:
        """Symmetric Wald intervals for coefficients and risks."""
        if self.beta_se is None or self.risk_se is None:
            raise ConfigError("no replication variance was computed for this fit")
        return {
            "beta_lower": self.beta - WALD_MULTIPLIER * self.beta_se,
            "beta_upper": self.beta + WALD_MULTIPLIER * self.beta_se,
            "risk_lower": self.risk - WALD_MULTIPLIER * self.risk_se,
            "risk_upper": self.risk + WALD_MULTIPLIER * self.risk_se,
        }


@dataclass
class PipelineEstimate:
    methods: dict[str, MethodResult]
    config: AnalysisConfig
    diagnostics: dict = field(default_factory=dict)
    cohort_group_labels: np.ndarray | None = None
    survey_group_labels: np.ndarray | None = None

    def __getitem__(self, method: str) -> MethodResult:
        return self.methods[method]


class _Engine:
    """Weight-independent precomputation shared by the full pass and every
    replicate: sorted Cox problems, propensity design, stacked outcomes."""

    def __init__(
        self,
        cohort: WeightedSample,
        survey: WeightedSample | None,
        registry: RegistrySummary,
        config: AnalysisConfig,
    ):
        self.cfg = config
        self.cohort = cohort
        self.survey = survey
        self.registry = registry
        self.risk_times = np.asarray(config.risk_times, dtype=float)
        p = cohort.n_covariates
        self.profile = (
            np.zeros(p)
            if config.profile is None
            else np.asarray(config.profile, dtype=float)
        )
        if self.profile.shape != (p,):
            raise ConfigError(f"profile needs {p} covariate values")
        d_inc, x_inc = cohort.outcome_arrays("incidence")
        self.inc_problem = CoxProblem(x_inc, d_inc == 1, cohort.covariates)
        self.needs_survey = any(m != "naive" for m in config.methods)
        self.warm: dict[str, np.ndarray] = {}
        if not self.needs_survey:
            return
        if survey is None:
            raise ConfigError("every method except 'naive' requires a reference survey")
        if survey.n_covariates != p:
            raise ConfigError("cohort and survey covariate dimensions differ")
        self.prop_spec = PropensityModelSpec(
            terms=tuple(config.propensity_terms), clamp=config.clamp
        )
        xc, names = design_matrix(cohort, self.prop_spec.terms)
        xs, _ = design_matrix(survey, self.prop_spec.terms)
        self.prop_design = np.vstack([xc, xs])
        self.prop_design_cohort = xc
        self.prop_labels = np.concatenate([np.ones(cohort.n), np.zeros(survey.n)])
        self.prop_names = names
        self.z_comb = np.vstack([cohort.covariates, survey.covariates])
        dm_c, xm_c = cohort.outcome_arrays("mortality")
        dm_s, xm_s = survey.outcome_arrays("mortality")
        self.d_mort_comb = np.concatenate([dm_c, dm_s])
        self.x_mort_comb = np.concatenate([xm_c, xm_s])
        if "cipw" in config.methods:
            self.mort_problem = CoxProblem(
                self.x_mort_comb, self.d_mort_comb == 1, self.z_comb
            )
        if "cipwi" in config.methods:
            survey_death = dm_s == 1
            self.x_mort_s_death = xm_s[survey_death]
            self.z_s_death = survey.covariates[survey_death]
            self.imp_rows = cohort.n + np.flatnonzero(survey_death)
            # survey non-deaths enter the imputed view censored at follow-up end
            self.d_imp_comb = np.concatenate([d_inc, dm_s])
            self.x_imp_base = np.concatenate([x_inc, xm_s])

    # -- stages ---------------------------------------------------------------

    def _pseudoweights(self, wc: np.ndarray, ws: np.ndarray, set_warm: bool):
        fit = fit_weighted_logistic(
            self.prop_design,
            self.prop_labels,
            np.concatenate([wc, ws]),
            names=self.prop_names,
            init=self.warm.get("prop"),
        )
        if set_warm:
            self.warm["prop"] = fit.coef
        with np.errstate(over="ignore"):
            prop = 1.0 / (1.0 + np.exp(-(self.prop_design_cohort @ fit.coef)))
        clamp = self.prop_spec.clamp
        n_clamped = int(np.count_nonzero((prop < clamp) | (prop > 1.0 - clamp)))
        prop = np.clip(prop, clamp, 1.0 - clamp)
        pseudo = wc * (1.0 - prop) / prop
        return fit, pseudo, n_clamped

    def _calibrated_weights(
        self,
        infl: np.ndarray,
        w_comb: np.ndarray,
        pseudo: np.ndarray,
        d_ev: np.ndarray,
        x_ev: np.ndarray,
        beta: np.ndarray,
        event_name: str,
    ):
        """Coefficient-targeted and hazard-targeted calibrations of the cohort
        pseudoweights to combined-sample totals. The two weight sets stay
        separate downstream."""
        n_c = self.cohort.n
        ones = np.ones(len(w_comb))
        p = infl.shape[1]
        v_beta = np.column_stack([ones, d_ev, infl])
        names_b = ("total", event_name) + tuple(
            f"coef_sensitivity_{j + 1}" for j in range(p)
        )
        _, w_beta, _ = solve_calibration(
            v_beta[:n_c],
            pseudo,
            v_beta.T @ w_comb,
            names=names_b,
            truncate_negative=self.cfg.truncate_negative,
        )
        with np.errstate(over="ignore"):
            hazard_scale = x_ev * np.exp(self.z_comb @ beta)
        v_lam = np.column_stack([ones, d_ev, hazard_scale])
        names_l = ("total", event_name, "time_at_hazard_scale")
        _, w_lam, _ = solve_calibration(
            v_lam[:n_c],
            pseudo,
            v_lam.T @ w_comb,
            names=names_l,
            truncate_negative=self.cfg.truncate_negative,
        )
        return w_beta, w_lam

    def _finish(self, method: str, w_beta: np.ndarray, w_lam: np.ndarray, set_warm: bool):
        """Cohort incidence fit with the coefficient-targeted weights, then the
        population-rate baseline with the hazard-targeted weights."""
        if self.cfg.poststratify:
            w_beta = poststratify(
                self.cohort.with_weights(w_beta, allow_nonpositive=True),
                self.registry,
                self.cfg.horizon,
                collapse_empty=self.cfg.collapse_empty,
            ).weights
            if w_lam is not w_beta:
                w_lam = poststratify(
                    self.cohort.with_weights(w_lam, allow_nonpositive=True),
                    self.registry,
                    self.cfg.horizon,
                    collapse_empty=self.cfg.collapse_empty,
                ).weights
        fit = self.inc_problem.fit(
            w_beta, init=self.warm.get(f"inc:{method}"), outcome="incidence"
        )
        if set_warm:
            self.warm[f"inc:{method}"] = fit.beta
        baseline = par_baseline(
            self.cohort.with_weights(w_lam, allow_nonpositive=True),
            fit.beta,
            self.registry,
            self.cfg.horizon,
            include_times=self.risk_times,
        )
        risks = pure_risk(baseline, fit.beta, self.profile, self.risk_times)
        return np.concatenate([fit.beta, risks]), baseline

    def run(
        self,
        wc: np.ndarray,
        ws: np.ndarray | None,
        imp_rng: np.random.Generator,
        *,
        methods: tuple[str, ...] | None = None,
        set_warm: bool = False,
        strict: bool = False,
        collect: dict | None = None,
    ) -> tuple[dict[str, np.ndarray], dict[str, str]]:
        """One complete pass over the requested methods with the given weights.

        Per-method estimation errors are collected (or re-raised when
        ``strict``); shared-stage errors fail every dependent method.
        """
        cfg = self.cfg
        methods = cfg.methods if methods is None else methods
        est: dict[str, np.ndarray] = {}
        fail: dict[str, str] = {}

        def attempt(method: str, w_beta: np.ndarray, w_lam: np.ndarray) -> None:
            try:
                vec, baseline = self._finish(method, w_beta, w_lam, set_warm)
            except EstimationError as exc:
                if strict:
                    raise
                fail[method] = f"{type(exc).__name__}: {exc}"
                return
            est[method] = vec
            if collect is not None:
                collect.setdefault("baselines", {})[method] = baseline

        if "naive" in methods:
            attempt("naive", wc, wc)
        survey_methods = [m for m in methods if m != "naive"]
        if not survey_methods:
            return est, fail
        try:
            prop_fit, pseudo, n_clamped = self._pseudoweights(wc, ws, set_warm)
        except EstimationError as exc:
            if strict:
                raise
            for m in survey_methods:
                fail[m] = f"{type(exc).__name__}: {exc}"
            return est, fail
        if collect is not None:
            collect["propensity"] = {
                "coef": prop_fit.coef,
                "names": prop_fit.names,
                "n_clamped": n_clamped,
            }
        if "ipw" in methods:
            attempt("ipw", pseudo, pseudo)
        if "cipw" in methods or "cipwi" in methods:
            scalars = combination_scalars(pseudo, ws)
            w_comb = np.concatenate(
                [scalars.a_cohort * pseudo, scalars.a_survey * ws]
            )
            if collect is not None:
                collect["combination"] = {
                    "a_cohort": scalars.a_cohort,
                    "a_survey": scalars.a_survey,
                }
        if "cipw" in methods:
            try:
                mfit = self.mort_problem.fit(
                    w_comb, init=self.warm.get("mort"), outcome="mortality"
                )
                if set_warm:
                    self.warm["mort"] = mfit.beta
                w_beta, w_lam = self._calibrated_weights(
                    self.mort_problem.influence(w_comb, mfit.beta, info=mfit.information),
                    w_comb,
                    pseudo,
                    self.d_mort_comb,
                    self.x_mort_comb,
                    mfit.beta,
                    "mortality_events",
                )
            except EstimationError as exc:
                if strict:
                    raise
                fail["cipw"] = f"{type(exc).__name__}: {exc}"
            else:
                if collect is not None:
                    collect["mortality_fit"] = {"beta": mfit.beta, "n_events": mfit.n_events}
                attempt("cipw", w_beta, w_lam)
        if "cipwi" in methods:
            try:
                gap = fit_gap_model(
                    self.cohort.with_weights(pseudo, allow_nonpositive=True)
                )
                draws = self.z_s_death @ gap.coef[1:] + gap.coef[0] + imp_rng.normal(
                    0.0, gap.residual_sd, size=len(self.imp_rows)
                )
                x_imp = self.x_imp_base.copy()
                x_imp[self.imp_rows] = np.maximum(
                    self.x_mort_s_death - np.maximum(draws, MIN_GAP), 0.0
                )
                problem = CoxProblem(x_imp, self.d_imp_comb == 1, self.z_comb)
                ifit = problem.fit(
                    w_comb, init=self.warm.get("imp"), outcome="incidence"
                )
                if set_warm:
                    self.warm["imp"] = ifit.beta
                w_beta, w_lam = self._calibrated_weights(
                    problem.influence(w_comb, ifit.beta, info=ifit.information),
                    w_comb,
                    pseudo,
                    self.d_imp_comb,
                    x_imp,
                    ifit.beta,
                    "incidence_events",
                )
            except EstimationError as exc:
                if strict:
                    raise
                fail["cipwi"] = f"{type(exc).__name__}: {exc}"
            else:
                if collect is not None:
                    collect["gap_model"] = {
                        "coef": gap.coef,
                        "residual_sd": gap.residual_sd,
                        "n_deaths": gap.n_deaths,
                    }
                    collect["imputed_fit"] = {"beta": ifit.beta, "n_events": ifit.n_events}
                attempt("cipwi", w_beta, w_lam)
        return est, fail


def estimate(
    cohort: WeightedSample,
    survey: WeightedSample | None,
    registry: RegistrySummary,
    config: AnalysisConfig | None = None,
) -> PipelineEstimate:
    """Run the full estimation chain, optionally with jackknife variances.

    The ``seed`` in the configuration fixes both the replicate group
    assignment and every imputation draw, so repeated calls on the same data
    reproduce results exactly.
    """
    cfg = config or AnalysisConfig()
    engine = _Engine(cohort, survey, registry, cfg)
    root = np.random.SeedSequence(cfg.seed)
    ss_scheme, ss_imp = root.spawn(2)
    full_child = ss_imp.spawn(1)[0]
    collect: dict = {}
    full_est, _ = engine.run(
        cohort.weights,
        survey.weights if engine.needs_survey else None,
        np.random.default_rng(full_child),
        set_warm=True,
        strict=True,
        collect=collect,
    )
    p = cohort.n_covariates
    times = np.asarray(cfg.risk_times, dtype=float)
    results = {
        m: MethodResult(
            method=m,
            beta=full_est[m][:p],
            baseline=collect["baselines"][m],
            risk_times=times,
            profile=engine.profile,
            risk=full_est[m][p:],
        )
        for m in cfg.methods
    }
    out = PipelineEstimate(
        methods=results,
        config=cfg,
        diagnostics={k: v for k, v in collect.items() if k != "baselines"},
    )
    if not cfg.jackknife:
        return out

    scheme = build_scheme(
        cohort,
        survey if engine.needs_survey else None,
        cohort_groups=cfg.cohort_groups,
        survey_groups=cfg.survey_groups,
        rng=np.random.default_rng(ss_scheme),
    )
    n_reps = scheme.n_replicates
    children = ss_imp.spawn(n_reps)
    traces = {m: np.full((n_reps, len(full_est[m])), np.nan) for m in cfg.methods}
    failures: dict[str, list[str]] = {m: [] for m in cfg.methods}
    for r, rep in enumerate(scheme.replicates):
        wc_r, ws_r = replicate_weights(
            rep, cohort.weights, survey.weights if engine.needs_survey else None
        )
        methods_r = (
            cfg.methods
            if rep.source == "cohort"
            else tuple(m for m in cfg.methods if m != "naive")
        )
        est_r, fail_r = engine.run(
            wc_r, ws_r, np.random.default_rng(children[r]), methods=methods_r
        )
        for m in cfg.methods:
            if m in est_r:
                traces[m][r] = est_r[m]
            elif m == "naive" and rep.source == "survey":
                # the unadjusted estimate never touches the survey
                traces[m][r] = full_est[m]
            else:
                failures[m].append(f"{rep.label}: {fail_r.get(m, 'not attempted')}")
    factors = scheme.variance_factors
    labels = tuple(rep.label for rep in scheme.replicates)
    for m in cfg.methods:
        n_failed = len(failures[m])
        if n_failed > cfg.max_failure_rate * n_reps:
            raise ReplicateFailureError(
                f"{n_failed} of {n_reps} replicates failed for {m!r}; "
                f"first: {failures[m][0]}"
            )
        if n_failed:
            warnings.warn(
                f"{m}: {n_failed} replicate(s) excluded from the variance: "
                + "; ".join(failures[m]),
                stacklevel=2,
            )
        ok = ~np.isnan(traces[m][:, 0])
        variance = jackknife_variance(full_est[m], traces[m][ok], factors[ok])
        se = np.sqrt(variance)
        res = results[m]
        res.beta_se = se[:p]
        res.risk_se = se[p:]
        res.replicate_estimates = traces[m]
        res.replicate_labels = labels
        res.variance_factors = factors
        res.failed_replicates = tuple(failures[m])
    out.cohort_group_labels = scheme.cohort_groups
    out.survey_group_labels = scheme.survey_groups
    return out
