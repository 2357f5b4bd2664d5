"""Synthetic-population study harness.

Generates finite populations with a latent disease onset time, an onset-to-
death gap, other-cause and administrative censoring; draws a size-biased
cohort and a reference survey by Poisson sampling proportional to positive
participation measures; runs the estimation pipeline per simulation; and
aggregates relative bias, variance, MSE, and Wald coverage against the
analytic truth.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    Outcome,
    RateIntervals,
    RegistrySummary,
    SurvivalRecord,
    WeightedSample,
)
from .coxengine import CoxProblem
from .errors import ConfigError, EstimationError, ReplicateFailureError
from .pipeline import METHODS, AnalysisConfig, estimate

HORIZON = 15.0
COVARIATE_SD = (4.0, 2.0, 2.0)
TRUE_BETA = (0.2, 0.2, 0.3)
# calibrated so a zero-covariate subject has 15-year event probability 0.15
BASELINE_LOG_RATE = math.log(-math.log(0.85) / HORIZON)
OTHER_CAUSE_RATE = -math.log(0.9) / HORIZON
COHORT_MEASURE_COEF = (-0.15, 0.1)
# the survey selection measure acts on standardized covariates; on the raw
# scale the weight tail is so heavy that no finite survey pins the propensity
SURVEY_MEASURE_COEF = (0.7, 0.7)
INFORMATIVE_CASE_COEF = (-0.75, -0.2)  # (case shift, case-by-z2 shift)
# onset-to-death gap: slope on z1, z2, z1*z2; noise mean; noise sd
GAP_SETTINGS = {1: (0.01, 2.0, 0.01), 2: (0.1, 10.0, 0.2), 3: (0.0, 10.0, 0.2)}
PARTICIPATION_KINDS = ("noninformative", "informative")


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings for one simulation study configuration."""

    scenario: int = 1
    participation: str = "noninformative"
    population_size: int = 300_000
    cohort_size: int = 3_000
    survey_size: int = 6_000
    n_sims: int = 200
    master_seed: int = 3141592653
    methods: tuple[str, ...] = METHODS
    jackknife: bool = False
    cohort_groups: int = 50
    survey_groups: int = 100
    risk_times: tuple[float, ...] = (1.0, 7.0, 15.0)
    max_failure_rate: float = 0.05

    def __post_init__(self) -> None:
        if self.scenario not in GAP_SETTINGS:
            raise ConfigError(
                f"unknown scenario {self.scenario}; choose from {sorted(GAP_SETTINGS)}"
            )
        if self.participation not in PARTICIPATION_KINDS:
            raise ConfigError(
                f"unknown participation {self.participation!r}; "
                f"choose from {list(PARTICIPATION_KINDS)}"
            )
        if min(self.population_size, self.cohort_size, self.survey_size) <= 0:
            raise ConfigError("population and sample sizes must be positive")
        if self.n_sims <= 0:
            raise ConfigError("the study needs at least one simulation")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}")

    @property
    def propensity_terms(self) -> tuple[str, ...]:
        if self.participation == "informative":
            return ("z1", "z2", "Dtilde", "z2:Dtilde")
        return ("z1", "z2")

    def analysis_config(self, seed: int) -> AnalysisConfig:
        return AnalysisConfig(
            methods=self.methods,
            propensity_terms=self.propensity_terms,
            risk_times=self.risk_times,
            jackknife=self.jackknife,
            cohort_groups=self.cohort_groups,
            survey_groups=self.survey_groups,
            seed=seed,
            max_failure_rate=self.max_failure_rate,
        )


@dataclass
class Population:
    """Arrays for one generated finite population."""

    covariates: np.ndarray  # (M, 3)
    onset_indicator: np.ndarray
    onset_time: np.ndarray
    death_indicator: np.ndarray
    death_time: np.ndarray
    entry_offset: np.ndarray

    @property
    def size(self) -> int:
        return len(self.onset_time)

    def incidence_fraction(self) -> float:
        return float(np.mean(self.onset_indicator))

    def mortality_fraction(self) -> float:
        return float(np.mean(self.death_indicator))


def generate_population(
    config: ScenarioConfig, rng: np.random.Generator
) -> tuple[Population, RegistrySummary]:
    """One finite population plus the registry summary computed from it.

    Follow-up runs from study entry (uniform within the first year) to the
    fixed calendar horizon; disease onset competes with other-cause censoring,
    and disease death is onset plus a nonnegative covariate-dependent gap.
    """
    m = config.population_size
    z = rng.normal(0.0, COVARIATE_SD, size=(m, 3))
    rate = np.exp(BASELINE_LOG_RATE + z @ np.asarray(TRUE_BETA))
    onset = rng.exponential(1.0 / rate)
    other = rng.exponential(1.0 / OTHER_CAUSE_RATE, size=m)
    entry = rng.uniform(0.0, 1.0, size=m)
    admin = HORIZON - entry
    slope, noise_mean, noise_sd = GAP_SETTINGS[config.scenario]
    noise = rng.normal(noise_mean, noise_sd, size=m)
    gap = np.maximum(
        0.0, slope * (z[:, 0] + z[:, 1] + z[:, 0] * z[:, 1]) + noise
    )
    death = onset + gap
    cens = np.minimum(admin, other)
    x = np.minimum(onset, cens)
    d = onset <= cens
    x_death = np.minimum(death, cens)
    d_death = death <= cens
    pop = Population(
        covariates=z,
        onset_indicator=d.astype(float),
        onset_time=x,
        death_indicator=d_death.astype(float),
        death_time=x_death,
        entry_offset=entry,
    )
    return pop, _registry_from_population(pop)


def _registry_from_population(pop: Population) -> RegistrySummary:
    """Annual person-year incidence rates plus total case counts."""
    edges = np.arange(0.0, HORIZON + 0.5)
    years = len(edges) - 1
    x = pop.onset_time
    d = pop.onset_indicator == 1.0
    rates = np.empty(years)
    for k in range(years):
        at_risk = np.clip(x - edges[k], 0.0, 1.0).sum()
        events = np.count_nonzero(d & (x >= edges[k]) & (x < edges[k + 1]))
        rates[k] = events / at_risk if at_risk > 0 else 0.0
    cases = float(np.count_nonzero(d))
    return RegistrySummary(
        population_size=float(pop.size),
        incidence_rates=RateIntervals(edges=edges, rates=rates),
        group_sizes={"all": float(pop.size)},
        group_cases={"all": {HORIZON: cases}},
    )


def population_coefficients(pop: Population) -> np.ndarray:
    """Hazard-ratio coefficients fitted on the whole population, unweighted."""
    problem = CoxProblem(pop.onset_time, pop.onset_indicator == 1.0, pop.covariates)
    return problem.fit(np.ones(pop.size), outcome="incidence").beta


def pps_sample(
    measure: np.ndarray, expected_n: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """Poisson sampling proportional to a positive size measure.

    Returns (selected indices, design weights 1/pi, number of capped
    probabilities). Inclusion probabilities above 1 are capped with a warning.
    """
    measure = np.asarray(measure, dtype=float)
    if np.any(measure <= 0):
        raise ConfigError("sampling measures must be strictly positive")
    pi = expected_n * measure / measure.sum()
    n_capped = int(np.count_nonzero(pi > 1.0))
    if n_capped:
        warnings.warn(
            f"{n_capped} inclusion probabilities capped at 1", stacklevel=2
        )
        pi = np.minimum(pi, 1.0)
    keep = np.flatnonzero(rng.random(len(measure)) < pi)
    return keep, 1.0 / pi[keep], n_capped


def _cohort_measure(pop: Population, participation: str) -> np.ndarray:
    g1, g2 = COHORT_MEASURE_COEF
    eta = g1 * pop.covariates[:, 0] + g2 * pop.covariates[:, 1]
    if participation == "informative":
        gd, gzd = INFORMATIVE_CASE_COEF
        case = pop.onset_indicator
        eta = eta + gd * case + gzd * pop.covariates[:, 1] * case
    return np.exp(eta)


def _survey_measure(pop: Population) -> np.ndarray:
    s1, s2 = SURVEY_MEASURE_COEF
    u = pop.covariates / np.asarray(COVARIATE_SD)
    return np.exp(s1 * u[:, 0] + s2 * u[:, 1])


def draw_samples(
    pop: Population, config: ScenarioConfig, rng: np.random.Generator
) -> tuple[WeightedSample, WeightedSample, dict]:
    """Cohort (design masked: unit weights, both outcomes) and survey
    (design weights, mortality only) from one population."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c_idx, _, c_capped = pps_sample(
            _cohort_measure(pop, config.participation), config.cohort_size, rng
        )
        s_idx, s_w, s_capped = pps_sample(
            _survey_measure(pop), config.survey_size, rng
        )
    cohort_records = [
        SurvivalRecord(
            id=f"c{i}",
            covariates=pop.covariates[i],
            mortality=Outcome(int(pop.death_indicator[i]), float(pop.death_time[i])),
            incidence=Outcome(int(pop.onset_indicator[i]), float(pop.onset_time[i])),
            entry_offset=float(pop.entry_offset[i]),
            group="all",
        )
        for i in c_idx
    ]
    survey_records = [
        SurvivalRecord(
            id=f"s{i}",
            covariates=pop.covariates[i],
            mortality=Outcome(int(pop.death_indicator[i]), float(pop.death_time[i])),
            entry_offset=float(pop.entry_offset[i]),
        )
        for i in s_idx
    ]
    cohort = WeightedSample(cohort_records, np.ones(len(cohort_records)))
    survey = WeightedSample(survey_records, s_w)
    info = {"cohort_capped": c_capped, "survey_capped": s_capped}
    return cohort, survey, info


def risk_truth(times: np.ndarray) -> np.ndarray:
    """Event probability by each time for the zero-covariate profile."""
    return 1.0 - np.exp(-np.exp(BASELINE_LOG_RATE) * np.asarray(times, dtype=float))


@dataclass(frozen=True)
class MetricsRow:
    method: str
    component: str
    truth: float
    mean_estimate: float
    rel_bias_pct: float
    variance: float
    mse: float
    coverage: float | None


@dataclass
class MetricsTable:
    rows: list[MetricsRow]

    def row(self, method: str, component: str) -> MetricsRow:
        for r in self.rows:
            if r.method == method and r.component == component:
                return r
        raise KeyError(f"no metrics row for ({method}, {component})")

    def to_text(self) -> str:
        header = ("method", "component", "rel_bias_pct", "variance", "mse", "coverage")
        body = [
            (
                r.method,
                r.component,
                f"{r.rel_bias_pct:.2f}",
                f"{r.variance:.6g}",
                f"{r.mse:.6g}",
                "" if r.coverage is None else f"{r.coverage:.3f}",
            )
            for r in self.rows
        ]
        widths = [
            max(len(header[j]), *(len(row[j]) for row in body)) if body else len(header[j])
            for j in range(len(header))
        ]
        lines = [
            "  ".join(h.ljust(widths[j]) for j, h in enumerate(header)),
            "  ".join("-" * widths[j] for j in range(len(header))),
        ]
        lines += ["  ".join(row[j].ljust(widths[j]) for j in range(len(header))) for row in body]
        return "\n".join(lines)


def aggregate_metrics(
    method: str,
    components: tuple[str, ...],
    estimates: np.ndarray,
    truth: np.ndarray,
    ses: np.ndarray | None = None,
    wald_multiplier: float = 1.96,
) -> list[MetricsRow]:
    """Per-component summary of one method's replicated estimates.

    Variance uses the population convention (ddof=0) so that
    MSE = variance + bias^2 holds exactly.
    """
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.ndim != 2 or estimates.shape[1] != len(truth):
        raise ConfigError("estimates must be (replicates, components)")
    mean = estimates.mean(axis=0)
    bias = mean - truth
    variance = estimates.var(axis=0, ddof=0)
    mse = np.mean((estimates - truth) ** 2, axis=0)
    if ses is not None:
        covered = np.abs(estimates - truth) <= wald_multiplier * np.asarray(ses, dtype=float)
        coverage = covered.mean(axis=0)
    rows = []
    for j, name in enumerate(components):
        rows.append(
            MetricsRow(
                method=method,
                component=name,
                truth=float(truth[j]),
                mean_estimate=float(mean[j]),
                rel_bias_pct=float(100.0 * bias[j] / truth[j]),
                variance=float(variance[j]),
                mse=float(mse[j]),
                coverage=None if ses is None else float(coverage[j]),
            )
        )
    return rows


@dataclass
class StudyResult:
    config: ScenarioConfig
    components: tuple[str, ...]
    truth: np.ndarray
    estimates: dict[str, np.ndarray]  # method -> (n_ok, q)
    standard_errors: dict[str, np.ndarray] | None
    metrics: MetricsTable
    failed_sims: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def _simulate_one(
    config: ScenarioConfig, s: int
) -> tuple[int, dict | None, dict | None, str | None, dict]:
    """Draw population and samples for simulation ``s`` and run the pipeline.

    Self-contained (seeds reconstructed from the master seed and the
    simulation index) so parallel workers reproduce the sequential stream.
    """
    sim_ss = np.random.SeedSequence(config.master_seed, spawn_key=(s,))
    gen_ss, pipe_ss = sim_ss.spawn(2)
    rng = np.random.default_rng(gen_ss)
    pop, registry = generate_population(config, rng)
    cohort, survey, info = draw_samples(pop, config, rng)
    pipe_seed = int(np.random.default_rng(pipe_ss).integers(2**63))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = estimate(cohort, survey, registry, config.analysis_config(pipe_seed))
    except EstimationError as exc:
        return s, None, None, f"sim {s}: {type(exc).__name__}: {exc}", info
    est_row = {m: out[m].estimate_vector for m in config.methods}
    se_row = (
        {m: np.concatenate([out[m].beta_se, out[m].risk_se]) for m in config.methods}
        if config.jackknife
        else None
    )
    return s, est_row, se_row, None, info


def run_scenario(config: ScenarioConfig, *, threads: int = 1) -> StudyResult:
    """Simulate, estimate, and aggregate one study configuration.

    Per-simulation estimation failures are recorded; the run aborts only when
    they exceed the configured budget. Fully deterministic in
    (config, master_seed): ``threads`` only distributes simulations over
    worker processes, with results reduced into position-indexed slots.
    """
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    times = np.asarray(config.risk_times, dtype=float)
    components = tuple(f"beta_z{j + 1}" for j in range(3)) + tuple(
        f"risk_{t:g}" for t in times
    )
    truth = np.concatenate([np.asarray(TRUE_BETA), risk_truth(times)])
    q = len(truth)
    est = {m: np.full((config.n_sims, q), np.nan) for m in config.methods}
    ses = (
        {m: np.full((config.n_sims, q), np.nan) for m in config.methods}
        if config.jackknife
        else None
    )
    failed: list[str] = []
    capped = {"cohort_capped": 0, "survey_capped": 0}
    if threads == 1:
        outputs = (_simulate_one(config, s) for s in range(config.n_sims))
    else:
        pool = ProcessPoolExecutor(max_workers=min(threads, config.n_sims))
        outputs = pool.map(
            _simulate_one,
            (config for _ in range(config.n_sims)),
            range(config.n_sims),
            chunksize=max(1, config.n_sims // (4 * threads)),
        )
    for s, est_row, se_row, failure, info in outputs:
        capped["cohort_capped"] += info["cohort_capped"]
        capped["survey_capped"] += info["survey_capped"]
        if failure is not None:
            failed.append(failure)
            continue
        for m in config.methods:
            est[m][s] = est_row[m]
            if ses is not None:
                ses[m][s] = se_row[m]
    if threads > 1:
        pool.shutdown()
    if len(failed) > config.max_failure_rate * config.n_sims:
        raise ReplicateFailureError(
            f"{len(failed)} of {config.n_sims} simulations failed; first: {failed[0]}"
        )
    ok = ~np.isnan(est[config.methods[0]][:, 0])
    rows: list[MetricsRow] = []
    est_ok = {m: est[m][ok] for m in config.methods}
    ses_ok = {m: ses[m][ok] for m in config.methods} if ses is not None else None
    for m in config.methods:
        rows.extend(
            aggregate_metrics(
                m,
                components,
                est_ok[m],
                truth,
                None if ses_ok is None else ses_ok[m],
            )
        )
    return StudyResult(
        config=config,
        components=components,
        truth=truth,
        estimates=est_ok,
        standard_errors=ses_ok,
        metrics=MetricsTable(rows),
        failed_sims=failed,
        diagnostics=capped,
    )
