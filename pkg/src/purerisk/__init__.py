"""Population-representative pure risk estimation.

Combines a non-probability cohort carrying disease incidence and mortality
follow-up, a weighted reference survey carrying mortality follow-up only, and
registry summary totals, to produce calibrated pseudoweighted hazard-ratio and
absolute-risk estimates with grouped-jackknife variances.
"""

from .errors import (
    CollinearAuxiliariesError,
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateOutcomeError,
    EmptyPoststratumError,
    EstimationError,
    InsufficientCasesError,
    NonIdentifiableError,
    OutcomeUnavailableError,
    PureRiskError,
    ReplicateFailureError,
    RiskSetExhaustedError,
    SchemaError,
    SeparationError,
)
from .datamodel import (
    BaselineHazard,
    CoxFit,
    Outcome,
    RateIntervals,
    RegistrySummary,
    SurvivalRecord,
    WeightedSample,
    read_registry_json,
    read_sample_csv,
    risk_process_views,
    write_registry_json,
    write_sample_csv,
)
from .coxengine import (
    CoxProblem,
    InfluenceMatrix,
    breslow_baseline,
    fit_stratified_cox,
    fit_weighted_cox,
    influence_functions,
    par_baseline,
    pure_risk,
    score_and_information,
    stratified_influence,
    weighted_partial_loglik,
)
from .propensity import (
    LogisticFit,
    PropensityModelSpec,
    PseudoweightResult,
    fit_weighted_logistic,
    ipw_pseudoweights,
)
from .combine_calibrate import (
    AuxiliarySet,
    CalibrationResult,
    CombinationScalars,
    build_auxiliaries,
    build_combined,
    calibrate_weights,
    combination_scalars,
    poststratify,
    solve_calibration,
)
from .imputation import GapModel, fit_gap_model, impute_incidence
from .jackknife import (
    Replicate,
    ReplicateScheme,
    build_scheme,
    jackknife_variance,
    replicate_weights,
)
from .pipeline import (
    METHODS,
    AnalysisConfig,
    MethodResult,
    PipelineEstimate,
    estimate,
)
from .simharness import (
    MetricsRow,
    MetricsTable,
    Population,
    ScenarioConfig,
    StudyResult,
    aggregate_metrics,
    draw_samples,
    generate_population,
    risk_truth,
    run_scenario,
)

__version__ = "0.1.0"
