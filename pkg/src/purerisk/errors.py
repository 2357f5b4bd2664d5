"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError -> 2, DataError -> 3, EstimationError -> 4.
"""


class PureRiskError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PureRiskError):
    """Invalid configuration: bad flag values, malformed config JSON, unknown terms."""


class DataError(PureRiskError):
    """Invalid input data."""


class SchemaError(DataError):
    """A CSV or JSON input does not match the documented schema."""


class OutcomeUnavailableError(DataError):
    """A fit requested an outcome that some records do not carry."""


class EstimationError(PureRiskError):
    """An estimation step failed."""


class DegenerateOutcomeError(EstimationError):
    """No usable events (or no usable non-events) for the requested fit."""


class NonIdentifiableError(EstimationError):
    """Singular information matrix, e.g. a constant or aliased covariate."""


class ConvergenceError(EstimationError):
    """Iteration budget exhausted before the score tolerance was met."""

    def __init__(self, message, *, n_iter=None, score_norm=None):
        super().__init__(message)
        self.n_iter = n_iter
        self.score_norm = score_norm


class SeparationError(ConvergenceError):
    """Complete separation detected in a logistic fit."""


class CollinearAuxiliariesError(EstimationError):
    """Calibration constraint columns are collinear."""

    def __init__(self, message, *, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class EmptyPoststratumError(EstimationError):
    """A poststratification cell has no sample mass to absorb its registry total."""


class InsufficientCasesError(EstimationError):
    """Too few death records to identify the gap-time regression."""


class RiskSetExhaustedError(EstimationError):
    """The at-risk set empties too early for the requested horizon."""


class ReplicateFailureError(EstimationError):
    """More than the tolerated share of jackknife replicates failed."""
