"""Combining the pseudoweighted cohort with the reference survey, calibrating
cohort weights to combined-sample totals, and poststratifying to registry
counts.

Calibration minimizes the chi-squared distance sum_i (wt_i - w_i)^2 / w_i
subject to linear constraints, whose solution is the closed form
wt_i = w_i * (1 + v_i' eta) with eta from a single linear solve.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datamodel import RegistrySummary, WeightedSample
from .errors import (
    CollinearAuxiliariesError,
    ConfigError,
    DataError,
    EmptyPoststratumError,
)
from .coxengine import InfluenceMatrix
from .datamodel import CoxFit

AUXILIARY_KINDS = ("cipw_beta", "cipw_lambda", "cipwi_beta", "cipwi_lambda")


@dataclass(frozen=True)
class CombinationScalars:
    """Per-source scale factors that blend the two samples into one pseudo
    population of the original total weight, discounting each source by its
    effective-sample-size share.
    """

    a_cohort: float
    a_survey: float
    cohort_total: float
    survey_total: float

    @property
    def combined_total(self) -> float:
        return self.a_cohort * self.cohort_total + self.a_survey * self.survey_total


@dataclass(frozen=True)
class AuxiliarySet:
    """Constraint columns evaluated on the combined sample plus their
    combined-sample weighted totals (the calibration targets)."""

    kind: str
    matrix: np.ndarray  # (n_combined, q)
    target: np.ndarray  # (q,)
    names: tuple[str, ...]


@dataclass(frozen=True)
class CalibrationResult:
    factors: np.ndarray  # (n, ) multiplicative adjustment per cohort record
    eta: np.ndarray  # (q,) multipliers
    weights: np.ndarray  # (n,) calibrated weights
    residual: float  # max-norm constraint residual, relative
    n_negative: int
    names: tuple[str, ...]


def _cv_squared(w: np.ndarray) -> float:
    mean = w.mean()
    if mean == 0:
        raise DataError("weights average to zero")
    return float(np.mean((w - mean) ** 2) / mean**2)


def combination_scalars(
    cohort_weights: np.ndarray, survey_weights: np.ndarray
) -> CombinationScalars:
    """Effective-sample-size blending factors for the two weight sets.

    Zero-weight entries (deleted replicate units) are excluded from counts,
    totals, and coefficients of variation.
    """
    wc = np.asarray(cohort_weights, dtype=float)
    ws = np.asarray(survey_weights, dtype=float)
    wc = wc[wc != 0.0]
    ws = ws[ws != 0.0]
    if len(wc) == 0 or len(ws) == 0:
        raise DataError("both sources need at least one active record")
    n_c, n_s = len(wc), len(ws)
    w_c, w_s = float(wc.sum()), float(ws.sum())
    total = w_c + w_s
    share_c = (_cv_squared(wc) + 1.0) / n_c
    share_s = (_cv_squared(ws) + 1.0) / n_s
    denom = share_c + share_s
    a_c = total / (2.0 * w_c) * (1.0 - share_c / denom)
    a_s = total / (2.0 * w_s) * (1.0 - share_s / denom)
    return CombinationScalars(
        a_cohort=float(a_c), a_survey=float(a_s), cohort_total=w_c, survey_total=w_s
    )


def build_combined(
    cohort: WeightedSample, survey: WeightedSample, scalars: CombinationScalars
) -> WeightedSample:
    """Stack cohort (pseudoweighted) and survey records with blended weights."""
    if cohort.n_covariates != survey.n_covariates:
        raise DataError("cohort and survey covariate dimensions differ")
    weights = np.concatenate(
        [scalars.a_cohort * cohort.weights, scalars.a_survey * survey.weights]
    )
    return WeightedSample(
        list(cohort.records) + list(survey.records), weights, allow_nonpositive=True
    )


def build_auxiliaries(
    combined: WeightedSample,
    kind: str,
    fit: CoxFit,
    influence: InfluenceMatrix | None = None,
) -> AuxiliarySet:
    """Constraint columns for one calibration target set.

    ``*_beta`` kinds use {1, event indicator, per-record coefficient
    sensitivities}; ``*_lambda`` kinds use {1, event indicator, follow-up time
    times the fitted hazard scale exp(beta'z)}. ``cipw_*`` read the mortality
    outcome, ``cipwi_*`` read the (imputed) incidence outcome.
    """
    if kind not in AUXILIARY_KINDS:
        raise ConfigError(f"unknown auxiliary kind {kind!r}")
    outcome = "mortality" if kind.startswith("cipw_") else "imputed"
    event_name = "mortality_events" if outcome == "mortality" else "incidence_events"
    d, x = combined.outcome_arrays(outcome)
    cols = [np.ones(combined.n), d]
    names = ["total", event_name]
    if kind.endswith("_beta"):
        if influence is None:
            raise ConfigError(f"auxiliary kind {kind!r} needs influence values")
        if influence.values.shape[0] != combined.n:
            raise DataError("influence rows do not match the combined sample")
        for j in range(influence.values.shape[1]):
            cols.append(influence.values[:, j])
            names.append(f"coef_sensitivity_{j + 1}")
    else:
        with np.errstate(over="ignore"):
            hazard_scale = np.exp(combined.covariates @ fit.beta)
        cols.append(x * hazard_scale)
        names.append("time_at_hazard_scale")
    matrix = np.column_stack(cols)
    target = matrix.T @ combined.weights
    return AuxiliarySet(kind=kind, matrix=matrix, target=target, names=tuple(names))


def _independent_columns(v: np.ndarray, w: np.ndarray, names: tuple[str, ...]) -> list[str]:
    scaled = np.sqrt(np.abs(w))[:, None] * v
    kept: list[int] = []
    offending: list[str] = []
    for j in range(v.shape[1]):
        trial = scaled[:, kept + [j]]
        if np.linalg.matrix_rank(trial) > len(kept):
            kept.append(j)
        else:
            offending.append(names[j])
    return offending


def solve_calibration(
    v: np.ndarray,
    base: np.ndarray,
    target: np.ndarray,
    *,
    names: tuple[str, ...] | None = None,
    truncate_negative: bool = False,
    residual_tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Closed-form chi-squared calibration: (eta, weights, relative residual).

    With ``truncate_negative``, negative results are floored at 1e-6 of the
    mean base weight and the system is re-solved once from the floored
    weights. A residual above ``residual_tol`` (relative to the target scale)
    or a singular/ill-conditioned Gram system raises, naming the dependent
    columns where they can be identified.
    """
    v = np.asarray(v, dtype=float)
    base = np.asarray(base, dtype=float)
    target = np.asarray(target, dtype=float)
    q = v.shape[1]
    names = names or tuple(f"v{j + 1}" for j in range(q))
    if len(target) != q:
        raise DataError("target length does not match auxiliary columns")
    # equilibrate columns so the conditioning test reflects actual
    # collinearity, not scale differences; the solution is scale-invariant
    col_scale = np.max(np.abs(v), axis=0)
    col_scale[col_scale == 0.0] = 1.0
    vs = v / col_scale

    def solve(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gram = vs.T @ (b[:, None] * vs)
        rhs = (target - v.T @ b) / col_scale
        try:
            eta = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as exc:
            bad = _independent_columns(vs, b, names)
            raise CollinearAuxiliariesError(
                f"collinear auxiliary columns: {bad or 'unidentified'}", columns=bad
            ) from exc
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e14:
            bad = _independent_columns(vs, b, names)
            raise CollinearAuxiliariesError(
                f"auxiliary Gram matrix ill-conditioned (cond {cond:.2e}); "
                f"suspect columns: {bad or 'unidentified'}",
                columns=bad,
            )
        eta = eta / col_scale
        return eta, b * (1.0 + v @ eta)

    eta, weights = solve(base)
    if truncate_negative and np.any(weights < 0):
        floor = 1e-6 * float(np.mean(base))
        eta, weights = solve(np.maximum(weights, floor))
    scale = max(1.0, float(np.max(np.abs(target))))
    residual = float(np.max(np.abs(v.T @ weights - target))) / scale
    if residual > residual_tol:
        raise CollinearAuxiliariesError(
            f"calibration residual {residual:.3e} exceeds {residual_tol:.1e}"
        )
    return eta, weights, residual


def calibrate_weights(
    cohort: WeightedSample,
    aux_matrix: np.ndarray,
    target: np.ndarray,
    *,
    names: tuple[str, ...] | None = None,
    truncate_negative: bool = False,
    residual_tol: float = 1e-10,
) -> CalibrationResult:
    """Chi-squared-distance calibration of cohort weights to fixed totals.

    Solves for multipliers eta from the weighted Gram system and returns
    factors F_i = 1 + v_i' eta applied to the base weights. Negative
    calibrated weights are allowed (with a warning); ``truncate_negative``
    floors them and re-solves once.
    """
    v = np.asarray(aux_matrix, dtype=float)
    if v.ndim != 2 or v.shape[0] != cohort.n:
        raise DataError(f"auxiliary matrix shape {v.shape} does not fit cohort {cohort.n}")
    names = names or tuple(f"v{j + 1}" for j in range(v.shape[1]))
    eta, weights, residual = solve_calibration(
        v,
        cohort.weights,
        target,
        names=names,
        truncate_negative=truncate_negative,
        residual_tol=residual_tol,
    )
    n_negative = int(np.count_nonzero(weights < 0))
    if n_negative:
        warnings.warn(f"{n_negative} calibrated weights are negative", stacklevel=2)
    factors = np.divide(
        weights, cohort.weights, out=np.zeros_like(weights), where=cohort.weights != 0.0
    )
    return CalibrationResult(
        factors=factors,
        eta=eta,
        weights=weights,
        residual=residual,
        n_negative=n_negative,
        names=names,
    )


def poststratify(
    sample: WeightedSample,
    registry: RegistrySummary,
    horizon: float,
    *,
    outcome: str = "incidence",
    collapse_empty: bool = False,
) -> WeightedSample:
    """Rescale weights so that, within each registry group, weighted case and
    non-case totals match the registry counts at ``horizon``.

    A record is a case when its ``outcome`` event occurred by ``horizon``.
    Cells with no positive sample mass raise, or are pooled into one collapsed
    cell when ``collapse_empty`` is set.
    """
    if not registry.group_sizes:
        raise ConfigError("registry carries no group sizes to poststratify to")
    d, x = sample.outcome_arrays(outcome)
    case = (d == 1) & (x <= horizon)
    groups = np.asarray(sample.metadata("group"), dtype=object)
    if any(g is None for g in groups):
        raise DataError("every record needs a group label for poststratification")
    unknown = sorted({str(g) for g in groups} - set(registry.group_sizes))
    if unknown:
        raise DataError(f"sample groups missing from the registry: {unknown}")
    new_w = np.array(sample.weights, dtype=float)
    pooled_mask = np.zeros(sample.n, dtype=bool)
    pooled_m = pooled_m1 = 0.0
    for g, m_g in registry.group_sizes.items():
        in_g = groups == g
        m1_g = registry.cases_at(g, horizon)
        servable = np.any(in_g) and _scale_cell(new_w, in_g & case, m1_g) and _scale_cell(
            new_w, in_g & ~case, m_g - m1_g
        )
        if not servable:
            if not collapse_empty:
                raise EmptyPoststratumError(
                    f"group {g!r} has a case or non-case cell without positive weight"
                )
            pooled_mask |= in_g
            pooled_m += m_g
            pooled_m1 += m1_g
            new_w[in_g] = sample.weights[in_g]
    if pooled_m > 0:
        ok = np.any(pooled_mask) and _scale_cell(
            new_w, pooled_mask & case, pooled_m1
        ) and _scale_cell(new_w, pooled_mask & ~case, pooled_m - pooled_m1)
        if not ok:
            # last resort: a single cell over the whole sample, matching the
            # registry's overall case and non-case margins
            total = float(sum(registry.group_sizes.values()))
            total_cases = float(
                sum(registry.cases_at(g, horizon) for g in registry.group_sizes)
            )
            new_w = np.array(sample.weights, dtype=float)
            warnings.warn(
                "poststratification collapsed to overall margins", stacklevel=2
            )
            if not (
                _scale_cell(new_w, case, total_cases)
                and _scale_cell(new_w, ~case, total - total_cases)
            ):
                raise EmptyPoststratumError(
                    "sample lacks positive weight in a case or non-case margin"
                )
    return sample.with_weights(new_w, allow_nonpositive=True)


def _scale_cell(weights: np.ndarray, mask: np.ndarray, total: float) -> bool:
    current = float(weights[mask].sum())
    if current <= 0.0:
        return total == 0.0 and not np.any(mask)
    weights[mask] *= total / current
    return True
