"""Imputing disease onset for survey deaths from the cohort's onset-to-death
gap times.

The cohort observes both onset and death; the survey observes death only. A
weighted linear model for the gap (death time minus onset time) fitted on
cohort deaths is used to draw onset times for survey deaths, so that the
survey can contribute to incidence-scale calibration totals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Outcome, WeightedSample
from .errors import DataError, InsufficientCasesError

MIN_GAP = 1e-6


@dataclass(frozen=True)
class GapModel:
    """Weighted least-squares fit of the onset-to-death gap on covariates."""

    coef: np.ndarray  # intercept first
    residual_sd: float
    n_deaths: int

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.coef[0] + z @ self.coef[1:]


def fit_gap_model(cohort: WeightedSample) -> GapModel:
    """Fit gap ~ [1, z] by weighted least squares over cohort deaths.

    Zero-weight deaths are excluded entirely (from the fit, the death count,
    and the residual variance). The residual variance carries an n/(n - k)
    degrees-of-freedom correction, k the number of regression parameters.
    """
    d_death, x_death = cohort.outcome_arrays("mortality")
    d_onset, x_onset = cohort.outcome_arrays("incidence")
    use = (d_death == 1) & (cohort.weights != 0.0)
    k = cohort.n_covariates + 1
    n = int(np.count_nonzero(use))
    if n < k + 2:
        raise InsufficientCasesError(
            f"{n} weighted deaths cannot identify {k} gap parameters"
        )
    if np.any(d_onset[use] != 1):
        raise DataError("every death must carry an observed onset")
    gap = x_death[use] - x_onset[use]
    design = np.column_stack([np.ones(n), cohort.covariates[use]])
    w = cohort.weights[use]
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(sw[:, None] * design, sw * gap, rcond=None)
    resid = gap - design @ coef
    sigma2 = float(w @ resid**2 / w.sum()) * n / (n - k)
    return GapModel(coef=coef, residual_sd=float(np.sqrt(sigma2)), n_deaths=n)


def impute_incidence(
    survey: WeightedSample, model: GapModel, rng: np.random.Generator
) -> WeightedSample:
    """Attach drawn onset outcomes to every survey death.

    Each death's gap is drawn as model prediction plus normal residual noise,
    floored at a small positive value; the onset time is the death time minus
    the drawn gap, floored at zero. Non-deaths are left untouched (their
    imputed view is censoring at the mortality time).
    """
    d, x = survey.outcome_arrays("mortality")
    is_death = d == 1
    n_deaths = int(np.count_nonzero(is_death))
    gaps = model.predict(survey.covariates[is_death]) + rng.normal(
        0.0, model.residual_sd, size=n_deaths
    )
    onset = np.maximum(x[is_death] - np.maximum(gaps, MIN_GAP), 0.0)
    records = list(survey.records)
    for j, i in enumerate(np.flatnonzero(is_death)):
        records[i] = records[i].with_imputed(Outcome(1, float(onset[j])))
    return WeightedSample(records, survey.weights, allow_nonpositive=True)
