"""Participation-propensity estimation for a non-probability cohort.

Stacks the cohort (label 1, logistic weight = cohort base weight, normally 1)
on top of the weighted reference survey (label 0, logistic weight = survey
design weight), fits a weighted logistic model, and converts fitted
propensities p into cohort pseudoweights (1 - p) / p. The survey side of the
stack stands in for the finite population, so the fitted odds estimate each
cohort member's participation odds relative to the population.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .datamodel import WeightedSample
from .errors import ConfigError, ConvergenceError, NonIdentifiableError, SeparationError

_LL_SLACK = 1e-9


@dataclass(frozen=True)
class PropensityModelSpec:
    """Model terms for the participation propensity.

    Terms name covariate columns ("z1".."zp"), the mortality event indicator
    ("Dtilde"), or products of those ("z2:Dtilde"). An intercept is always
    included and is not listed.
    """

    terms: tuple[str, ...]
    clamp: float = 1e-10

    def __post_init__(self) -> None:
        object.__setattr__(self, "terms", tuple(self.terms))
        if not (0 < self.clamp < 0.5):
            raise ConfigError(f"clamp must be in (0, 0.5), got {self.clamp}")


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    names: tuple[str, ...]
    converged: bool
    n_iter: int
    score: np.ndarray
    loglik: float

    def linear_predictor(self, design: np.ndarray) -> np.ndarray:
        return np.asarray(design, dtype=float) @ self.coef


@dataclass(frozen=True)
class PseudoweightResult:
    """Cohort pseudoweights with the propensity fit behind them."""

    pseudoweights: np.ndarray
    propensities: np.ndarray
    fit: LogisticFit
    n_clamped: int = 0
    spec: PropensityModelSpec | None = field(default=None, compare=False)


def _resolve_factor(sample: WeightedSample, name: str) -> np.ndarray:
    if name.startswith("z") and name[1:].isdigit():
        j = int(name[1:]) - 1
        if not 0 <= j < sample.n_covariates:
            raise ConfigError(
                f"term {name!r} out of range: sample has {sample.n_covariates} covariates"
            )
        return sample.covariates[:, j]
    if name == "Dtilde":
        d, _ = sample.outcome_arrays("mortality")
        return d
    raise ConfigError(f"unknown model term {name!r}")


def design_matrix(sample: WeightedSample, terms: tuple[str, ...]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Intercept-first design matrix for the term language above."""
    cols = [np.ones(sample.n)]
    for term in terms:
        col = np.ones(sample.n)
        for factor in term.split(":"):
            col = col * _resolve_factor(sample, factor.strip())
        cols.append(col)
    return np.column_stack(cols), ("intercept", *terms)


def _logistic_loglik(design, y, w, coef):
    eta = design @ coef
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_weighted_logistic(
    design: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    *,
    names: tuple[str, ...] | None = None,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 25,
    max_halvings: int = 10,
) -> LogisticFit:
    """Newton/IRLS solver for the weighted logistic score equation.

    Converged means the weighted score max-norm is at or below ``tol``.
    Complete separation is reported as its own error.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    w = np.asarray(weights, dtype=float)
    n, k = design.shape
    names = names or tuple(f"x{j}" for j in range(k))
    active = w != 0.0
    if not (np.any(y[active] == 1.0) and np.any(y[active] == 0.0)):
        raise NonIdentifiableError("both label classes need nonzero weight")
    coef = np.zeros(k) if init is None else np.asarray(init, dtype=float).copy()
    ll = _logistic_loglik(design, y, w, coef)
    converged = False
    n_iter = 0
    score = np.empty(k)
    for n_iter in range(1, max_iter + 1):
        with np.errstate(over="ignore"):
            p = 1.0 / (1.0 + np.exp(-(design @ coef)))
        eta = design @ coef
        score = design.T @ (w * (y - p))
        if np.max(np.abs(score)) <= tol:
            # a vanishing score with saturated, fully ordered predictors means
            # the likelihood is maximized only in the limit: separation
            if np.max(np.abs(eta)) > 30.0 and _separated(eta, y, active):
                raise SeparationError("separation detected in the propensity fit")
            converged = True
            break
        curv = w * p * (1.0 - p)
        hess = design.T @ (curv[:, None] * design)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError as exc:
            if _separated(design @ coef, y, active):
                raise SeparationError("separation detected in the propensity fit") from exc
            raise NonIdentifiableError(f"singular logistic information: {exc}") from exc
        h = 1.0
        cand = coef + step
        for _ in range(max_halvings):
            cand_ll = _logistic_loglik(design, y, w, cand)
            if np.isfinite(cand_ll) and cand_ll >= ll - _LL_SLACK * (abs(ll) + 1.0):
                break
            h *= 0.5
            cand = coef + h * step
        coef = cand
        ll = _logistic_loglik(design, y, w, coef)
    if not converged:
        if _separated(design @ coef, y, active):
            raise SeparationError("separation detected in the propensity fit")
        raise ConvergenceError(
            f"logistic solver did not converge in {max_iter} iterations "
            f"(score max-norm {np.max(np.abs(score)):.3e})",
            n_iter=n_iter,
            score_norm=float(np.max(np.abs(score))),
        )
    return LogisticFit(
        coef=coef, names=tuple(names), converged=converged, n_iter=n_iter, score=score, loglik=ll
    )


def _separated(eta: np.ndarray, y: np.ndarray, active: np.ndarray) -> bool:
    ones = eta[active & (y == 1.0)]
    zeros = eta[active & (y == 0.0)]
    if len(ones) == 0 or len(zeros) == 0:
        return False
    return float(ones.min()) > float(zeros.max()) or float(zeros.min()) > float(ones.max())


def ipw_pseudoweights(
    cohort: WeightedSample,
    survey: WeightedSample,
    spec: PropensityModelSpec,
    *,
    tol: float = 1e-8,
    max_iter: int = 25,
) -> PseudoweightResult:
    """Cohort pseudoweights from the stacked cohort/survey propensity fit.

    The cohort enters with its base weights (ones in ordinary use; replicate
    multipliers in jackknife runs) and the survey with its design weights.
    Fitted propensities are clamped away from {0, 1} by ``spec.clamp`` before
    the odds transform; clamped records are counted and warned about.
    """
    xc, names = design_matrix(cohort, spec.terms)
    xs, _ = design_matrix(survey, spec.terms)
    design = np.vstack([xc, xs])
    labels = np.concatenate([np.ones(cohort.n), np.zeros(survey.n)])
    weights = np.concatenate([cohort.weights, survey.weights])
    fit = fit_weighted_logistic(
        design, labels, weights, names=names, tol=tol, max_iter=max_iter
    )
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(-(xc @ fit.coef)))
    clamped = (p < spec.clamp) | (p > 1.0 - spec.clamp)
    n_clamped = int(np.count_nonzero(clamped))
    if n_clamped:
        warnings.warn(
            f"{n_clamped} fitted propensities clamped to [{spec.clamp}, {1 - spec.clamp}]",
            stacklevel=2,
        )
    p = np.clip(p, spec.clamp, 1.0 - spec.clamp)
    pseudo = cohort.weights * (1.0 - p) / p
    return PseudoweightResult(
        pseudoweights=pseudo, propensities=p, fit=fit, n_clamped=n_clamped, spec=spec
    )
