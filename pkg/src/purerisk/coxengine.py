"""Weighted Cox partial-likelihood machinery.

Implements the weighted estimating equation with Breslow tie handling, its
Newton solver, per-record weight-derivative (influence) values, the Breslow
cumulative baseline hazard, the population-rate baseline hazard built from
registry incidence rates and an attributable-risk adjustment, and pure risk.

All solvers share one convention: risk sets are right-closed (a record is at
risk at its own event time) and the score of a fit is the plain weighted sum,
with no sample-size normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import BaselineHazard, CoxFit, RegistrySummary, WeightedSample
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateOutcomeError,
    EstimationError,
    NonIdentifiableError,
    RiskSetExhaustedError,
)

_LL_SLACK = 1e-9  # relative slack when judging "non-increase" in step-halving


@dataclass(frozen=True)
class InfluenceMatrix:
    """Per-record derivative of the fitted coefficients with respect to each
    record's weight, evaluated at the solution: values[i] = d(beta_hat)/d(w_i).
    """

    values: np.ndarray  # (n, p)
    beta: np.ndarray  # (p,) solution the derivatives refer to

    def __post_init__(self) -> None:
        self.values.setflags(write=False)
        self.beta.setflags(write=False)


class CoxProblem:
    """Sorted, weight-independent precomputation for one (time, event, Z) triple.

    Reused across repeated fits that differ only in weights (replicate loops),
    which keeps each refit to a handful of vectorized passes.
    """

    def __init__(self, x: np.ndarray, d: np.ndarray, z: np.ndarray):
        x = np.asarray(x, dtype=float)
        d = np.asarray(d)
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or len(x) != len(d) or len(x) != z.shape[0]:
            raise ValueError("x, d, z must be aligned")
        self.n, self.p = z.shape
        self.order = np.argsort(x, kind="stable")
        self.xs = x[self.order]
        self.zs = z[self.order]
        self.ds = d[self.order].astype(bool)
        # first sorted index of each record's own time: risk set = suffix from there
        self.first_idx = np.searchsorted(self.xs, self.xs, side="left")
        self.zouter = self.zs[:, :, None] * self.zs[:, None, :]

    # -- weighted sums ------------------------------------------------------

    def _risk_terms(self, ws: np.ndarray, beta: np.ndarray):
        eta = self.zs @ beta
        with np.errstate(over="ignore"):
            expeta = np.exp(eta)
        r = ws * expeta
        s0 = np.cumsum(r[::-1])[::-1]
        return eta, expeta, r, s0

    def _event_rows(self, ws: np.ndarray) -> np.ndarray:
        return np.flatnonzero(self.ds & (ws != 0.0))

    def _loglik_sorted(self, ws: np.ndarray, beta: np.ndarray) -> float:
        ev = self._event_rows(ws)
        if len(ev) == 0:
            raise DegenerateOutcomeError("no events with nonzero weight")
        eta, _, _, s0 = self._risk_terms(ws, beta)
        s0_ev = s0[self.first_idx[ev]]
        if np.any(s0_ev <= 0) or not np.all(np.isfinite(s0_ev)):
            return -np.inf
        return float(np.sum(ws[ev] * (eta[ev] - np.log(s0_ev))))

    def _score_info_sorted(self, ws: np.ndarray, beta: np.ndarray):
        """Weighted score, observed information, and log partial likelihood."""
        ev = self._event_rows(ws)
        if len(ev) == 0:
            raise DegenerateOutcomeError("no events with nonzero weight")
        eta, _, r, s0 = self._risk_terms(ws, beta)
        s1 = np.cumsum((r[:, None] * self.zs)[::-1], axis=0)[::-1]
        s2 = np.cumsum((r[:, None, None] * self.zouter)[::-1], axis=0)[::-1]
        fi = self.first_idx[ev]
        s0e = s0[fi]
        if np.any(s0e <= 0) or not np.all(np.isfinite(s0e)):
            raise EstimationError("nonpositive risk-set mass at an event time")
        zbar = s1[fi] / s0e[:, None]
        we = ws[ev]
        score = (we[:, None] * (self.zs[ev] - zbar)).sum(axis=0)
        vmat = s2[fi] / s0e[:, None, None] - zbar[:, :, None] * zbar[:, None, :]
        info = (we[:, None, None] * vmat).sum(axis=0)
        ll = float(np.sum(we * (eta[ev] - np.log(s0e))))
        return score, info, ll

    # -- solver ---------------------------------------------------------------

    def fit(
        self,
        ws: np.ndarray,
        *,
        init: np.ndarray | None = None,
        tol: float = 1e-8,
        max_iter: int = 25,
        max_halvings: int = 10,
        outcome: str = "",
    ) -> CoxFit:
        ws = np.asarray(ws, dtype=float)[self.order]
        ev = self._event_rows(ws)
        if len(ev) == 0:
            raise DegenerateOutcomeError(f"no {outcome or 'event'} records with nonzero weight")
        active = ws != 0.0
        spans = np.ptp(self.zs[active], axis=0) if active.any() else np.zeros(self.p)
        flat = np.flatnonzero(spans == 0.0)
        if len(flat):
            raise NonIdentifiableError(
                f"covariate column(s) {flat.tolist()} constant on the weighted sample"
            )
        beta = np.zeros(self.p) if init is None else np.asarray(init, dtype=float).copy()
        score, info, ll = self._score_info_sorted(ws, beta)
        converged = False
        n_iter = 0
        for n_iter in range(1, max_iter + 1):
            if np.max(np.abs(score)) <= tol:
                converged = True
                break
            try:
                step = np.linalg.solve(info, score)
            except np.linalg.LinAlgError as exc:
                raise NonIdentifiableError(f"singular information matrix: {exc}") from exc
            h = 1.0
            cand = beta + step
            for _ in range(max_halvings):
                cand_ll = self._loglik_sorted(ws, cand)
                if np.isfinite(cand_ll) and cand_ll >= ll - _LL_SLACK * (abs(ll) + 1.0):
                    break
                h *= 0.5
                cand = beta + h * step
            beta = cand
            score, info, ll = self._score_info_sorted(ws, beta)
        else:
            n_iter = max_iter
        if not converged and np.max(np.abs(score)) <= tol:
            converged = True
        if not converged:
            raise ConvergenceError(
                f"Cox solver did not converge in {max_iter} iterations "
                f"(score max-norm {np.max(np.abs(score)):.3e})",
                n_iter=n_iter,
                score_norm=float(np.max(np.abs(score))),
            )
        return CoxFit(
            beta=beta,
            score=score,
            information=info,
            loglik=ll,
            converged=converged,
            n_iter=n_iter,
            outcome=outcome,
            n_events=int(len(ev)),
        )

    # -- post-fit quantities --------------------------------------------------

    def _hazard_increments_sorted(self, ws: np.ndarray, beta: np.ndarray):
        """Jump times, Breslow increments, and risk-set means at event times."""
        ev = self._event_rows(ws)
        if len(ev) == 0:
            raise DegenerateOutcomeError("no events with nonzero weight")
        _, expeta, r, s0 = self._risk_terms(ws, beta)
        s1 = np.cumsum((r[:, None] * self.zs)[::-1], axis=0)[::-1]
        fi = self.first_idx[ev]
        s0e = s0[fi]
        if np.any(s0e <= 0) or not np.all(np.isfinite(s0e)):
            raise EstimationError("nonpositive risk-set mass at an event time")
        # collapse tied event times: same time <=> same risk-set start index
        uniq_fi, inv = np.unique(fi, return_inverse=True)
        jump_times = self.xs[uniq_fi]
        wsum = np.zeros(len(uniq_fi))
        np.add.at(wsum, inv, ws[ev])
        s0u = s0[uniq_fi]
        increments = wsum / s0u
        zbar_u = s1[uniq_fi] / s0u[:, None]
        return jump_times, increments, zbar_u, expeta, s0, s1

    def breslow(self, ws: np.ndarray, beta: np.ndarray) -> BaselineHazard:
        ws = np.asarray(ws, dtype=float)[self.order]
        jump_times, increments, _, _, _, _ = self._hazard_increments_sorted(ws, beta)
        keep = increments != 0.0
        return BaselineHazard(
            times=jump_times[keep], cumulative=np.cumsum(increments[keep]), kind="breslow"
        )

    def influence(self, ws: np.ndarray, beta: np.ndarray, info: np.ndarray | None = None) -> np.ndarray:
        """d(beta_hat)/d(w_i) for every record, in the original record order."""
        ws = np.asarray(ws, dtype=float)[self.order]
        jump_times, increments, zbar_u, expeta, s0, s1 = self._hazard_increments_sorted(ws, beta)
        if info is None:
            _, info, _ = self._score_info_sorted(ws, beta)
        cum_inc = np.concatenate([[0.0], np.cumsum(increments)])
        cum_zinc = np.vstack([np.zeros(self.p), np.cumsum(increments[:, None] * zbar_u, axis=0)])
        pos = np.searchsorted(jump_times, self.xs, side="right")
        a_i = cum_inc[pos]
        g_i = cum_zinc[pos]
        term = -expeta[:, None] * (a_i[:, None] * self.zs - g_i)
        fi = self.first_idx
        s0_own = s0[fi]
        own_ok = self.ds & (s0_own > 0)
        rows = np.flatnonzero(own_ok)
        term[rows] += self.zs[rows] - s1[fi[rows]] / s0_own[rows, None]
        try:
            delta_sorted = np.linalg.solve(info, term.T).T
        except np.linalg.LinAlgError as exc:
            raise NonIdentifiableError(f"singular information matrix: {exc}") from exc
        delta = np.empty_like(delta_sorted)
        delta[self.order] = delta_sorted
        return delta


def _problem(sample: WeightedSample, outcome: str) -> CoxProblem:
    d, x = sample.outcome_arrays(outcome)
    return CoxProblem(x, d == 1, sample.covariates)


def fit_weighted_cox(
    sample: WeightedSample,
    outcome: str,
    *,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 25,
) -> CoxFit:
    """Solve the weighted partial-likelihood score equation for one outcome.

    Newton iteration from ``init`` (zeros by default) with analytic observed
    information and step-halving; converged means the weighted score max-norm
    is at or below ``tol``. Raises on no usable events, non-identifiable
    covariates, or an exhausted iteration budget.
    """
    return _problem(sample, outcome).fit(
        sample.weights, init=init, tol=tol, max_iter=max_iter, outcome=outcome
    )


def weighted_partial_loglik(sample: WeightedSample, outcome: str, beta: np.ndarray) -> float:
    """Weighted log partial likelihood with Breslow handling of ties."""
    prob = _problem(sample, outcome)
    return prob._loglik_sorted(sample.weights[prob.order], np.asarray(beta, dtype=float))


def score_and_information(
    sample: WeightedSample, outcome: str, beta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted score vector and observed information at ``beta``."""
    prob = _problem(sample, outcome)
    score, info, _ = prob._score_info_sorted(sample.weights[prob.order], np.asarray(beta, dtype=float))
    return score, info


def influence_functions(
    sample: WeightedSample, outcome: str, fit: CoxFit
) -> InfluenceMatrix:
    """Per-record weight derivatives of the fitted coefficients.

    Rows sum (weighted by the fit weights) to zero at the solution, and scale
    as 1/c when all weights are scaled by c.
    """
    prob = _problem(sample, outcome)
    values = prob.influence(sample.weights, fit.beta, info=fit.information)
    return InfluenceMatrix(values=values, beta=np.asarray(fit.beta, dtype=float).copy())


def _stratum_weights(
    problems: Sequence[CoxProblem], weights: Sequence[np.ndarray]
) -> list[np.ndarray]:
    if len(problems) == 0 or len(problems) != len(weights):
        raise ConfigError("need exactly one weight vector per stratum")
    if len({prob.p for prob in problems}) != 1:
        raise ConfigError("strata disagree on the covariate dimension")
    sorted_ws = []
    for prob, w in zip(problems, weights):
        w = np.asarray(w, dtype=float)
        if len(w) != prob.n:
            raise DataError("weight vector does not match its stratum")
        sorted_ws.append(w[prob.order])
    return sorted_ws


def fit_stratified_cox(
    problems: Sequence[CoxProblem],
    weights: Sequence[np.ndarray],
    *,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 25,
    max_halvings: int = 10,
    outcome: str = "",
) -> CoxFit:
    """Shared coefficients across strata, each with its own baseline hazard.

    Maximizes the sum of the per-stratum weighted partial log likelihoods by
    Newton iteration on the summed score with the summed observed information.
    Risk sets never cross strata, so records in one stratum constrain another
    only through the common coefficient vector. A stratum with no weighted
    events contributes nothing and is skipped; at least one stratum must
    retain events.
    """
    sorted_ws = _stratum_weights(problems, weights)
    active = [len(prob._event_rows(ws)) > 0 for prob, ws in zip(problems, sorted_ws)]
    n_events = sum(
        len(prob._event_rows(ws)) for prob, ws in zip(problems, sorted_ws)
    )
    if not any(active):
        raise DegenerateOutcomeError(
            f"no {outcome or 'event'} records with nonzero weight in any stratum"
        )
    p = problems[0].p
    # a column must vary inside at least one event-bearing stratum; variation
    # only across strata is absorbed by the separate baselines
    varies = np.zeros(p, dtype=bool)
    for prob, ws, act in zip(problems, sorted_ws, active):
        if not act:
            continue
        rows = ws != 0.0
        varies |= np.ptp(prob.zs[rows], axis=0) > 0.0
    flat = np.flatnonzero(~varies)
    if len(flat):
        raise NonIdentifiableError(
            f"covariate column(s) {flat.tolist()} constant within every "
            "event-bearing stratum"
        )

    def totals(b: np.ndarray):
        score = np.zeros(p)
        info = np.zeros((p, p))
        ll = 0.0
        for prob, ws, act in zip(problems, sorted_ws, active):
            if not act:
                continue
            sc, inf, l = prob._score_info_sorted(ws, b)
            score += sc
            info += inf
            ll += l
        return score, info, ll

    def loglik(b: np.ndarray) -> float:
        return sum(
            prob._loglik_sorted(ws, b)
            for prob, ws, act in zip(problems, sorted_ws, active)
            if act
        )

    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    score, info, ll = totals(beta)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        if np.max(np.abs(score)) <= tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise NonIdentifiableError(f"singular information matrix: {exc}") from exc
        h = 1.0
        cand = beta + step
        for _ in range(max_halvings):
            cand_ll = loglik(cand)
            if np.isfinite(cand_ll) and cand_ll >= ll - _LL_SLACK * (abs(ll) + 1.0):
                break
            h *= 0.5
            cand = beta + h * step
        beta = cand
        score, info, ll = totals(beta)
    else:
        n_iter = max_iter
    if not converged and np.max(np.abs(score)) <= tol:
        converged = True
    if not converged:
        raise ConvergenceError(
            f"stratified Cox solver did not converge in {max_iter} iterations "
            f"(score max-norm {np.max(np.abs(score)):.3e})",
            n_iter=n_iter,
            score_norm=float(np.max(np.abs(score))),
        )
    return CoxFit(
        beta=beta,
        score=score,
        information=info,
        loglik=ll,
        converged=converged,
        n_iter=n_iter,
        outcome=outcome,
        n_events=int(n_events),
    )


def stratified_influence(
    problems: Sequence[CoxProblem], weights: Sequence[np.ndarray], fit: CoxFit
) -> InfluenceMatrix:
    """Per-record weight derivatives for a stratified fit.

    Each stratum's score terms are local, so its rows are the usual
    single-stratum terms premultiplied by the inverse of the total
    information; records of an event-free stratum get zero rows. Rows are
    stacked in stratum order, each block in its original record order.
    """
    sorted_ws = _stratum_weights(problems, weights)
    blocks = []
    for prob, ws, w_orig in zip(problems, sorted_ws, weights):
        if len(prob._event_rows(ws)) == 0:
            blocks.append(np.zeros((prob.n, prob.p)))
        else:
            blocks.append(prob.influence(w_orig, fit.beta, info=fit.information))
    return InfluenceMatrix(
        values=np.vstack(blocks), beta=np.asarray(fit.beta, dtype=float).copy()
    )


def breslow_baseline(sample: WeightedSample, outcome: str, beta: np.ndarray) -> BaselineHazard:
    """Cumulative baseline hazard with the standard risk-set-ratio jumps."""
    prob = _problem(sample, outcome)
    return prob.breslow(sample.weights, np.asarray(beta, dtype=float))


def par_baseline(
    cohort: WeightedSample,
    beta: np.ndarray,
    registry: RegistrySummary,
    t_max: float,
    *,
    include_times: np.ndarray | None = None,
    max_empty_fraction: float = 0.02,
) -> BaselineHazard:
    """Population-rate cumulative baseline hazard.

    Integrates registry composite incidence rates deflated by the weighted
    attributable-risk fraction estimated from the cohort:
    d(Lambda0) = [sum_i w_i Y_i(tau)] / [sum_i w_i Y_i(tau) exp(beta'z_i)]
    * rate(tau) dtau, integrated exactly over the merged breakpoints of the
    at-risk step function and the registry rate intervals.

    Over any stretch where the weighted risk set has no positive mass, the
    last defined at-risk ratio is carried forward; if such stretches exceed
    ``max_empty_fraction`` of [0, t_max] the estimate is refused.

    The result is stored as a step function over the integration breakpoints,
    so evaluation is exact at cohort follow-up times, registry interval edges,
    t_max, and any extra ``include_times``; between breakpoints it returns the
    value at the previous breakpoint.
    """
    if t_max <= 0:
        raise ConfigError("t_max must be positive")
    if t_max > registry.incidence_rates.horizon + 1e-9:
        raise ConfigError(
            f"t_max {t_max} exceeds the registry rate horizon "
            f"{registry.incidence_rates.horizon}"
        )
    d_inc, x_inc = cohort.outcome_arrays("incidence")
    del d_inc  # at-risk status only depends on follow-up time
    beta = np.asarray(beta, dtype=float)
    with np.errstate(over="ignore"):
        expeta = np.exp(cohort.covariates @ beta)
    order = np.argsort(x_inc, kind="stable")
    xs = x_inc[order]
    ws = cohort.weights[order]
    re = ws * expeta[order]
    sw = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
    swe = np.concatenate([np.cumsum(re[::-1])[::-1], [0.0]])
    edges = np.asarray(registry.incidence_rates.edges)
    extra = np.asarray(include_times, dtype=float) if include_times is not None else np.empty(0)
    breaks = np.unique(
        np.concatenate(
            [
                [0.0, t_max],
                xs[(xs > 0) & (xs < t_max)],
                edges[(edges > 0) & (edges < t_max)],
                extra[(extra > 0) & (extra < t_max)],
            ]
        )
    )
    lo, hi = breaks[:-1], breaks[1:]
    mid = 0.5 * (lo + hi)
    start = np.searchsorted(xs, lo, side="right")
    mass = swe[start]
    numer = sw[start]
    valid = mass > 0
    if not valid[0]:
        raise RiskSetExhaustedError("cohort risk set is empty from time 0")
    empty_len = float(np.sum((hi - lo)[~valid]))
    if empty_len > max_empty_fraction * t_max:
        raise RiskSetExhaustedError(
            f"cohort risk set empty over {empty_len:.4g} of [0, {t_max}] "
            f"(allowed {max_empty_fraction * t_max:.4g})"
        )
    ratio = np.where(valid, numer / np.where(valid, mass, 1.0), 0.0)
    last_valid = np.maximum.accumulate(np.where(valid, np.arange(len(ratio)), -1))
    ratio = ratio[last_valid]
    rates = registry.incidence_rates.rate_at(mid)
    cum = np.cumsum(ratio * rates * (hi - lo))
    return BaselineHazard(times=hi, cumulative=cum, kind="population_rate")


def pure_risk(
    baseline: BaselineHazard,
    beta: np.ndarray,
    profile: np.ndarray,
    times: np.ndarray | float,
) -> np.ndarray:
    """Absolute risk of the event by each time for a covariate profile,
    ignoring competing mortality: 1 - exp(-Lambda0(t) * exp(beta'profile)).
    """
    rel = float(np.exp(np.asarray(profile, dtype=float) @ np.asarray(beta, dtype=float)))
    lam = baseline(times)
    return 1.0 - np.exp(-lam * rel)
