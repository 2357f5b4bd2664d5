"""Grouped delete-one jackknife replication over a cohort plus survey pair.

Replicates never drop rows: a deleted group keeps its records with weight
zero, and every weighted estimating equation treats zero-weight rows exactly
like removed rows. Remaining same-source weights are inflated so each
replicate preserves the source's weighted total in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import WeightedSample
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Replicate:
    """One leave-a-group-out configuration."""

    source: str  # "cohort" or "survey"
    stratum: int  # 0 for cohort and unstratified survey replicates
    label: str
    drop_mask: np.ndarray  # over that source's records
    multiplier: float  # applied to retained same-stratum weights
    variance_factor: float  # (n_h - 1) / n_h for this replicate's group count
    stratum_mask: np.ndarray | None = None  # survey only; None means all rows


@dataclass(frozen=True)
class ReplicateScheme:
    cohort_groups: np.ndarray
    survey_groups: np.ndarray
    replicates: tuple[Replicate, ...]

    @property
    def n_replicates(self) -> int:
        return len(self.replicates)

    @property
    def variance_factors(self) -> np.ndarray:
        return np.array([r.variance_factor for r in self.replicates])


def _random_groups(n: int, n_groups: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_groups
    return labels[rng.permutation(n)]


def build_scheme(
    cohort: WeightedSample,
    survey: WeightedSample | None,
    *,
    cohort_groups: int = 50,
    survey_groups: int = 100,
    rng: np.random.Generator,
) -> ReplicateScheme:
    """Random cohort groups; survey groups from (stratum, psu) design labels
    when every record carries them, otherwise random. No survey means cohort
    replicates only.

    Group counts are capped at the source size. A survey stratum with a single
    sampled unit cannot contribute a deletion and is rejected.
    """
    if cohort_groups < 2 or survey_groups < 2:
        raise ConfigError("need at least two replicate groups per source")
    g_c = min(cohort_groups, cohort.n)
    c_labels = _random_groups(cohort.n, g_c, rng)
    reps: list[Replicate] = []
    factor_c = (g_c - 1) / g_c
    for g in range(g_c):
        reps.append(
            Replicate(
                source="cohort",
                stratum=0,
                label=f"cohort:{g}",
                drop_mask=c_labels == g,
                multiplier=g_c / (g_c - 1),
                variance_factor=factor_c,
            )
        )

    if survey is None:
        return ReplicateScheme(
            cohort_groups=c_labels, survey_groups=np.empty(0, dtype=int),
            replicates=tuple(reps),
        )
    strata = survey.metadata("stratum")
    psus = survey.metadata("psu")
    if all(s is not None for s in strata) and all(p is not None for p in psus):
        pairs = np.array([f"{s}\x1f{p}" for s, p in zip(strata, psus)], dtype=object)
        s_arr = np.asarray(strata, dtype=object)
        s_labels = np.unique(pairs, return_inverse=True)[1]
        for h, s_value in enumerate(np.unique(s_arr)):
            in_h = s_arr == s_value
            units = np.unique(pairs[in_h])
            n_h = len(units)
            if n_h < 2:
                raise DataError(f"survey stratum {s_value!r} has a single unit")
            for u in units:
                reps.append(
                    Replicate(
                        source="survey",
                        stratum=h,
                        label=f"survey:{s_value}:{u.split(chr(31))[1]}",
                        drop_mask=pairs == u,
                        multiplier=n_h / (n_h - 1),
                        variance_factor=(n_h - 1) / n_h,
                        stratum_mask=in_h,
                    )
                )
    else:
        g_s = min(survey_groups, survey.n)
        s_labels = _random_groups(survey.n, g_s, rng)
        factor_s = (g_s - 1) / g_s
        for g in range(g_s):
            reps.append(
                Replicate(
                    source="survey",
                    stratum=0,
                    label=f"survey:{g}",
                    drop_mask=s_labels == g,
                    multiplier=g_s / (g_s - 1),
                    variance_factor=factor_s,
                )
            )
    return ReplicateScheme(
        cohort_groups=c_labels, survey_groups=s_labels, replicates=tuple(reps)
    )


def replicate_weights(
    rep: Replicate, cohort_weights: np.ndarray, survey_weights: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Full-length weight vectors for one replicate: dropped rows get zero,
    retained rows in the affected scope get the inflation multiplier, and the
    other source is returned unchanged (a fresh copy).
    """
    wc = np.array(cohort_weights, dtype=float)
    ws = None if survey_weights is None else np.array(survey_weights, dtype=float)
    if rep.source == "cohort":
        wc *= rep.multiplier
        wc[rep.drop_mask] = 0.0
    else:
        scope = rep.stratum_mask if rep.stratum_mask is not None else slice(None)
        ws[scope] *= rep.multiplier
        ws[rep.drop_mask] = 0.0
    return wc, ws


def jackknife_variance(
    full_estimate: np.ndarray,
    replicate_estimates: np.ndarray,
    variance_factors: np.ndarray,
) -> np.ndarray:
    """Per-component variance: the factor-weighted sum of squared deviations
    of replicate estimates around the full-sample estimate."""
    full = np.atleast_1d(np.asarray(full_estimate, dtype=float))
    reps = np.atleast_2d(np.asarray(replicate_estimates, dtype=float))
    factors = np.asarray(variance_factors, dtype=float)
    if reps.shape[0] != len(factors):
        raise DataError("one variance factor per replicate is required")
    if reps.shape[1] != len(full):
        raise DataError("replicate estimates do not match the full estimate")
    dev = reps - full
    return factors @ dev**2
