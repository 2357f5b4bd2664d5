"""Core data containers: survival records, weighted samples, registry summaries,
fitted-model values, and the CSV/JSON interchange formats.

Two outcomes live on every record: disease incidence (possibly unobserved, e.g.
survey records) and all-cause-observed disease mortality (always observed).
A third, imputed incidence, may be attached by the imputation step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, OutcomeUnavailableError, SchemaError

OUTCOME_KINDS = ("incidence", "mortality", "imputed")


class Outcome(NamedTuple):
    """Right-censored outcome: event indicator in {0,1} and follow-up time >= 0."""

    indicator: int
    time: float


def _check_outcome(name: str, out: Outcome) -> None:
    if out.indicator not in (0, 1):
        raise DataError(f"{name} indicator must be 0 or 1, got {out.indicator!r}")
    if not np.isfinite(out.time) or out.time < 0:
        raise DataError(f"{name} time must be finite and >= 0, got {out.time!r}")


@dataclass(frozen=True)
class SurvivalRecord:
    """One individual: covariates plus the outcome pairs and design metadata.

    ``incidence`` is None for sources that do not observe disease onset
    (e.g. a mortality-only reference survey). ``imputed_incidence`` is filled
    by the gap-time imputation step. ``entry_offset`` is the calendar offset of
    study entry within the administrative window; all times are on the
    time-on-study scale.
    """

    id: str
    covariates: tuple[float, ...]
    mortality: Outcome
    incidence: Outcome | None = None
    imputed_incidence: Outcome | None = None
    entry_offset: float = 0.0
    stratum: str | None = None
    psu: str | None = None
    group: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))
        object.__setattr__(self, "mortality", Outcome(*self.mortality))
        _check_outcome("mortality", self.mortality)
        if self.incidence is not None:
            object.__setattr__(self, "incidence", Outcome(*self.incidence))
            _check_outcome("incidence", self.incidence)
            # a disease death implies an observed onset no later than the death
            if self.mortality.indicator == 1 and self.incidence.indicator != 1:
                raise DataError(f"record {self.id}: disease death without disease onset")
            if self.incidence.time > self.mortality.time:
                raise DataError(f"record {self.id}: onset time after mortality time")
        if self.imputed_incidence is not None:
            object.__setattr__(self, "imputed_incidence", Outcome(*self.imputed_incidence))
            _check_outcome("imputed_incidence", self.imputed_incidence)

    def with_imputed(self, outcome: Outcome) -> "SurvivalRecord":
        return replace(self, imputed_incidence=outcome)


class WeightedSample:
    """Immutable set of records with one weight per record.

    Weights must be strictly positive unless ``allow_nonpositive`` is set
    (used by calibrated weights, which may go negative, and by replicate
    weight vectors, which contain zeros for deleted units).
    """

    def __init__(
        self,
        records: Iterable[SurvivalRecord],
        weights: Sequence[float] | np.ndarray,
        *,
        allow_nonpositive: bool = False,
    ):
        self.records: tuple[SurvivalRecord, ...] = tuple(records)
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or len(w) != len(self.records):
            raise DataError(
                f"weights shape {w.shape} does not match {len(self.records)} records"
            )
        if not np.all(np.isfinite(w)):
            raise DataError("weights must be finite")
        if not allow_nonpositive and np.any(w <= 0):
            raise DataError("weights must be strictly positive")
        self.weights = w.copy()
        self.weights.setflags(write=False)
        if not self.records:
            raise DataError("a weighted sample needs at least one record")
        p = len(self.records[0].covariates)
        if any(len(r.covariates) != p for r in self.records):
            raise DataError("records disagree on covariate dimension")
        self._z = np.array([r.covariates for r in self.records], dtype=float)
        self._z.setflags(write=False)
        self._views: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def n_covariates(self) -> int:
        return self._z.shape[1]

    @property
    def covariates(self) -> np.ndarray:
        return self._z

    @property
    def has_incidence(self) -> bool:
        return all(r.incidence is not None for r in self.records)

    def outcome_arrays(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """Return (indicator, time) arrays for one outcome view.

        ``incidence`` requires every record to carry an observed onset.
        ``imputed`` resolves, per record: imputed value if present, else the
        observed incidence, else (for non-deaths) censoring carried over from
        the mortality outcome.
        """
        if kind not in OUTCOME_KINDS:
            raise ValueError(f"unknown outcome kind {kind!r}")
        if kind in self._views:
            return self._views[kind]
        d = np.empty(self.n, dtype=float)
        x = np.empty(self.n, dtype=float)
        for i, r in enumerate(self.records):
            if kind == "mortality":
                out = r.mortality
            elif kind == "incidence":
                out = r.incidence
                if out is None:
                    raise OutcomeUnavailableError(
                        f"record {r.id} has no observed incidence outcome"
                    )
            else:
                out = r.imputed_incidence or r.incidence
                if out is None:
                    if r.mortality.indicator == 1:
                        raise OutcomeUnavailableError(
                            f"record {r.id}: death record lacks an imputed onset time"
                        )
                    out = Outcome(0, r.mortality.time)
            d[i] = out.indicator
            x[i] = out.time
        d.setflags(write=False)
        x.setflags(write=False)
        self._views[kind] = (d, x)
        return d, x

    def metadata(self, name: str) -> tuple:
        """Per-record metadata column: 'stratum', 'psu', 'group', or 'id'."""
        return tuple(getattr(r, name) for r in self.records)

    def with_weights(
        self, weights: Sequence[float] | np.ndarray, *, allow_nonpositive: bool = False
    ) -> "WeightedSample":
        new = object.__new__(WeightedSample)
        new.records = self.records
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.n,):
            raise DataError(f"weights shape {w.shape} does not match {self.n} records")
        if not np.all(np.isfinite(w)):
            raise DataError("weights must be finite")
        if not allow_nonpositive and np.any(w <= 0):
            raise DataError("weights must be strictly positive")
        new.weights = w.copy()
        new.weights.setflags(write=False)
        new._z = self._z
        new._views = self._views
        return new

    def subset(self, index: np.ndarray) -> "WeightedSample":
        idx = np.asarray(index)
        recs = [self.records[i] for i in np.arange(self.n)[idx]] if idx.dtype == bool else [
            self.records[i] for i in idx
        ]
        return WeightedSample(recs, self.weights[idx], allow_nonpositive=True)


def risk_process_views(
    sample: WeightedSample, kind: str, times: Sequence[float] | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Counting and at-risk process values on a time grid.

    N[i, k] = 1{X_i <= t_k, D_i = 1};  Y[i, k] = 1{X_i >= t_k}.
    A record is still at risk at its own event time.
    """
    d, x = sample.outcome_arrays(kind)
    t = np.asarray(times, dtype=float)
    counting = ((x[:, None] <= t[None, :]) & (d[:, None] == 1)).astype(np.int8)
    at_risk = (x[:, None] >= t[None, :]).astype(np.int8)
    return counting, at_risk


@dataclass(frozen=True)
class RateIntervals:
    """Piecewise-constant event rate on contiguous intervals starting at 0."""

    edges: tuple[float, ...]  # k+1 edges, increasing, edges[0] == 0
    rates: tuple[float, ...]  # k nonnegative rates

    def __post_init__(self) -> None:
        e = np.asarray(self.edges, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        if len(e) != len(r) + 1 or len(r) < 1:
            raise DataError("rate intervals need k+1 edges for k rates")
        if e[0] != 0.0 or np.any(np.diff(e) <= 0):
            raise DataError("rate interval edges must increase from 0")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise DataError("rates must be finite and nonnegative")
        object.__setattr__(self, "edges", tuple(float(v) for v in e))
        object.__setattr__(self, "rates", tuple(float(v) for v in r))

    @property
    def horizon(self) -> float:
        return self.edges[-1]

    def rate_at(self, tau: np.ndarray | float) -> np.ndarray:
        """Rate applying at time tau (right-continuous; 0 beyond the horizon)."""
        t = np.atleast_1d(np.asarray(tau, dtype=float))
        e = np.asarray(self.edges)
        idx = np.searchsorted(e, t, side="right") - 1
        out = np.zeros_like(t)
        ok = (idx >= 0) & (idx < len(self.rates)) & (t <= self.horizon)
        idx = np.clip(idx, 0, len(self.rates) - 1)
        out[ok] = np.asarray(self.rates)[idx[ok]]
        return out

    def cumulative(self, t: np.ndarray | float) -> np.ndarray:
        """Exact integral of the rate from 0 to t."""
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        e = np.asarray(self.edges)
        r = np.asarray(self.rates)
        cum = np.concatenate([[0.0], np.cumsum(r * np.diff(e))])
        idx = np.clip(np.searchsorted(e, tt, side="right") - 1, 0, len(r) - 1)
        within = np.clip(tt - e[idx], 0.0, None)
        return cum[idx] + r[idx] * np.minimum(within, np.diff(e)[idx])


@dataclass(frozen=True)
class RegistrySummary:
    """Population-level totals: size, per-group sizes/case counts, and the
    composite (marginal) incidence rate curve used for the population-rate
    baseline hazard. ``group_cases`` maps group -> {horizon t -> case count}.
    """

    population_size: float
    incidence_rates: RateIntervals | None
    group_sizes: Mapping[str, float] = field(default_factory=dict)
    group_cases: Mapping[str, Mapping[float, float]] = field(default_factory=dict)
    mortality_rates: RateIntervals | None = None

    def __post_init__(self) -> None:
        if self.population_size <= 0:
            raise DataError("population size must be positive")
        if self.group_sizes:
            total = float(sum(self.group_sizes.values()))
            if abs(total - self.population_size) > 1e-6 * self.population_size:
                raise DataError(
                    f"group sizes sum to {total}, expected {self.population_size}"
                )
            for g, by_t in self.group_cases.items():
                if g not in self.group_sizes:
                    raise DataError(f"case counts for unknown group {g!r}")
                for t, c in by_t.items():
                    if c < 0 or c > self.group_sizes[g]:
                        raise DataError(f"group {g!r} case count at t={t} out of range")

    def cases_at(self, group: str, t: float) -> float:
        by_t = self.group_cases.get(group)
        if by_t is None or t not in by_t:
            raise DataError(f"registry has no case count for group {group!r} at t={t}")
        return float(by_t[t])


@dataclass(frozen=True)
class CoxFit:
    """Solution of a weighted partial-likelihood estimating equation."""

    beta: np.ndarray
    score: np.ndarray
    information: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    outcome: str
    n_events: int

    def linear_predictor(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.beta


@dataclass(frozen=True)
class BaselineHazard:
    """Nondecreasing step function for a cumulative baseline hazard.

    ``times`` are the (strictly increasing) step locations; evaluation at t
    returns the value at the largest step time <= t, and 0 before the first.
    """

    times: np.ndarray
    cumulative: np.ndarray
    kind: str = "breslow"

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        c = np.asarray(self.cumulative, dtype=float)
        if t.ndim != 1 or t.shape != c.shape:
            raise DataError("times and cumulative values must be 1-d and aligned")
        if len(t) and np.any(np.diff(t) <= 0):
            raise DataError("step times must be strictly increasing")
        if np.any(c < 0) or (len(c) > 1 and np.any(np.diff(c) < -1e-12)):
            raise DataError("cumulative hazard must be nonnegative and nondecreasing")
        t.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "cumulative", c)

    def __call__(self, t: np.ndarray | float) -> np.ndarray:
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, tt, side="right") - 1
        out = np.where(idx >= 0, self.cumulative[np.clip(idx, 0, None)], 0.0)
        return out


# ---------------------------------------------------------------------------
# CSV / JSON interchange

CSV_FIXED_COLUMNS = ["D", "X", "Dtilde", "Xtilde", "entry_offset", "stratum", "psu", "group", "weight"]


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_sample_csv(sample: WeightedSample, path: str) -> None:
    """Write a sample using the interchange schema.

    Columns: id, z1..zp, D, X, Dtilde, Xtilde, entry_offset, stratum, psu,
    group, weight. Records without an observed incidence outcome leave D and X
    empty. Floats are written with full round-trip precision.
    """
    p = sample.n_covariates
    header = ["id"] + [f"z{j + 1}" for j in range(p)] + CSV_FIXED_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec, wt in zip(sample.records, sample.weights):
            row = [rec.id] + [_fmt(z) for z in rec.covariates]
            if rec.incidence is None:
                row += ["", ""]
            else:
                row += [str(rec.incidence.indicator), _fmt(rec.incidence.time)]
            row += [str(rec.mortality.indicator), _fmt(rec.mortality.time)]
            row += [_fmt(rec.entry_offset)]
            row += [rec.stratum or "", rec.psu or "", rec.group or "", _fmt(wt)]
            w.writerow(row)


def read_sample_csv(path: str, *, default_weight: float = 1.0) -> WeightedSample:
    """Read a sample written by :func:`write_sample_csv`.

    A blank weight cell falls back to ``default_weight`` (cohort files usually
    carry no design weights). Blank D/X marks incidence as unobserved.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        zcols = []
        j = 1
        while f"z{j}" in header:
            zcols.append(header.index(f"z{j}"))
            j += 1
        if not zcols:
            raise SchemaError(f"{path}: no covariate columns z1..zp found")
        missing = [c for c in ["id", *CSV_FIXED_COLUMNS] if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in ["id", *CSV_FIXED_COLUMNS]}
        records, weights = [], []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{ln}: expected {len(header)} cells, got {len(row)}")

            def cell(name: str) -> str:
                return row[col[name]].strip()

            try:
                z = tuple(float(row[c]) for c in zcols)
                d_raw, x_raw = cell("D"), cell("X")
                if (d_raw == "") != (x_raw == ""):
                    raise SchemaError(f"{path}:{ln}: D and X must be both present or both empty")
                incidence = None if d_raw == "" else Outcome(int(float(d_raw)), float(x_raw))
                mortality = Outcome(int(float(cell("Dtilde"))), float(cell("Xtilde")))
                entry = float(cell("entry_offset") or 0.0)
                wt_raw = cell("weight")
                wt = default_weight if wt_raw == "" else float(wt_raw)
                records.append(
                    SurvivalRecord(
                        id=cell("id") or f"row{ln}",
                        covariates=z,
                        incidence=incidence,
                        mortality=mortality,
                        entry_offset=entry,
                        stratum=cell("stratum") or None,
                        psu=cell("psu") or None,
                        group=cell("group") or None,
                    )
                )
                weights.append(wt)
            except (ValueError, DataError) as exc:
                if isinstance(exc, SchemaError):
                    raise
                raise SchemaError(f"{path}:{ln}: {exc}") from exc
    if not records:
        raise SchemaError(f"{path}: no data rows")
    return WeightedSample(records, weights)


def write_registry_json(registry: RegistrySummary, path: str) -> None:
    payload = {
        "population_size": registry.population_size,
        "incidence_rates": {
            "edges": list(registry.incidence_rates.edges),
            "rates": list(registry.incidence_rates.rates),
        },
        "group_sizes": dict(registry.group_sizes),
        "group_cases": {
            g: {repr(float(t)): c for t, c in by_t.items()}
            for g, by_t in registry.group_cases.items()
        },
    }
    if registry.mortality_rates is not None:
        payload["mortality_rates"] = {
            "edges": list(registry.mortality_rates.edges),
            "rates": list(registry.mortality_rates.rates),
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def read_registry_json(path: str) -> RegistrySummary:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    try:
        rates = payload["incidence_rates"]
        reg = RegistrySummary(
            population_size=float(payload["population_size"]),
            incidence_rates=RateIntervals(tuple(rates["edges"]), tuple(rates["rates"])),
            group_sizes={str(g): float(v) for g, v in payload.get("group_sizes", {}).items()},
            group_cases={
                str(g): {float(t): float(c) for t, c in by_t.items()}
                for g, by_t in payload.get("group_cases", {}).items()
            },
            mortality_rates=(
                RateIntervals(
                    tuple(payload["mortality_rates"]["edges"]),
                    tuple(payload["mortality_rates"]["rates"]),
                )
                if "mortality_rates" in payload
                else None
            ),
        )
    except (KeyError, TypeError, ValueError, DataError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return reg
