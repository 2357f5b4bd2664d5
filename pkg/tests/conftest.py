from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from purerisk.datamodel import Outcome, SurvivalRecord, WeightedSample


def synthetic_records(n, p=2, seed=0, with_incidence=True, censor_scale=3.0):
    """Small survival dataset with both outcome pairs; times are continuous."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, p))
    beta = np.linspace(0.4, -0.3, p)
    t = rng.exponential(1.0 / np.exp(0.1 + z @ beta))
    c = rng.exponential(censor_scale, n)
    x = np.minimum(t, c)
    d = (t <= c).astype(int)
    gap = rng.uniform(0.1, 0.5, n)
    records = []
    for i in range(n):
        inc = Outcome(d[i], float(x[i])) if with_incidence else None
        mort = Outcome(d[i], float(x[i] + (gap[i] if d[i] else 0.0)))
        records.append(
            SurvivalRecord(
                id=f"r{i}",
                covariates=tuple(z[i]),
                incidence=inc,
                mortality=mort,
                group="g" + str(i % 3),
            )
        )
    return records


@pytest.fixture
def small_sample():
    recs = synthetic_records(40, p=2, seed=3)
    w = np.random.default_rng(7).uniform(0.5, 2.0, 40)
    return WeightedSample(recs, w)
