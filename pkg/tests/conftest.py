from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from wardplace.domain import CapacityLimits, DayCohort, PatientCase, default_schema
from wardplace.forest import ForestParams, fit_forest_cases
from wardplace.synthdata import BaselineFn, DgpSpec, generate

D0 = date(2020, 3, 2)


def make_case(i=0, *, hospital="A", day=D0, w=0, y=1, z=0, emergency=0, dx="I2", cov=None):
    n = len(default_schema().columns)
    return PatientCase(
        case_id=f"c{i}", hospital_id=hospital, admit_day=day, year=day.year,
        covariates=tuple(cov) if cov is not None else (0.0,) * n,
        w=w, y=y, diagnosis_group=dx, is_emergency=emergency, z=z,
    )


def make_cohort(observed, busy=(0, 0), hospital="A", day=D0) -> DayCohort:
    cases = tuple(make_case(i, hospital=hospital, day=day, w=int(b)) for i, b in enumerate(observed))
    return DayCohort(hospital, day, cases, busy[0], busy[1])


def caps_for(cohort: DayCohort, im: int, s: int) -> CapacityLimits:
    return CapacityLimits({(cohort.hospital_id, cohort.year, "intmed"): im,
                           (cohort.hospital_id, cohort.year, "surg"): s})


@pytest.fixture(scope="session")
def small_data():
    spec = DgpSpec(n_days=30, baseline_fn=BaselineFn(0.6), seed=11)
    return generate(spec)


@pytest.fixture(scope="session")
def small_forest(small_data):
    cases, _, _ = small_data
    params = ForestParams(n_trees=80, min_leaf=15, nuisance_trees=30, seed=5)
    return fit_forest_cases(cases, params, columns=default_schema().columns)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
