from __future__ import annotations

import itertools
import random
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wardplace.domain import (
    AssignmentConfig,
    CapacityLimits,
    CovariateSchema,
    DataError,
    Stay,
    build_cohorts,
    build_instrument,
    compute_busyness,
    baseline_busyness,
    default_schema,
    is_feasible,
    reassignment_budget,
    split_days,
)

from conftest import D0, caps_for, make_case, make_cohort


def _day_cases(counts, extra=()):
    """One hospital-year whose days carry the given emergency counts."""
    cases = []
    k = 0
    for d, n in enumerate(counts):
        for _ in range(n):
            cases.append(make_case(k, day=D0 + timedelta(days=d), emergency=1, z=None))
            k += 1
    for d, em in extra:
        cases.append(make_case(k, day=D0 + timedelta(days=d), emergency=em, z=None))
        k += 1
    return cases


class TestInstrument:
    def test_non_emergency_on_busy_and_quiet_days(self):
        # counts 3, 5, 2, 8 -> median 4
        cases = _day_cases([3, 5, 2, 8], extra=[(3, 0), (2, 0)])
        out = build_instrument(cases)
        assert out[-2].z == 1
        assert out[-1].z == 0

    def test_self_exclusion_with_strict_threshold(self):
        cases = _day_cases([3, 5, 2, 8])
        out = build_instrument(cases)
        on_five = [c for c in out if c.admit_day == D0 + timedelta(days=1)]
        assert len(on_five) == 5
        assert all(c.z == 0 for c in on_five)

    def test_identical_days_give_zero(self):
        out = build_instrument(_day_cases([4, 4, 4], extra=[(0, 0), (1, 0)]))
        assert all(c.z == 0 for c in out)

    def test_empty(self):
        assert build_instrument([]) == []

    def test_order_invariant(self):
        cases = _day_cases([1, 6, 2, 7, 3], extra=[(0, 0), (1, 0), (4, 0)])
        ref = {c.case_id: c.z for c in build_instrument(cases)}
        for seed in range(5):
            shuffled = list(cases)
            random.Random(seed).shuffle(shuffled)
            assert {c.case_id: c.z for c in build_instrument(shuffled)} == ref

    def test_hospital_years_are_separate(self):
        a = _day_cases([1, 1, 9])
        b = [make_case(100 + i, hospital="B", day=D0 + timedelta(days=i % 2), emergency=1, z=None) for i in range(4)]
        out = build_instrument(a + b)
        assert all(c.z == 0 for c in out if c.hospital_id == "B")


class TestBusyness:
    def test_same_day_admission_excluded(self):
        d = date(2020, 5, 10)
        stays = [
            Stay("A", "intmed", d - timedelta(days=3), d + timedelta(days=1)),
            Stay("A", "intmed", d - timedelta(days=1), d),
            Stay("A", "intmed", d, d + timedelta(days=2)),
        ]
        assert compute_busyness(stays, "A", "intmed", d) == 2

    def test_no_stays(self):
        assert compute_busyness([], "A", "intmed", D0) == 0

    def test_stay_ending_before_query(self):
        d = date(2020, 5, 10)
        prev = d - timedelta(days=1)
        assert compute_busyness([Stay("A", "surg", prev, prev)], "A", "surg", d) == 0

    def test_unknown_unit_warns(self):
        with pytest.warns(UserWarning):
            assert compute_busyness([], "A", "icu", D0) == 0

    def test_table_matches_pointwise(self, rng):
        stays = []
        for _ in range(60):
            a = D0 + timedelta(days=int(rng.integers(0, 20)))
            stays.append(Stay(str(rng.choice(["A", "B"])), str(rng.choice(["intmed", "surg"])), a,
                              a + timedelta(days=int(rng.integers(0, 6)))))
        table = baseline_busyness(stays)
        for h, u, k in itertools.product("AB", ("intmed", "surg"), range(28)):
            d = D0 + timedelta(days=k)
            assert table.get((h, u, d), 0) == compute_busyness(stays, h, u, d)


class TestSplit:
    days = [("A", D0 + timedelta(days=k)) for k in range(4)]

    def test_three_one(self):
        s = split_days(self.days, 0.75, 3)
        assert len(s.train_days) == 3 and len(s.test_days) == 1

    def test_deterministic(self):
        assert split_days(self.days, 0.75, 9) == split_days(self.days, 0.75, 9)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 1.5])
    def test_open_interval(self, fraction):
        with pytest.raises(ValueError):
            split_days(self.days, fraction, 0)

    def test_partition_keeps_days_whole(self):
        cases = [make_case(i, day=D0 + timedelta(days=i % 4)) for i in range(20)]
        train, test = split_days(self.days, 0.5, 1).partition(cases)
        assert {c.admit_day for c in train}.isdisjoint({c.admit_day for c in test})
        assert len(train) + len(test) == 20


class TestFeasibility:
    def test_capacity_violation(self):
        cohort = make_cohort([0, 0, 0])
        assert not is_feasible(AssignmentConfig((1, 1, 1)), cohort, caps_for(cohort, 2, 2))

    def test_observed_with_zero_budget(self):
        cohort = make_cohort([1, 0, 1])
        assert is_feasible(AssignmentConfig((1, 0, 1)), cohort, caps_for(cohort, 5, 5), rho=0.0)

    def test_budget_floor(self):
        cohort = make_cohort([0] * 10)
        caps = caps_for(cohort, 20, 20)
        one = AssignmentConfig((1,) + (0,) * 9)
        two = AssignmentConfig((1, 1) + (0,) * 8)
        assert is_feasible(one, cohort, caps, rho=0.10)
        assert not is_feasible(two, cohort, caps, rho=0.10)

    def test_budget_rounding(self):
        assert reassignment_budget(0.1, 10) == 1
        assert reassignment_budget(0.2, 7) == 1
        assert reassignment_budget(0.0, 30) == 0

    def test_baseline_counts_against_capacity(self):
        cohort = make_cohort([0, 0], busy=(4, 0))
        caps = caps_for(cohort, 5, 5)
        assert is_feasible(AssignmentConfig((1, 0)), cohort, caps)
        assert not is_feasible(AssignmentConfig((1, 1)), cohort, caps)

    @settings(max_examples=40, deadline=None)
    @given(
        obs=st.lists(st.integers(0, 1), min_size=1, max_size=8),
        im=st.integers(1, 9), s=st.integers(1, 9), bi=st.integers(0, 3), bs=st.integers(0, 3),
        rho=st.sampled_from([0.0, 0.1, 0.2, 0.5]),
    )
    def test_nested_feasible_sets(self, obs, im, s, bi, bs, rho):
        cohort = make_cohort(obs, busy=(bi, bs))
        caps = caps_for(cohort, im, s)
        P = len(obs)
        for mask in range(1 << P):
            cfg = AssignmentConfig.from_mask(mask, P)
            if is_feasible(cfg, cohort, caps, rho):
                assert is_feasible(cfg, cohort, caps)


class TestTypes:
    def test_mask_round_trip(self):
        for P in (1, 3, 6):
            for mask in range(1 << P):
                assert AssignmentConfig.from_mask(mask, P).to_mask() == mask

    def test_mask_bit_order(self):
        # first patient is the most significant bit
        assert AssignmentConfig.from_mask(4, 3).bits == (1, 0, 0)

    def test_non_binary_case_rejected(self):
        with pytest.raises(DataError):
            make_case(w=2)
        with pytest.raises(DataError):
            make_case(dx="X9")

    def test_schema_needs_busy_last(self):
        with pytest.raises(DataError):
            CovariateSchema(("busy_intmed", "busy_surg", "age"))
        assert default_schema().columns[-2:] == ("busy_intmed", "busy_surg")

    def test_capacity_validation(self):
        with pytest.raises(DataError):
            CapacityLimits({("A", 2020, "icu"): 3})
        with pytest.raises(DataError):
            CapacityLimits({("A", 2020, "surg"): 0})

    def test_capacity_from_occupancy_admits_observed(self, small_data):
        cases, stays, _ = small_data
        caps = CapacityLimits.from_occupancy(stays)
        for cohort in build_cohorts(cases, stays):
            obs = AssignmentConfig(tuple(int(b) for b in cohort.observed))
            assert is_feasible(obs, cohort, caps)

    def test_cohort_rejects_foreign_case(self):
        with pytest.raises(DataError):
            make_cohort([0]).__class__("A", D0, (make_case(hospital="B"),), 0, 0)

    def test_single_patient_cohort(self):
        cohort = make_cohort([1])
        caps = caps_for(cohort, 3, 3)
        feas = [m for m in range(2) if is_feasible(AssignmentConfig.from_mask(m, 1), cohort, caps)]
        assert feas == [0, 1]
        assert np.array_equal(cohort.observed, [1])
