from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from wardplace.domain import CapacityLimits, build_instrument, occupancy_table
from wardplace.synthdata import (
    BaselineFn,
    DataValidationError,
    DgpSpec,
    EffectFn,
    generate,
    ingest_csv,
    needs_instrument,
    read_capacities_csv,
    write_capacities_csv,
    write_cases_csv,
    write_occupancy_csv,
    write_truth_csv,
)


def _arrays(cases):
    return (np.array([c.w for c in cases]), np.array([c.y for c in cases]), np.array([c.z for c in cases]))


def test_null_effect_gap_is_confounding_only():
    spec = DgpSpec(n_days=120, effect_fn=EffectFn("constant", 0.0), baseline_fn=BaselineFn(0.6), seed=2)
    cases, _, truth = generate(spec)
    assert np.all(truth.true_tau == 0)
    w, y, _ = _arrays(cases)
    naive = y[w == 1].mean() - y[w == 0].mean()
    gap = truth.mu0[w == 1].mean() - truth.mu0[w == 0].mean()
    se = math.sqrt(y[w == 1].var() / (w == 1).sum() + y[w == 0].var() / (w == 0).sum())
    assert abs(naive - gap) <= 3 * se


def test_perfect_compliance_gives_w_equal_z():
    cases, _, truth = generate(DgpSpec(n_days=20, compliance_mix={"complier": 1.0}, seed=4))
    w, _, z = _arrays(cases)
    assert np.array_equal(w, z)
    assert set(truth.compliance_type) == {"complier"}


def test_linear_effect_subgroup_means():
    spec = DgpSpec(n_days=30, effect_fn=EffectFn("linear", 0.0, {"proc_1": 0.2}), baseline_fn=BaselineFn(0.6), seed=1)
    cases, _, truth = generate(spec)
    x1 = np.array([c.covariates[spec.schema.index("proc_1")] for c in cases])
    assert truth.true_tau[x1 == 0].mean() == pytest.approx(0.0, abs=1e-12)
    assert truth.true_tau[x1 == 1].mean() == pytest.approx(0.2, abs=1e-12)


def test_no_confounding_naive_difference_recovers_effect():
    spec = DgpSpec(n_days=200, effect_fn=EffectFn("constant", 0.1), baseline_fn=BaselineFn(0.6),
                   compliance_mix={"complier": 1.0}, confounding_strength=0.0, seed=8)
    cases, _, truth = generate(spec)
    assert len(cases) >= 5000
    w, y, _ = _arrays(cases)
    naive = y[w == 1].mean() - y[w == 0].mean()
    se = math.sqrt(y[w == 1].var() / (w == 1).sum() + y[w == 0].var() / (w == 0).sum())
    assert abs(naive - truth.true_tau.mean()) <= 3 * se


def test_probabilities_are_clipped():
    spec = DgpSpec(n_days=10, effect_fn=EffectFn("constant", 0.5), baseline_fn=BaselineFn(0.9), seed=0)
    _, _, truth = generate(spec)
    for a in (truth.mu0, truth.mu1):
        assert a.min() >= 0 and a.max() <= 1
    assert np.all(np.abs(truth.true_tau) <= 1)


@pytest.mark.parametrize("mix", [{"complier": 0.7, "never_taker": 0.2}, {"complier": 1.2, "defier": -0.2}, {"mystery": 1.0}])
def test_invalid_mix(mix):
    with pytest.raises(ValueError):
        generate(DgpSpec(n_days=2, compliance_mix=mix))


def test_occupancy_within_capacity():
    spec = DgpSpec(n_days=40, capacity_per_unit=20, background_load=0.8, seed=3)
    _, stays, truth = generate(spec)
    checked = 0
    for (h, unit, d), n in occupancy_table(stays).items():
        if d < spec.start_date:
            continue  # background stays admitted before the window
        assert n <= truth.capacities.get(h, d.year, unit)
        checked += 1
    assert checked > 0


def test_busyness_covariates_are_pre_placement():
    spec = DgpSpec(n_days=15, seed=6)
    cases, stays, _ = generate(spec)
    from wardplace.domain import baseline_busyness

    base = baseline_busyness(stays)
    for c in cases[::17]:
        assert c.covariates[-2] == base.get((c.hospital_id, "intmed", c.admit_day), 0)
        assert c.covariates[-1] == base.get((c.hospital_id, "surg", c.admit_day), 0)


def test_busyness_effect_falls_with_intmed_load():
    spec = DgpSpec(n_days=10, effect_fn=EffectFn("busyness", 0.1, gamma=0.2), baseline_fn=BaselineFn(0.6), seed=2)
    _, _, truth = generate(spec)
    quiet = truth.true_tau_at_busyness(0, 30)
    busy = truth.true_tau_at_busyness(30, 0)
    assert np.all(busy <= quiet)
    assert truth.tau_at(0, 30, 0) == pytest.approx(busy[0])


def test_instrument_matches_rebuild(small_data):
    cases, _, _ = small_data
    rebuilt = build_instrument(cases)
    assert [c.z for c in rebuilt] == [c.z for c in cases]


def _write_all(d, spec):
    cases, stays, truth = generate(spec)
    write_cases_csv(d / "cases.csv", cases, spec.schema)
    write_occupancy_csv(d / "occ.csv", stays)
    write_truth_csv(d / "truth.csv", truth)
    write_capacities_csv(d / "caps.csv", truth.capacities)
    return cases, stays, truth


def test_same_seed_same_bytes(tmp_path):
    spec = DgpSpec(n_days=8, seed=21)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _write_all(tmp_path / "a", spec)
    _write_all(tmp_path / "b", spec)
    for name in ("cases.csv", "occ.csv", "truth.csv", "caps.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_csv_round_trip(tmp_path):
    spec = DgpSpec(n_days=6, seed=5)
    cases, stays, truth = _write_all(tmp_path, spec)
    back, back_stays = ingest_csv(tmp_path / "cases.csv", tmp_path / "occ.csv", spec.schema)
    assert back == cases
    assert back_stays == stays
    assert read_capacities_csv(tmp_path / "caps.csv") == truth.capacities


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _rewrite(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


@pytest.fixture
def ten_rows(tmp_path):
    spec = DgpSpec(n_days=4, seed=9)
    cases, _, _ = generate(spec)
    path = tmp_path / "cases.csv"
    write_cases_csv(path, cases[:10], spec.schema)
    return path


def test_ingest_ten_rows(ten_rows):
    cases, stays = ingest_csv(ten_rows)
    assert len(cases) == 10 and stays == []


def test_ingest_bad_outcome_names_line(ten_rows):
    rows = _rows(ten_rows)
    rows[6][rows[0].index("y")] = "2"  # seventh line of the file
    _rewrite(ten_rows, rows)
    with pytest.raises(DataValidationError) as info:
        ingest_csv(ten_rows)
    assert "line 7" in str(info.value)
    assert info.value.errors == ["line 7: y must be 0 or 1, got '2'"]


def test_ingest_collects_every_error(ten_rows):
    rows = _rows(ten_rows)
    rows[2][rows[0].index("w")] = "x"
    rows[4][rows[0].index("diagnosis_group")] = "Z9"
    _rewrite(ten_rows, rows)
    with pytest.raises(DataValidationError) as info:
        ingest_csv(ten_rows)
    assert len(info.value.errors) == 2


def test_ingest_missing_column(ten_rows):
    rows = [r[:1] + r[2:] for r in _rows(ten_rows)]
    _rewrite(ten_rows, rows)
    with pytest.raises(DataValidationError, match="hospital_id"):
        ingest_csv(ten_rows)


def test_ingest_without_instrument(ten_rows):
    rows = _rows(ten_rows)
    k = rows[0].index("z")
    _rewrite(ten_rows, [r[:k] + r[k + 1:] for r in rows])
    cases, _ = ingest_csv(ten_rows)
    assert all(c.z is None for c in cases)
    assert needs_instrument(cases)
    assert not needs_instrument(build_instrument(cases))


def test_explicit_capacities_used():
    caps = CapacityLimits({(h, 2019, u): 45 for h in "AB" for u in ("intmed", "surg")})
    spec = DgpSpec(n_days=5, hospitals=("A", "B"), capacities=caps, seed=1)
    _, stays, truth = generate(spec)
    assert truth.capacities == caps
    assert max(occupancy_table(stays).values()) <= 45
