from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from wardplace.domain import case_arrays, default_schema
from wardplace.forest import (
    ForestParams,
    IvForest,
    NoValidNeighborhood,
    NuisanceEstimates,
    ate,
    ate_for_cases,
    cate_by_group,
    compliance_histogram,
    fit_forest,
    fit_forest_cases,
    fit_nuisance,
    first_stage_diagnostics,
    forest_weights,
    grow_tree,
    leaf_iv_estimate,
    load_forest,
    overlap_report,
    predict_iate,
    pseudo_outcome,
    save_forest,
)
from wardplace.synthdata import BaselineFn, DgpSpec, EffectFn, generate


def _const_nuisance(n, m=0.5, e=0.5, p=0.5, t=1.0):
    return NuisanceEstimates(np.full(n, m), np.full(n, e), np.full(n, p), np.full(n, t))


def _groups(cases):
    return [f"{c.hospital_id}|{c.admit_day.isoformat()}" for c in cases]


# ---------------------------------------------------------------------------
# nuisances
# ---------------------------------------------------------------------------

def test_constant_outcome_gives_constant_m(rng):
    X = rng.normal(size=(400, 4))
    z = rng.integers(0, 2, 400).astype(float)
    w = z.copy()
    nu, _ = fit_nuisance(X, np.ones(400), w, z, 5, seed=1, n_trees=20, refit=False)
    assert np.allclose(nu.m_hat, 1.0, atol=1e-9)


def test_coin_instrument_propensity_near_half():
    rng = np.random.default_rng(3)
    n = 5000
    X = rng.normal(size=(n, 5))
    z = (rng.random(n) < 0.5).astype(float)
    w = z.copy()
    y = (rng.random(n) < 0.5).astype(float)
    nu, _ = fit_nuisance(X, y, w, z, 5, seed=0, n_trees=50, min_leaf=50, refit=False)
    assert np.mean(np.abs(nu.e_hat - 0.5)) <= 0.05


def test_perfect_compliance_score_near_one():
    spec = DgpSpec(n_days=125, compliance_mix={"complier": 1.0}, seed=12)
    cases, _, _ = generate(spec)
    X, y, w, z = case_arrays(cases)
    assert len(y) >= 5000
    nu, _ = fit_nuisance(X, y, w, z, 5, seed=0, n_trees=30, groups=_groups(cases), refit=False)
    assert nu.tauW_hat.mean() >= 0.9


def test_single_arm_fold_rejected(rng):
    X = rng.normal(size=(50, 3))
    z = np.zeros(50)
    with pytest.raises(ValueError, match="single instrument arm"):
        fit_nuisance(X, np.ones(50), z, z, 5, refit=False)


def test_grouped_folds_keep_days_together(rng):
    from wardplace.forest.nuisance import _fold_splits

    groups = np.repeat(np.arange(30), 4)
    for tr, te in _fold_splits(len(groups), 5, 0, groups):
        assert set(groups[tr]).isdisjoint(groups[te])


# ---------------------------------------------------------------------------
# leaf estimates and pseudo-outcomes
# ---------------------------------------------------------------------------

def test_leaf_ratio():
    z = np.r_[np.ones(10), np.zeros(10)]
    y = np.r_[np.ones(8), np.zeros(2), np.ones(6), np.zeros(4)]
    w = np.r_[np.ones(7), np.zeros(3), np.ones(2), np.zeros(8)]
    assert leaf_iv_estimate(y, w, z) == pytest.approx(0.4)


def test_leaf_ratio_zero_numerator():
    z = np.r_[np.ones(4), np.zeros(4)]
    y = np.array([1, 0, 1, 0, 1, 0, 1, 0.0])
    w = z.copy()
    assert leaf_iv_estimate(y, w, z) == 0.0


def test_leaf_ratio_invalid():
    z = np.r_[np.ones(4), np.zeros(4)]
    w = np.array([1, 0, 1, 0, 1, 0, 1, 0.0])
    assert math.isnan(leaf_iv_estimate(np.ones(8), w, z))
    assert math.isnan(leaf_iv_estimate(np.ones(3), np.ones(3), np.ones(3)))


def test_pseudo_outcome_arithmetic():
    assert pseudo_outcome(1, 1, 0.5, 0.5, 0.5, scale_instrument_variance=False) == pytest.approx(0.5)
    # the default divides by e (1 - e) as well
    assert pseudo_outcome(1, 1, 0.5, 0.5, 0.5) == pytest.approx(2.0)
    assert pseudo_outcome(0.3, 1, 0.3, 0.4, 0.7) == 0.0


def test_pseudo_outcome_floor():
    assert math.isnan(pseudo_outcome(1, 1, 0.5, 0.5, 1e-9, denom_floor=1e-3))


def test_excluded_cases_counted(rng):
    n = 200
    X = rng.normal(size=(n, 3))
    z = rng.integers(0, 2, n).astype(float)
    nu = _const_nuisance(n)
    nu.tauW_hat[:7] = 1e-9
    f = fit_forest(X, z, z, z, ForestParams(n_trees=4, min_leaf=5), nuisances=nu)
    assert f.n_excluded == 7


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

def _brute_root(X, y, w, z, J, I, min_leaf, floor=1e-3):
    """Best root split by exhaustive search over features and midpoints of J."""
    def ratio(idx):
        return leaf_iv_estimate(y[idx], w[idx], z[idx], floor)

    parent = ratio(J)
    best = (-1.0, -1, 0.0)
    for f in range(X.shape[1]):
        vals = np.unique(X[J, f])
        for a, b in zip(vals[:-1], vals[1:]):
            t = 0.5 * (a + b)
            ok = True
            for part in (J, I):
                left = part[X[part, f] <= t]
                right = part[X[part, f] > t]
                for side in (left, right):
                    if min((z[side] == 1).sum(), (z[side] == 0).sum()) < min_leaf:
                        ok = False
            if not ok:
                continue
            L, R = J[X[J, f] <= t], J[X[J, f] > t]
            tl, tr = ratio(L), ratio(R)
            if math.isnan(tl) or math.isnan(tr):
                continue
            ref = parent if not math.isnan(parent) else (len(L) * tl + len(R) * tr) / len(J)
            crit = len(L) * (tl - ref) ** 2 + len(R) * (tr - ref) ** 2
            if crit > best[0] + 1e-12:
                best = (crit, f, t)
    return best


def test_root_split_on_separating_covariate(rng):
    n = 400
    g = np.arange(n) % 2
    X = np.column_stack([g, rng.normal(size=n), rng.integers(0, 5, n)]).astype(float)
    z = (np.arange(n) // 2) % 2
    w = z.astype(float)
    # effect 0.5 when g = 1, none when g = 0; outcomes deterministic
    y = (w * g * ((np.arange(n) // 4) % 2)).astype(float)
    params = ForestParams(n_trees=1, min_leaf=5, mtry=3)
    tree = grow_tree(X, y, w, z.astype(float), np.arange(n), params, np.random.default_rng(0))
    crit, f, t = _brute_root(X, y, w, z.astype(float), tree.split_idx, tree.est_idx, 5)
    assert (tree.feature[0], tree.threshold[0]) == (0, 0.5)
    assert (f, t) == (0, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_root_split_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    n = 160
    X = np.column_stack([rng.integers(0, 4, n), rng.normal(size=n), rng.integers(0, 2, n)]).astype(float)
    z = rng.integers(0, 2, n).astype(float)
    w = np.where(rng.random(n) < 0.7, z, 1 - z)
    y = (rng.random(n) < 0.3 + 0.4 * w * (X[:, 0] > 1)).astype(float)
    params = ForestParams(n_trees=1, min_leaf=4, mtry=3)
    tree = grow_tree(X, y, w, z, np.arange(n), params, np.random.default_rng(seed))
    crit, f, t = _brute_root(X, y, w, z, tree.split_idx, tree.est_idx, 4)
    if f < 0:
        assert tree.feature[0] == -1
    else:
        assert tree.feature[0] == f
        assert tree.threshold[0] == pytest.approx(t)


def test_constant_covariates_single_leaf(rng):
    n = 100
    X = np.ones((n, 3))
    z = rng.integers(0, 2, n).astype(float)
    tree = grow_tree(X, z, z, z, np.arange(n), ForestParams(min_leaf=2), rng)
    assert tree.n_leaves == 1


def test_large_min_leaf_single_leaf(rng):
    n = 60
    X = rng.normal(size=(n, 3))
    z = rng.integers(0, 2, n).astype(float)
    tree = grow_tree(X, z, z, z, np.arange(n), ForestParams(min_leaf=n), rng)
    assert tree.n_leaves == 1


def test_leaves_respect_min_leaf_per_arm(small_forest):
    z = small_forest.z
    k = small_forest.params.min_leaf
    for t in small_forest.trees[:20]:
        for node in np.flatnonzero(t.feature < 0):
            m = t.leaf_members(node)
            if t.n_leaves > 1:
                assert (z[m] == 1).sum() >= k and (z[m] == 0).sum() >= k


def test_honesty(small_forest):
    for t in small_forest.trees:
        assert t.is_honest()
        assert set(t.members.tolist()) == set(t.est_idx.tolist())


# ---------------------------------------------------------------------------
# weights and predictions
# ---------------------------------------------------------------------------

def test_single_tree_weights_uniform_in_leaf(rng):
    n = 120
    X = rng.normal(size=(n, 2))
    z = rng.integers(0, 2, n).astype(float)
    f = fit_forest(X, z, z, z, ForestParams(n_trees=1, min_leaf=1, ci_group_size=1, sample_fraction=1.0),
                   nuisances=_const_nuisance(n))
    tree = f.trees[0]
    for x in X[:10]:
        wts = forest_weights(f, x)
        members = tree.leaf_members(tree.apply(x))
        assert np.allclose(wts[members], 1 / len(members))
        assert wts.sum() == pytest.approx(1.0)
    pairs = [node for node in np.flatnonzero(tree.feature < 0) if tree.leaf_count[node] == 2]
    if pairs:
        i, j = tree.leaf_members(pairs[0])
        x = X[i]
        wts = forest_weights(f, x)
        assert wts[i] == wts[j] == 0.5


def test_weights_sum_to_one(small_forest, small_data):
    cases, _, _ = small_data
    X = case_arrays(cases)[0]
    for x in X[:: max(1, len(X) // 25)]:
        assert forest_weights(small_forest, x).sum() == pytest.approx(1.0, abs=1e-9)


def test_one_leaf_forest_equals_wald_ratio():
    # eight cases, hand computation: Y gap 0.5 - 0.25, W gap 0.75 - 0.25, ratio 0.5
    z = np.array([1, 1, 1, 1, 0, 0, 0, 0.0])
    w = np.array([1, 1, 1, 0, 1, 0, 0, 0.0])
    y = np.array([1, 0, 0, 1, 1, 0, 0, 0.0])
    X = np.zeros((8, 2))
    assert leaf_iv_estimate(y, w, z) == pytest.approx(0.5)
    nu = NuisanceEstimates(np.full(8, y.mean()), np.full(8, z.mean()), np.full(8, w.mean()),
                           np.full(8, w[z == 1].mean() - w[z == 0].mean()))
    params = ForestParams(n_trees=1, min_leaf=1, ci_group_size=1, sample_fraction=1.0, honesty_fraction=0.01)
    f = fit_forest(X, y, w, z, params, nuisances=nu)
    assert f.trees[0].n_leaves == 1
    assert sorted(f.trees[0].est_idx.tolist()) == list(range(8))
    assert predict_iate(f, X[0]).tau_hat == pytest.approx(0.5, abs=1e-12)


def test_scaling_a_covariate_keeps_predictions(small_data):
    cases, _, _ = small_data
    X, y, w, z = case_arrays(cases)
    groups = _groups(cases)
    nu, _ = fit_nuisance(X, y, w, z, 5, seed=0, n_trees=20, groups=groups, refit=False)
    params = ForestParams(n_trees=30, min_leaf=15, seed=2)
    a = fit_forest(X, y, w, z, params, nuisances=nu, groups=groups)
    k = default_schema().index("age")
    X2 = X.copy()
    X2[:, k] *= 4.0
    b = fit_forest(X2, y, w, z, params, nuisances=nu, groups=groups)
    Xq = X[:50]
    Xq2 = Xq.copy()
    Xq2[:, k] *= 4.0
    assert np.array_equal(a.predict(Xq)[0], b.predict(Xq2)[0])


def test_variance_nonnegative(small_forest, small_data):
    X = case_arrays(small_data[0])[0]
    _, var = small_forest.predict(X)
    assert np.all(var >= 0)
    _, var_oob = small_forest.predict_oob()
    assert np.all(var_oob >= 0)


def test_same_seed_same_forest(small_data):
    cases, _, _ = small_data
    params = ForestParams(n_trees=20, min_leaf=15, nuisance_trees=10, seed=7)
    X = case_arrays(cases)[0][:40]
    a = fit_forest_cases(cases, params).predict(X)
    b = fit_forest_cases(cases, params).predict(X)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_no_valid_neighborhood(rng):
    n = 80
    X = rng.normal(size=(n, 2))
    z = rng.integers(0, 2, n).astype(float)
    nu = _const_nuisance(n, t=0.0)  # every case excluded
    f = fit_forest(X, z, z, z, ForestParams(n_trees=3, min_leaf=3), nuisances=nu)
    with pytest.raises(NoValidNeighborhood, match="no valid neighborhood"):
        f.predict(X[:2])


def test_null_effect_predictions_near_zero():
    spec = DgpSpec(n_days=125, effect_fn=EffectFn("constant", 0.0), baseline_fn=BaselineFn(0.6),
                   compliance_mix={"complier": 1.0}, seed=31)
    cases, _, _ = generate(spec)
    assert len(cases) >= 5000
    f = fit_forest_cases(cases, ForestParams(n_trees=500, min_leaf=30, mtry=30, nuisance_trees=30, seed=1))
    q, _, _ = generate(DgpSpec(**{**spec.__dict__, "n_days": 2, "seed": 99}))
    tau, _ = f.predict(case_arrays(q)[0][:20])
    assert abs(tau.mean()) <= 0.05


# ---------------------------------------------------------------------------
# averages
# ---------------------------------------------------------------------------

def test_single_case_ate():
    assert ate([0.3]) == (0.3, 0.0)


def test_cluster_se_matches_direct_formula(rng):
    s = rng.normal(size=12)
    cl = np.repeat(np.arange(4), 3)
    est, se = ate(s, s, cl)
    sums = np.array([np.sum(s[cl == k] - s.mean()) for k in range(4)])
    assert est == pytest.approx(s.mean())
    assert se == pytest.approx(math.sqrt(4 / 3 * np.sum(sums ** 2) / 144))


def test_empty_group_gets_note():
    rows = cate_by_group([0.1, 0.2, 0.3], ["a", "a", "b"], order=["a", "b", "c"])
    assert [r["n"] for r in rows] == [2, 1, 0]
    assert rows[2]["estimate"] is None and rows[2]["note"]


@pytest.fixture(scope="module")
def linear_fit():
    spec = DgpSpec(n_days=100, patients_per_day=(6, 14), effect_fn=EffectFn("linear", 0.0, {"proc_1": 0.2}),
                   baseline_fn=BaselineFn(0.6), compliance_mix={"complier": 1.0}, seed=0)
    cases, _, truth = generate(spec)
    f = fit_forest_cases(cases, ForestParams(n_trees=200, min_leaf=30, mtry=30, nuisance_trees=30, seed=0))
    return spec, cases, truth, f


def test_cate_by_group_orders_linear_effect(linear_fit):
    spec, cases, _, f = linear_fit
    tau, _ = f.predict_oob()
    x1 = [int(c.covariates[spec.schema.index("proc_1")]) for c in cases]
    rows = {r["group"]: r for r in cate_by_group(tau, x1)}
    assert rows[1]["estimate"] > rows[0]["estimate"]


def test_training_ate_near_truth(linear_fit):
    _, cases, truth, f = linear_fit
    est, se = ate_for_cases(f, cases, training=True)
    assert se > 0
    assert abs(est - truth.true_tau.mean()) <= 3 * se


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def test_perfect_first_stage():
    z = np.array([0, 1, 0, 1, 1, 0.0])
    fs = first_stage_diagnostics(z, z)
    assert fs.r_squared == pytest.approx(1.0)
    assert math.isinf(fs.f_statistic)


def test_weak_instrument_f_small():
    small = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        fs = first_stage_diagnostics(r.integers(0, 2, 5000), r.integers(0, 2, 5000))
        small += fs.f_statistic < 4
    assert small >= 45


def test_constant_instrument_rejected():
    with pytest.raises(ValueError):
        first_stage_diagnostics([0, 1, 1], [1, 1, 1])


def test_first_stage_f_formula(rng):
    z = rng.integers(0, 2, 300).astype(float)
    w = np.where(rng.random(300) < 0.6, z, rng.integers(0, 2, 300))
    fs = first_stage_diagnostics(w, z)
    # t-statistic of the slope in w ~ 1 + z
    X = np.column_stack([np.ones(300), z])
    beta, res, *_ = np.linalg.lstsq(X, w, rcond=None)
    s2 = res[0] / (300 - 2)
    se = math.sqrt(s2 * np.linalg.inv(X.T @ X)[1, 1])
    assert fs.f_statistic == pytest.approx((beta[1] / se) ** 2)


def test_overlap_constant_half():
    rep = overlap_report(np.full(50, 0.5), np.r_[np.ones(25), np.zeros(25)])
    assert rep.overlap_share == 1.0
    assert len(rep.rows()) == 1


def test_overlap_extremes():
    rep = overlap_report(np.r_[np.zeros(10), np.ones(10)], np.r_[np.zeros(10), np.ones(10)])
    assert rep.overlap_share == 0.0


def test_overlap_randomized(rng):
    n = 3000
    X = rng.normal(size=(n, 4))
    z = rng.integers(0, 2, n).astype(float)
    w = (rng.random(n) < 0.5).astype(float)
    nu, _ = fit_nuisance(X, w, w, z, 5, seed=0, n_trees=30, min_leaf=30, refit=False)
    assert overlap_report(nu.p_hat, w).overlap_share >= 0.95


def test_compliance_histogram_counts(rng):
    t = rng.uniform(-1, 1, 100)
    z = rng.integers(0, 2, 100)
    rep = compliance_histogram(t, z)
    assert rep.counts["z1"].sum() + rep.counts["z0"].sum() == 100


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, small_forest, small_data):
    X = case_arrays(small_data[0])[0][:30]
    save_forest(small_forest, tmp_path / "f.npz")
    back = load_forest(tmp_path / "f.npz", expected_columns=default_schema().columns)
    assert isinstance(back, IvForest)
    for a, b in zip(small_forest.predict(X), back.predict(X)):
        assert np.array_equal(a, b)
    save_forest(back, tmp_path / "g.npz")
    assert (tmp_path / "f.npz").read_bytes() == (tmp_path / "g.npz").read_bytes()


def test_load_rejects_other_schema(tmp_path, small_forest):
    save_forest(small_forest, tmp_path / "f.npz")
    with pytest.raises(ValueError, match="schema"):
        load_forest(tmp_path / "f.npz", expected_columns=("a", "busy_intmed", "busy_surg"))
