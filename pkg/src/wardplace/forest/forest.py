"""Honest instrumental-variable causal forest."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..domain import PatientCase, case_arrays
from . import _trees
from .nuisance import NuisanceEstimates, NuisanceModels, fit_nuisance


class NoValidNeighborhood(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 2000
    sample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_leaf: int = 5  # per instrument arm
    mtry: int | None = None  # default ceil(sqrt(p))
    ci_group_size: int = 2
    denom_floor: float = 1e-3
    max_depth: int = 64
    nuisance_folds: int = 5
    nuisance_trees: int = 100
    nuisance_min_leaf: int = 10
    seed: int = 0

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(p))
        return max(1, min(p, m))

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0 < self.honesty_fraction < 1:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if self.min_leaf < 1 or self.ci_group_size < 1:
            raise ValueError("min_leaf and ci_group_size must be positive")


@dataclass
class IvTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    leaf_est: np.ndarray
    members: np.ndarray  # estimation-half indices, grouped by leaf
    split_idx: np.ndarray  # J: used to place splits
    est_idx: np.ndarray  # I: used for leaf estimates

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def is_honest(self) -> bool:
        return np.intersect1d(self.split_idx, self.est_idx).size == 0

    def leaf_members(self, node: int) -> np.ndarray:
        s = self.leaf_start[node]
        return self.members[s:s + self.leaf_count[node]]

    def apply(self, x: np.ndarray) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node


@dataclass
class EffectEstimate:
    tau_hat: float
    sigma2_hat: float
    frequentist: object = None
    manski: object = None
    pearl: object = None
    flags: tuple[str, ...] = ()


def leaf_iv_estimate(y, w, z, denom_floor: float = 1e-3) -> float:
    """Within-leaf Wald ratio; ``nan`` marks an invalid leaf.

    A leaf is invalid when one instrument arm is empty or the treatment gap
    between arms is smaller than ``denom_floor`` in magnitude.
    """
    y, w, z = (np.asarray(a, dtype=float) for a in (y, w, z))
    a1 = z == 1
    a0 = ~a1
    if not a1.any() or not a0.any():
        return float("nan")
    gap = w[a1].mean() - w[a0].mean()
    if abs(gap) < denom_floor:
        return float("nan")
    return float((y[a1].mean() - y[a0].mean()) / gap)


def pseudo_outcome(y, z, m_hat, e_hat, tauW_hat, denom_floor: float = 1e-3, *,
                   scale_instrument_variance: bool = True):
    """Orthogonalised IV pseudo-outcome ``(Y - m)(Z - e) / tauW``.

    With ``scale_instrument_variance`` the denominator also carries
    ``e (1 - e)``, the conditional variance of the instrument; that makes the
    weighted mean a consistent estimate of the local IV effect. Entries whose
    denominator falls below ``denom_floor`` come back as ``nan``.
    """
    y, z, m_hat, e_hat, tauW_hat = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, z, m_hat, e_hat, tauW_hat)))
    denom = tauW_hat * (e_hat * (1 - e_hat) if scale_instrument_variance else 1.0)
    ok = (np.abs(tauW_hat) >= denom_floor) & (np.abs(denom) >= denom_floor)
    out = np.full(y.shape, np.nan)
    out[ok] = (y[ok] - m_hat[ok]) * (z[ok] - e_hat[ok]) / denom[ok]
    return out if out.ndim else float(out)


def grow_tree(X, y, w, z, sample_idx: np.ndarray, params: ForestParams, rng: np.random.Generator) -> IvTree:
    """Grow one honest tree on ``sample_idx``, split into J (splits) and I (leaves)."""
    sample_idx = np.asarray(sample_idx, dtype=np.int64)
    perm = rng.permutation(sample_idx)
    n_j = int(round(params.honesty_fraction * len(perm)))
    j_idx, i_idx = perm[:n_j], perm[n_j:]
    seed = int(rng.integers(0, 2**31 - 1))
    f, t, l, r, ls, lc, le, mem = _trees.grow_tree_kernel(
        X, y, w, z, j_idx, i_idx, params.resolved_mtry(X.shape[1]), params.min_leaf,
        params.denom_floor, params.max_depth, seed,
    )
    return IvTree(f, t, l, r, ls, lc, le, mem, np.sort(j_idx), np.sort(i_idx))


@dataclass
class IvForest:
    trees: list[IvTree]
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    z: np.ndarray
    nuisances: NuisanceEstimates
    params: ForestParams
    pseudo: np.ndarray = field(init=False)
    valid: np.ndarray = field(init=False)
    models: NuisanceModels | None = None
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        nu = self.nuisances
        self.pseudo = pseudo_outcome(self.y, self.z, nu.m_hat, nu.e_hat, nu.tauW_hat, self.params.denom_floor)
        self.valid = ~np.isnan(self.pseudo)
        self.pseudo = np.where(self.valid, self.pseudo, 0.0)
        self._pack()

    @property
    def n_excluded(self) -> int:
        return int((~self.valid).sum())

    def _pack(self) -> None:
        sizes = np.array([len(t.feature) for t in self.trees], dtype=np.int64)
        self._node_offset = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees]).astype(np.int32)
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([t.left for t in self.trees]).astype(np.int32)
        self._right = np.concatenate([t.right for t in self.trees]).astype(np.int32)
        self._leaf_start = np.concatenate([t.leaf_start for t in self.trees]).astype(np.int64)
        self._leaf_count = np.concatenate([t.leaf_count for t in self.trees]).astype(np.int64)
        self._node_tree = np.repeat(np.arange(len(self.trees)), sizes).astype(np.int64)
        msizes = np.array([len(t.members) for t in self.trees], dtype=np.int64)
        self._member_offset = np.concatenate([[0], np.cumsum(msizes)]).astype(np.int64)
        self._members = np.concatenate([t.members for t in self.trees]).astype(np.int64)

    def _leaves(self, Xq: np.ndarray) -> np.ndarray:
        Xq = np.ascontiguousarray(np.atleast_2d(np.asarray(Xq, dtype=float)))
        if Xq.shape[1] != self.X.shape[1]:
            raise ValueError(f"expected {self.X.shape[1]} covariates, got {Xq.shape[1]}")
        return _trees.find_leaves(Xq, self._feature, self._threshold, self._left, self._right, self._node_offset)

    def weights(self, x: np.ndarray) -> np.ndarray:
        """Forest weights of one query point over the training cases."""
        leaves = self._leaves(x)[0]
        return _trees.dense_weights(leaves, self._leaf_start, self._leaf_count, self._node_tree,
                                    self._member_offset, self._members, len(self.y))

    def weighted_means(self, Xq: np.ndarray, V: np.ndarray) -> np.ndarray:
        """``sum_i alpha(x, i) V[i]`` for each query row."""
        V = np.ascontiguousarray(np.asarray(V, dtype=float).reshape(len(self.y), -1))
        return _trees.weighted_sums(self._leaves(Xq), self._leaf_start, self._leaf_count, self._node_tree,
                                    self._member_offset, self._members, V)

    def predict(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Point estimates and variances for each query row."""
        leaves = self._leaves(Xq)
        num, den = _trees.per_tree_sums(leaves, self._leaf_start, self._leaf_count, self._node_tree,
                                        self._member_offset, self._members, self.pseudo, self.valid)
        dsum = den.sum(axis=1)
        if np.any(dsum <= 0):
            raise NoValidNeighborhood("no valid neighborhood: every weighted case was excluded")
        tau = num.sum(axis=1) / dsum
        return tau, self._little_bags_variance(num, den)

    def predict_oob(self) -> tuple[np.ndarray, np.ndarray]:
        """Out-of-bag estimates for the training cases.

        Each case is predicted only by trees that did not sample it. Cases
        sampled by every tree fall back to the full forest.
        """
        leaves = self._leaves(self.X)
        num, den = _trees.per_tree_sums(leaves, self._leaf_start, self._leaf_count, self._node_tree,
                                        self._member_offset, self._members, self.pseudo, self.valid)
        inbag = np.zeros(num.shape, dtype=bool)
        for b, t in enumerate(self.trees):
            inbag[t.split_idx, b] = True
            inbag[t.est_idx, b] = True
        num_o = np.where(inbag, 0.0, num)
        den_o = np.where(inbag, 0.0, den)
        dsum = den_o.sum(axis=1)
        full = dsum <= 0
        num_o[full] = num[full]
        den_o[full] = den[full]
        dsum = den_o.sum(axis=1)
        if np.any(dsum <= 0):
            raise NoValidNeighborhood("no valid neighborhood: every weighted case was excluded")
        return num_o.sum(axis=1) / dsum, self._little_bags_variance(num_o, den_o)

    def _little_bags_variance(self, num: np.ndarray, den: np.ndarray) -> np.ndarray:
        ell = self.params.ci_group_size
        B = num.shape[1]
        G = B // ell
        if ell < 2 or G < 2:
            return np.zeros(num.shape[0])
        with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # groups with no valid tree
            per_tree = np.where(den > 0, num / den, np.nan)[:, : G * ell].reshape(num.shape[0], G, ell)
            gmean = np.nanmean(per_tree, axis=2)
            overall = np.nanmean(gmean, axis=1, keepdims=True)
            between = np.nanmean((gmean - overall) ** 2, axis=1)
            within = np.nanmean(np.nansum((per_tree - gmean[:, :, None]) ** 2, axis=2) / (ell - 1), axis=1)
        var = between - within / ell
        return np.maximum(np.nan_to_num(var, nan=0.0), 0.0)

    def predict_ratio_average(self, Xq: np.ndarray) -> np.ndarray:
        """Plain average of per-tree leaf Wald ratios, skipping invalid leaves."""
        leaves = self._leaves(Xq)
        le = np.concatenate([t.leaf_est for t in self.trees])
        vals = le[leaves]
        with np.errstate(invalid="ignore"):
            return np.nanmean(vals, axis=1)

    def predict_iate(self, x) -> EffectEstimate:
        tau, var = self.predict(np.atleast_2d(x))
        return EffectEstimate(float(tau[0]), float(var[0]))

    def predict_cases(self, cases: Sequence[PatientCase]) -> list[EffectEstimate]:
        X = np.array([c.covariates for c in cases], dtype=float)
        tau, var = self.predict(X)
        return [EffectEstimate(float(t), float(v)) for t, v in zip(tau, var)]

    def nuisances_for(self, X: np.ndarray) -> NuisanceEstimates:
        if self.models is None:
            raise ValueError("forest was fitted without refit nuisance models")
        return self.models.predict(np.atleast_2d(X))


def fit_forest(X, y, w, z, params: ForestParams | None = None, *, nuisances: NuisanceEstimates | None = None,
               columns: Sequence[str] = (), groups=None) -> IvForest:
    """Fit nuisances (unless given) and grow ``params.n_trees`` honest trees."""
    params = params or ForestParams()
    params.validate()
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y, w, z = (np.ascontiguousarray(np.asarray(a, dtype=float)) for a in (y, w, z))
    n = len(y)
    models = None
    if nuisances is None:
        nuisances, models = fit_nuisance(
            X, y, w, z, params.nuisance_folds, seed=params.seed,
            n_trees=params.nuisance_trees, min_leaf=params.nuisance_min_leaf, groups=groups,
        )
    # subsampling draws whole clusters (hospital-days share one instrument
    # value), so the half-sample variance reflects the clustering
    if groups is None:
        codes = np.arange(n)
    else:
        _, codes = np.unique(np.asarray(groups, dtype=str), return_inverse=True)
    k = int(codes.max()) + 1
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(k + 1))

    def members(clusters):
        return np.sort(np.concatenate([order[bounds[c]:bounds[c + 1]] for c in clusters]))

    ell = max(1, params.ci_group_size)
    n_groups = math.ceil(params.n_trees / ell)
    master = np.random.SeedSequence(params.seed)
    trees: list[IvTree] = []
    half = max(1, k // 2) if ell > 1 else k
    size = min(max(1, int(params.sample_fraction * k)), half)
    for gseq in master.spawn(n_groups):
        grng = np.random.default_rng(gseq)
        pool = grng.choice(k, size=half, replace=False) if half < k else np.arange(k)
        for tseq in gseq.spawn(ell):
            if len(trees) == params.n_trees:
                break
            trng = np.random.default_rng(tseq)
            chosen = trng.choice(pool, size=size, replace=False) if size < len(pool) else pool
            trees.append(grow_tree(X, y, w, z, members(chosen), params, trng))
    return IvForest(trees, X, y, w, z, nuisances, params, models=models, columns=tuple(columns))


def fit_forest_cases(cases: Sequence[PatientCase], params: ForestParams | None = None,
                     columns: Sequence[str] = ()) -> IvForest:
    X, y, w, z = case_arrays(cases)
    groups = [f"{c.hospital_id}|{c.admit_day.isoformat()}" for c in cases]
    return fit_forest(X, y, w, z, params, columns=columns, groups=groups)


def forest_weights(forest: IvForest, x) -> np.ndarray:
    return forest.weights(np.asarray(x, dtype=float))


def predict_iate(forest: IvForest, x) -> EffectEstimate:
    return forest.predict_iate(x)


# ---------------------------------------------------------------------------
# averages
# ---------------------------------------------------------------------------

def iv_scores(tau_hat, y, w, z, nu: NuisanceEstimates, denom_floor: float = 1e-3) -> np.ndarray:
    """Doubly robust IV scores whose mean estimates the average effect."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    denom = nu.tauW_hat * nu.e_hat * (1 - nu.e_hat)
    ok = np.abs(denom) >= denom_floor
    corr = np.zeros_like(tau_hat)
    resid = y - nu.m_hat - (w - nu.p_hat) * tau_hat
    corr[ok] = (z[ok] - nu.e_hat[ok]) * resid[ok] / denom[ok]
    return tau_hat + corr


def ate(tau_hat, scores=None, clusters=None) -> tuple[float, float]:
    """Mean predicted effect and its standard error.

    The standard error comes from the per-case doubly robust ``scores`` when
    given, otherwise from the predictions themselves. ``clusters`` switches to a cluster-robust standard error
    (scores from one hospital-day share the instrument). One case gives a
    standard error of 0.
    """
    tau_hat = np.asarray(tau_hat, dtype=float)
    if tau_hat.size == 0:
        raise ValueError("no cases")
    s = tau_hat if scores is None else np.asarray(scores, dtype=float)
    est = float(tau_hat.mean())
    if s.size < 2:
        return est, 0.0
    if clusters is None:
        return est, float(np.std(s, ddof=1) / math.sqrt(s.size))
    _, codes = np.unique(np.asarray(clusters, dtype=str), return_inverse=True)
    k = int(codes.max()) + 1
    if k < 2:
        return est, 0.0
    sums = np.bincount(codes, weights=s - s.mean(), minlength=k)
    var = k / (k - 1) * np.sum(sums ** 2) / s.size ** 2
    return est, float(math.sqrt(var))


def ate_for_cases(forest: IvForest, cases: Sequence[PatientCase], nuisances: NuisanceEstimates | None = None,
                  *, training: bool = False) -> tuple[float, float]:
    """Doubly robust average effect over ``cases``, clustered by hospital-day.

    Set ``training`` when ``cases`` are the forest's own training cases in
    fitting order; predictions are then out-of-bag and the cross-fitted
    nuisances are reused.
    """
    X, y, w, z = case_arrays(cases)
    if training:
        tau, _ = forest.predict_oob()
        nu = forest.nuisances
    else:
        tau, _ = forest.predict(X)
        nu = nuisances if nuisances is not None else forest.nuisances_for(X)
    clusters = [f"{c.hospital_id}|{c.admit_day.isoformat()}" for c in cases]
    return ate(tau, iv_scores(tau, y, w, z, nu, forest.params.denom_floor), clusters)


def cate_by_group(tau_hat, groups: Sequence, scores=None, order: Sequence | None = None) -> list[dict]:
    """Per-group mean effect and standard error; empty groups get a note instead."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    scores = tau_hat if scores is None else np.asarray(scores, dtype=float)
    groups = np.asarray(groups, dtype=object)
    keys = list(order) if order is not None else sorted(set(groups.tolist()), key=str)
    rows = []
    for k in keys:
        sel = groups == k
        if not sel.any():
            rows.append({"group": k, "n": 0, "estimate": None, "se": None, "note": "empty group omitted"})
            continue
        est, se = ate(tau_hat[sel], scores[sel])
        rows.append({"group": k, "n": int(sel.sum()), "estimate": est, "se": se, "note": ""})
    return rows
