"""Cross-fitted nuisance regressions for the IV forest."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.model_selection import KFold


@dataclass
class NuisanceEstimates:
    """Per-case nuisance predictions.

    m_hat: E[Y|X], e_hat: E[Z|X], p_hat: E[W|X] and the compliance score
    tauW_hat = E[W|Z=1,X] - E[W|Z=0,X].
    """

    m_hat: np.ndarray
    e_hat: np.ndarray
    p_hat: np.ndarray
    tauW_hat: np.ndarray

    def __post_init__(self):
        for name in ("m_hat", "e_hat", "p_hat"):
            arr = np.clip(np.asarray(getattr(self, name), dtype=float), 0.0, 1.0)
            setattr(self, name, arr)
        self.tauW_hat = np.clip(np.asarray(self.tauW_hat, dtype=float), -1.0, 1.0)

    def __len__(self) -> int:
        return len(self.m_hat)

    def subset(self, idx) -> "NuisanceEstimates":
        return NuisanceEstimates(self.m_hat[idx], self.e_hat[idx], self.p_hat[idx], self.tauW_hat[idx])


@dataclass
class NuisanceModels:
    """Learners refit on all training data, for predicting new cases."""

    m: object
    e: object
    p: object
    w1: object
    w0: object

    def predict(self, X: np.ndarray) -> NuisanceEstimates:
        return NuisanceEstimates(
            m_hat=_predict(self.m, X),
            e_hat=_predict(self.e, X),
            p_hat=_predict(self.p, X),
            tauW_hat=_predict(self.w1, X) - _predict(self.w0, X),
        )


class _Constant:
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, X):
        return np.full(len(X), self.value)


def _predict(model, X):
    return np.asarray(model.predict(X), dtype=float)


def _learner(n_trees: int, min_leaf: int, seed: int, y: np.ndarray, X: np.ndarray):
    if np.ptp(y) == 0:
        return _Constant(y[0])
    rf = RandomForestRegressor(
        n_estimators=n_trees, min_samples_leaf=min_leaf, max_features=0.33, random_state=seed, n_jobs=None,
    )
    return rf.fit(X, y)


def _seed(seed: int, slot: int) -> int:
    # learner seeds must fit in 32 bits; +1..+5 offsets are added per learner
    return int(np.random.SeedSequence([seed, slot]).generate_state(1)[0]) >> 4


def _fold_splits(n: int, folds: int, seed: int, groups=None):
    """Shuffled K-fold index splits; with ``groups`` every group stays in one fold."""
    if groups is None:
        yield from KFold(n_splits=folds, shuffle=True, random_state=seed).split(np.zeros(n))
        return
    _, codes = np.unique(np.asarray(groups, dtype=str), return_inverse=True)
    n_groups = codes.max() + 1
    if n_groups < folds:
        raise ValueError(f"{n_groups} groups cannot be split into {folds} folds")
    fold_of_group = np.empty(n_groups, dtype=int)
    fold_of_group[np.random.default_rng(seed).permutation(n_groups)] = np.arange(n_groups) % folds
    fold = fold_of_group[codes]
    for f in range(folds):
        yield np.flatnonzero(fold != f), np.flatnonzero(fold == f)


def fit_nuisance(X, y, w, z, folds: int = 5, *, seed: int = 0, n_trees: int = 100, min_leaf: int = 10,
                 groups=None, refit: bool = True) -> tuple[NuisanceEstimates, NuisanceModels | None]:
    """Out-of-fold nuisance predictions using regression forests.

    Each case is predicted by models that never saw its fold. Pass the
    hospital-day of each case as ``groups``: the instrument is constant
    within a day, so splitting a day across folds lets the instrument model
    memorise it. The compliance score is the difference of two arm-specific
    regressions of ``w``.
    """
    if folds < 2:
        raise ValueError("need at least 2 cross-fitting folds")
    X = np.asarray(X, dtype=float)
    n = len(y)
    if n < folds:
        raise ValueError(f"{n} cases cannot be split into {folds} folds")
    out = {k: np.zeros(n) for k in ("m", "e", "p", "w1", "w0")}
    for f, (tr, te) in enumerate(_fold_splits(n, folds, seed, groups)):
        zt = z[tr]
        if zt.min() == zt.max():
            raise ValueError(
                f"fold {f} has a single instrument arm in its training part; more data is needed"
            )
        s = _seed(seed, f)
        out["m"][te] = _predict(_learner(n_trees, min_leaf, s + 1, y[tr], X[tr]), X[te])
        out["e"][te] = _predict(_learner(n_trees, min_leaf, s + 2, z[tr], X[tr]), X[te])
        out["p"][te] = _predict(_learner(n_trees, min_leaf, s + 3, w[tr], X[tr]), X[te])
        a1 = tr[zt == 1]
        a0 = tr[zt == 0]
        out["w1"][te] = _predict(_learner(n_trees, min_leaf, s + 4, w[a1], X[a1]), X[te])
        out["w0"][te] = _predict(_learner(n_trees, min_leaf, s + 5, w[a0], X[a0]), X[te])
    est = NuisanceEstimates(out["m"], out["e"], out["p"], out["w1"] - out["w0"])
    models = fit_models(X, y, w, z, seed=seed, n_trees=n_trees, min_leaf=min_leaf) if refit else None
    return est, models


def fit_models(X, y, w, z, *, seed: int = 0, n_trees: int = 100, min_leaf: int = 10) -> NuisanceModels:
    """Nuisance learners fitted on all cases, for predicting new ones."""
    X = np.asarray(X, dtype=float)
    s = _seed(seed, 999)
    return NuisanceModels(
        m=_learner(n_trees, min_leaf, s + 1, y, X),
        e=_learner(n_trees, min_leaf, s + 2, z, X),
        p=_learner(n_trees, min_leaf, s + 3, w, X),
        w1=_learner(n_trees, min_leaf, s + 4, w[z == 1], X[z == 1]),
        w0=_learner(n_trees, min_leaf, s + 5, w[z == 0], X[z == 0]),
    )
