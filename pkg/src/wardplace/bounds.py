"""Per-patient partial-identification bounds.

Three constructions are provided: normal-approximation confidence
intervals around the forest estimate, worst-case (Manski) bounds from the
observed outcome and placement frequencies, and instrument-based bounds
evaluated on a fixed set of lower and upper terms. A linear program over
the 16 response types gives the sharp bounds for comparison.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.stats import norm

from .forest import EffectEstimate, IvForest

METHODS = ("frequentist", "manski", "pearl")
_TOL = 1e-6


class DegenerateNeighborhood(ValueError):
    pass


@dataclass(frozen=True)
class BoundPair:
    lower: float
    upper: float
    method: str
    violated: bool = False  # terms crossed and were collapsed to their midpoint
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS + ("oracle",):
            raise ValueError(f"unknown bound method {self.method!r}")
        if self.lower > self.upper + 1e-12:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float, tol: float = 1e-9) -> bool:
        return self.lower - tol <= value <= self.upper + tol


@dataclass(frozen=True)
class JointProbs:
    """Outcome-placement probabilities per instrument arm.

    ``cond[y, w, z] = P(Y=y, W=w | Z=z, X)``; ``pz = P(Z=1 | X)``.
    """

    cond: np.ndarray
    pz: float = 0.5

    def __post_init__(self):
        c = np.asarray(self.cond, dtype=float)
        if c.shape != (2, 2, 2):
            raise ValueError(f"expected a 2x2x2 array, got shape {c.shape}")
        if np.any(c < -_TOL) or np.any(c > 1 + _TOL) or not np.isfinite(c).all():
            raise ValueError("probabilities must lie in [0, 1]")
        sums = c.sum(axis=(0, 1))
        if np.any(np.abs(sums - 1) > _TOL):
            raise ValueError(f"per-arm probabilities must sum to 1, got {sums.tolist()}")
        if not 0 <= self.pz <= 1:
            raise ValueError("pz must lie in [0, 1]")
        c = np.clip(c, 0.0, 1.0)
        c.flags.writeable = False
        object.__setattr__(self, "cond", c)
        object.__setattr__(self, "pz", float(self.pz))

    def joint(self) -> np.ndarray:
        """``P(Y=y, W=w, Z=z | X)``."""
        return self.cond * np.array([1 - self.pz, self.pz])[None, None, :]

    def outcome_placement(self) -> np.ndarray:
        """``P(Y=y, W=w | X)`` with the instrument marginalised out."""
        return self.joint().sum(axis=2)


def frequentist_bounds(est: EffectEstimate, alpha: float = 0.05) -> BoundPair:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if est.sigma2_hat < 0:
        raise ValueError("negative variance")
    half = norm.ppf(1 - alpha / 2) * np.sqrt(est.sigma2_hat)
    return BoundPair(float(est.tau_hat - half), float(est.tau_hat + half), "frequentist")


def manski_bounds(mu1: float, mu0: float, p1: float) -> BoundPair:
    """Worst-case bounds with ``mu_w = E[Y | W=w, X]`` and ``p1 = P(W=1 | X)``."""
    p0 = 1.0 - p1
    lo1, hi1 = mu1 * p1, mu1 * p1 + p0
    lo0, hi0 = mu0 * p0, mu0 * p0 + p1
    return BoundPair(float(lo1 - hi0), float(hi1 - lo0), "manski")


def _pearl_terms(p: np.ndarray) -> tuple[list[float], list[float]]:
    lower = [
        -1 + p[1, 0, 0] + p[1, 1, 0] + p[1, 0, 1] + p[1, 1, 1],
        -1 + p[0, 0, 1] + p[0, 1, 1] + p[1, 0, 1] + p[1, 1, 1],
        -1 + p[0, 1, 0] + p[0, 1, 1] + p[1, 1, 0] + p[1, 1, 1],
    ]
    upper = [
        1 - p[0, 0, 0] - p[0, 1, 0] - p[0, 0, 1] - p[0, 1, 1],
        1 - p[0, 0, 0] - p[0, 1, 0] - p[1, 0, 1] - p[1, 1, 1],
        1 - p[1, 0, 0] - p[1, 1, 0] - p[0, 0, 1] - p[0, 1, 1],
        1 - p[1, 0, 0] - p[1, 1, 0] - p[1, 0, 1] - p[1, 1, 1],
    ]
    return lower, upper


def pearl_bounds(jp: JointProbs, convention: str = "joint") -> BoundPair:
    """Instrument bounds: max of three lower terms, min of four upper terms.

    ``convention="joint"`` feeds the terms ``P(Y, W, Z | X)``;
    ``"conditional"`` feeds ``P(Y, W | Z, X)``. Under the conditional reading
    the second lower term is identically 0 while the upper terms include
    ``-|P(Y=1|Z=1) - P(Y=1|Z=0)|``, so the interval crosses whenever the
    arms differ. Crossed intervals collapse to their midpoint with a flag.
    """
    if not isinstance(jp, JointProbs):
        raise TypeError("pearl_bounds expects JointProbs")
    if convention == "joint":
        p = jp.joint()
    elif convention == "conditional":
        p = jp.cond
    else:
        raise ValueError(f"unknown convention {convention!r}")
    lo_terms, hi_terms = _pearl_terms(p)
    lo = min(max(max(lo_terms), -1.0), 1.0)
    hi = max(min(min(hi_terms), 1.0), -1.0)
    if lo > hi:
        mid = 0.5 * (lo + hi)
        return BoundPair(float(mid), float(mid), "pearl", violated=True, flags=("crossed",))
    return BoundPair(float(lo), float(hi), "pearl")


# ---------------------------------------------------------------------------
# sharp bounds over response types
# ---------------------------------------------------------------------------

# compliance types: W(z) for never, complier, defier, always
_W_OF = ((0, 0), (0, 1), (1, 0), (1, 1))
# outcome types: Y(w) for never, helped, hurt, always
_Y_OF = ((0, 0), (0, 1), (1, 0), (1, 1))
_TYPES = list(itertools.product(range(4), range(4)))


def _response_system():
    A = np.zeros((8, 16))
    rows = list(itertools.product((0, 1), (0, 1), (0, 1)))  # (y, w, z)
    for k, (c, r) in enumerate(_TYPES):
        for z in (0, 1):
            w = _W_OF[c][z]
            y = _Y_OF[r][w]
            A[rows.index((y, w, z)), k] = 1.0
    effect = np.array([_Y_OF[r][1] - _Y_OF[r][0] for _, r in _TYPES], dtype=float)
    return A, rows, effect


_A, _ROWS, _EFFECT = _response_system()


def response_type_probs(q: np.ndarray) -> np.ndarray:
    """``cond[y, w, z]`` implied by response-type shares ``q[c, r]``."""
    b = _A @ np.asarray(q, dtype=float).reshape(16)
    cond = np.zeros((2, 2, 2))
    for (y, w, z), v in zip(_ROWS, b):
        cond[y, w, z] = v
    return cond


def response_type_effect(q: np.ndarray) -> float:
    return float(_EFFECT @ np.asarray(q, dtype=float).reshape(16))


def lp_oracle_bounds(jp: JointProbs) -> BoundPair:
    """Sharp bounds on the average effect given the instrument-arm conditionals.

    Optimises over the 16 response-type shares with the instrument excluded
    from outcomes. When estimation noise leaves no exact solution, the
    nearest feasible point in L1 distance is used and a flag is set.
    """
    b = np.array([jp.cond[y, w, z] for y, w, z in _ROWS])
    res_lo = linprog(_EFFECT, A_eq=_A, b_eq=b, bounds=(0, None), method="highs")
    res_hi = linprog(-_EFFECT, A_eq=_A, b_eq=b, bounds=(0, None), method="highs")
    if res_lo.status == 0 and res_hi.status == 0:
        return BoundPair(float(res_lo.fun), float(-res_hi.fun), "oracle")
    # minimise sum |A q - b| via slack variables, then optimise within that distance
    n, m = 16, len(b)
    c = np.r_[np.zeros(n), np.ones(2 * m)]
    A_eq = np.hstack([_A, np.eye(m), -np.eye(m)])
    proj = linprog(c, A_eq=A_eq, b_eq=b, bounds=(0, None), method="highs")
    if proj.status != 0:
        raise ValueError("response-type projection failed")
    budget = proj.fun + 1e-9
    A_ub = c[None, :]
    lo = linprog(np.r_[_EFFECT, np.zeros(2 * m)], A_eq=A_eq, b_eq=b, A_ub=A_ub, b_ub=[budget],
                 bounds=(0, None), method="highs")
    hi = linprog(np.r_[-_EFFECT, np.zeros(2 * m)], A_eq=A_eq, b_eq=b, A_ub=A_ub, b_ub=[budget],
                 bounds=(0, None), method="highs")
    lo_v, hi_v = max(float(lo.fun), -1.0), min(float(-hi.fun), 1.0)
    return BoundPair(lo_v, max(lo_v, hi_v), "oracle", flags=("projected",))


# ---------------------------------------------------------------------------
# forest neighbourhoods
# ---------------------------------------------------------------------------

def _cell_indicators(y, w, z) -> np.ndarray:
    y, w, z = (np.asarray(a, dtype=int) for a in (y, w, z))
    V = np.zeros((len(y), 8))
    for k, (a, b, c) in enumerate(_ROWS):
        V[:, k] = (y == a) & (w == b) & (z == c)
    return V


def joint_probs_from_cells(cells: np.ndarray, min_weight: float = 1e-6) -> JointProbs:
    """Turn weighted cell masses (ordered as ``(y, w, z)`` in binary) into JointProbs."""
    cells = np.asarray(cells, dtype=float).reshape(8)
    mass = np.zeros((2, 2, 2))
    for (y, w, z), v in zip(_ROWS, cells):
        mass[y, w, z] = v
    arm = mass.sum(axis=(0, 1))
    if np.any(arm < min_weight):
        raise DegenerateNeighborhood("degenerate neighborhood: an instrument arm has no weight")
    return JointProbs(mass / arm[None, None, :], pz=float(arm[1] / arm.sum()))


def estimate_joint_probs(forest: IvForest, x) -> JointProbs:
    """Forest-weighted cell frequencies, renormalised within each instrument arm."""
    cells = forest.weighted_means(np.atleast_2d(x), _cell_indicators(forest.y, forest.w, forest.z))[0]
    return joint_probs_from_cells(cells)


def manski_from_joint(jp: JointProbs) -> BoundPair:
    q = jp.outcome_placement()
    p1 = float(q[:, 1].sum())
    mu1 = float(q[1, 1] / p1) if p1 > 0 else 0.0
    mu0 = float(q[1, 0] / (1 - p1)) if p1 < 1 else 0.0
    return manski_bounds(mu1, mu0, p1)


def attach_bounds(X, forest: IvForest, alpha: float = 0.05, convention: str = "joint"
                  ) -> list[EffectEstimate]:
    """Point estimates with frequentist, Manski and instrument bounds for each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tau, var = forest.predict(X)
    cells = forest.weighted_means(X, _cell_indicators(forest.y, forest.w, forest.z))
    out = []
    for t, v, c in zip(tau, var, cells):
        est = EffectEstimate(float(t), float(v))
        jp = joint_probs_from_cells(c)
        pearl = pearl_bounds(jp, convention)
        flags = ("pearl_crossed",) if pearl.violated else ()
        out.append(replace(est, frequentist=frequentist_bounds(est, alpha), manski=manski_from_joint(jp),
                           pearl=pearl, flags=flags))
    return out


def bounds_summary(estimates: Sequence[EffectEstimate]) -> list[dict]:
    """Average lower and upper bound per method, with crossing counts."""
    rows = []
    for m in METHODS:
        pairs = [getattr(e, m) for e in estimates]
        if not pairs or any(p is None for p in pairs):
            raise ValueError(f"{m} bounds missing")
        lo = np.array([p.lower for p in pairs])
        hi = np.array([p.upper for p in pairs])
        rows.append({
            "method": m,
            "lower": float(lo.mean()),
            "upper": float(hi.mean()),
            "mean_width": float((hi - lo).mean()),
            "n_cases": len(pairs),
            "n_crossed": int(sum(p.violated for p in pairs)),
        })
    return rows


def nests_within(inner: BoundPair, outer: BoundPair, tol: float = 1e-9) -> bool:
    return outer.lower - tol <= inner.lower and inner.upper <= outer.upper + tol
