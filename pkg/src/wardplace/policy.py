"""Daily placement policies under capacity and reassignment limits.

Each hospital-day cohort of ``P`` patients is solved on its own. Effects
depend on the number ``j`` of patients sent to internal medicine, because
that count sets the busyness both units will see; they are supplied as
``P x (P + 1)`` tables. Surgical placement contributes 0 to welfare.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .bounds import attach_bounds
from .domain import (
    AssignmentConfig,
    CapacityLimits,
    DayCohort,
    is_feasible,
    reassignment_budget,
)

BOUND_METHODS = ("frequentist", "manski", "pearl")
CRITERIA = ("welfare_max", "minimax_freq", "minimax_manski", "minimax_pearl")
POLICIES = ("observed",) + CRITERIA
METRICS = ("point",) + BOUND_METHODS
_CRITERION_METHOD = {"minimax_freq": "frequentist", "minimax_manski": "manski", "minimax_pearl": "pearl"}
_TIE = 1e-12


class InfeasibleDay(ValueError):
    pass


@dataclass(frozen=True)
class CohortEffects:
    """Effect tables indexed ``[patient, internal-medicine headcount]``."""

    point: np.ndarray
    lower: Mapping[str, np.ndarray]

    def __post_init__(self):
        pt = np.asarray(self.point, dtype=float)
        P = pt.shape[0]
        if pt.shape != (P, P + 1):
            raise ValueError(f"point table must be P x (P+1), got {pt.shape}")
        low = {}
        for m in BOUND_METHODS:
            if m not in self.lower:
                raise ValueError(f"missing {m} lower-bound table")
            arr = np.asarray(self.lower[m], dtype=float)
            if arr.shape != pt.shape:
                raise ValueError(f"{m} table has shape {arr.shape}, expected {pt.shape}")
            low[m] = arr
        object.__setattr__(self, "point", pt)
        object.__setattr__(self, "lower", low)

    @property
    def size(self) -> int:
        return self.point.shape[0]

    def table(self, metric: str) -> np.ndarray:
        return self.point if metric in ("point", None, "none") else self.lower[metric]

    @classmethod
    def constant(cls, tau: Sequence[float], lower: Mapping[str, Sequence[float]] | None = None) -> "CohortEffects":
        """Tables that do not depend on the headcount."""
        tau = np.asarray(tau, dtype=float)
        P = len(tau)
        rep = lambda v: np.repeat(np.asarray(v, dtype=float)[:, None], P + 1, axis=1)  # noqa: E731
        lower = lower or {m: tau for m in BOUND_METHODS}
        return cls(rep(tau), {m: rep(lower[m]) for m in BOUND_METHODS})


def cohort_effects(cohort: DayCohort, forest, alpha: float = 0.05, convention: str = "joint") -> CohortEffects:
    """Forest effects for every patient at every internal-medicine headcount."""
    P = cohort.size
    X = np.array([c.covariates for c in cohort.cases], dtype=float)
    bi, bs = X.shape[1] - 2, X.shape[1] - 1
    rows = np.repeat(X, P + 1, axis=0)
    js = np.tile(np.arange(P + 1), P)
    rows[:, bi] = cohort.baseline_busy_intmed + js
    rows[:, bs] = cohort.baseline_busy_surg + P - js
    est = attach_bounds(rows, forest, alpha, convention)
    point = np.array([e.tau_hat for e in est]).reshape(P, P + 1)
    lower = {m: np.array([getattr(e, m).lower for e in est]).reshape(P, P + 1) for m in BOUND_METHODS}
    return CohortEffects(point, lower)


def config_welfare(cfg: AssignmentConfig, effects: CohortEffects, bound: str | None = None) -> float:
    """Sum of effects of the patients sent to internal medicine."""
    if cfg.size != effects.size:
        raise ValueError("configuration length does not match the effect table")
    bits = np.asarray(cfg.bits, dtype=bool)
    j = int(bits.sum())
    return float(effects.table(bound or "point")[bits, j].sum())


# ---------------------------------------------------------------------------
# feasible sets
# ---------------------------------------------------------------------------

def headcount_range(cohort: DayCohort, caps: CapacityLimits) -> range:
    """Internal-medicine headcounts allowed by both units' capacities."""
    cap_im, cap_s = caps.for_cohort(cohort)
    P = cohort.size
    lo = max(0, P - (cap_s - cohort.baseline_busy_surg))
    hi = min(P, cap_im - cohort.baseline_busy_intmed)
    return range(lo, hi + 1) if lo <= hi else range(0)


def enumerate_feasible(cohort: DayCohort, caps: CapacityLimits, rho: float | None = None,
                       exact_threshold: int = 22) -> Iterator[AssignmentConfig]:
    P = cohort.size
    if P > exact_threshold:
        raise ValueError(f"cohort of {P} exceeds the exact threshold {exact_threshold}; use solve_greedy")
    for mask in range(1 << P):
        cfg = AssignmentConfig.from_mask(mask, P)
        if is_feasible(cfg, cohort, caps, rho):
            yield cfg


def _popcount(a: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a.astype(np.uint64)).astype(np.int64)


def _half_sums(T: np.ndarray, idx: Sequence[int], j: int, masks: np.ndarray) -> np.ndarray:
    # sum of T[i, j] over the patients in idx selected by masks (MSB = idx[0])
    k = len(idx)
    out = np.zeros(len(masks))
    for pos, i in enumerate(idx):
        bit = (masks >> (k - 1 - pos)) & 1
        out += bit * T[i, j]
    return out


def _feasible_table(cohort: DayCohort, effects: CohortEffects, caps: CapacityLimits, rho: float | None):
    """Every feasible mask with its point and lower-bound welfare."""
    P = cohort.size
    obs_mask = AssignmentConfig(tuple(int(b) for b in cohort.observed)).to_mask()
    budget = reassignment_budget(rho, P) if rho is not None else P
    n_low = P // 2
    n_high = P - n_low
    hi_idx, lo_idx = list(range(n_high)), list(range(n_high, P))
    H = np.arange(1 << n_high, dtype=np.int64)
    L = np.arange(1 << n_low, dtype=np.int64)
    popH, popL = _popcount(H), _popcount(L)
    obsH, obsL = obs_mask >> n_low, obs_mask & ((1 << n_low) - 1)
    diffH, diffL = _popcount(H ^ obsH), _popcount(L ^ obsL)
    tables = {m: effects.table(m) for m in METRICS}
    parts = {k: [] for k in ("mask", "moves") + METRICS}
    for j in headcount_range(cohort, caps):
        sumH = {m: _half_sums(t, hi_idx, j, H) for m, t in tables.items()}
        sumL = {m: _half_sums(t, lo_idx, j, L) for m, t in tables.items()}
        for hp in range(max(0, j - n_low), min(j, n_high) + 1):
            a = np.flatnonzero(popH == hp)
            b = np.flatnonzero(popL == j - hp)
            moves = diffH[a][:, None] + diffL[b][None, :]
            keep = moves <= budget
            if not keep.any():
                continue
            mask = (H[a][:, None] << n_low) | L[b][None, :]
            parts["mask"].append(mask[keep])
            parts["moves"].append(moves[keep])
            for m in METRICS:
                parts[m].append((sumH[m][a][:, None] + sumL[m][b][None, :])[keep])
    if not parts["mask"]:
        raise InfeasibleDay(f"no feasible configuration for {cohort.hospital_id} {cohort.day}")
    return {k: np.concatenate(v) for k, v in parts.items()}


def _regrets(values: dict, best: dict) -> dict:
    """Regret of each row under each metric; bound metrics also include the point term."""
    point_gap = best["point"] - values["point"]
    out = {"point": point_gap}
    for m in BOUND_METHODS:
        out[m] = np.maximum(point_gap, best[m] - values[m])
    return out


def _pick(objective: np.ndarray, moves: np.ndarray, masks: np.ndarray) -> int:
    """Index minimising ``objective``; ties go to fewer moves, then the smaller mask."""
    cand = np.flatnonzero(objective <= objective.min() + _TIE)
    cand = cand[moves[cand] == moves[cand].min()]
    return int(cand[np.argmin(masks[cand])])


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class PolicyChoice:
    config: AssignmentConfig
    welfare: float  # point welfare
    lower_welfare: dict
    regret: dict  # metric -> regret within the day's evaluated set
    reassignments: int


@dataclass
class DayResult:
    cohort: DayCohort
    mode: str
    choices: dict = field(default_factory=dict)  # policy -> PolicyChoice
    effects: CohortEffects | None = None
    n_evaluated: int = 0


def _choice(masks, moves, values, regrets, k, P) -> PolicyChoice:
    return PolicyChoice(
        config=AssignmentConfig.from_mask(int(masks[k]), P),
        welfare=float(values["point"][k]),
        lower_welfare={m: float(values[m][k]) for m in BOUND_METHODS},
        regret={m: float(regrets[m][k]) for m in METRICS},
        reassignments=int(moves[k]),
    )


def _decide(cohort, effects, masks, moves, values, mode: str, criteria=CRITERIA) -> DayResult:
    P = cohort.size
    best = {m: float(values[m].max()) for m in METRICS}
    regrets = _regrets(values, best)
    res = DayResult(cohort, mode, effects=effects, n_evaluated=len(masks))
    for crit in criteria:
        if crit == "welfare_max":
            k = _pick(-values["point"], moves, masks)
        else:
            k = _pick(regrets[_CRITERION_METHOD[crit]], moves, masks)
        res.choices[crit] = _choice(masks, moves, values, regrets, k, P)
    obs = AssignmentConfig(tuple(int(b) for b in cohort.observed))
    hit = np.flatnonzero(masks == obs.to_mask())
    if hit.size:
        res.choices["observed"] = _choice(masks, moves, values, regrets, int(hit[0]), P)
    else:
        # observed placement lies outside the feasible set: report it against the same maxima
        vals = {m: config_welfare(obs, effects, m) for m in METRICS}
        reg = _regrets({m: np.array([v]) for m, v in vals.items()}, best)
        res.choices["observed"] = PolicyChoice(
            obs, vals["point"], {m: vals[m] for m in BOUND_METHODS},
            {m: float(reg[m][0]) for m in METRICS}, 0,
        )
    return res


def solve_exact(cohort: DayCohort, effects: CohortEffects, caps: CapacityLimits, rho: float | None = None,
                exact_threshold: int = 22, criteria: Sequence[str] = CRITERIA) -> DayResult:
    """Full enumeration of the feasible set."""
    if effects.size != cohort.size:
        raise ValueError("effect table does not match the cohort")
    if cohort.size > exact_threshold:
        raise ValueError(f"cohort of {cohort.size} exceeds the exact threshold {exact_threshold}")
    t = _feasible_table(cohort, effects, caps, rho)
    values = {m: t[m] for m in METRICS}
    return _decide(cohort, effects, t["mask"], t["moves"], values, "exact", criteria)


def _best_with_budget(score: np.ndarray, observed: np.ndarray, j: int, budget: int) -> np.ndarray | None:
    """Highest-scoring 0/1 vector with ``j`` ones within ``budget`` flips of ``observed``."""
    P = len(score)
    zeros = np.flatnonzero(observed == 0)
    ones = np.flatnonzero(observed == 1)
    # add the best observed-surgical patients, drop the worst observed-internal ones
    add_order = zeros[np.argsort(-score[zeros], kind="stable")]
    drop_order = ones[np.argsort(score[ones], kind="stable")]
    add_gain = np.r_[0.0, np.cumsum(score[add_order])]
    drop_loss = np.r_[0.0, np.cumsum(score[drop_order])]
    shift = j - len(ones)
    best, best_a = -np.inf, None
    for a in range(max(0, shift), len(zeros) + 1):
        r = a - shift
        if r > len(ones) or a + r > budget:
            break
        val = add_gain[a] - drop_loss[r]
        if val > best + _TIE:
            best, best_a = val, a
    if best_a is None:
        return None
    bits = observed.copy()
    bits[add_order[:best_a]] = 1
    bits[drop_order[:best_a - shift]] = 0
    assert bits.sum() == j and np.sum(bits != observed) <= budget
    return bits.astype(np.int8)


def greedy_scores(effects: CohortEffects, j: int, weight: float = 0.5) -> dict:
    """Ranking scores at headcount ``j``: point, each lower bound and their blends."""
    pt = effects.point[:, j]
    out = {"point": pt}
    for m in BOUND_METHODS:
        lo = effects.lower[m][:, j]
        out[m] = lo
        out[f"blend_{m}"] = (1 - weight) * pt + weight * lo
    return out


def solve_greedy(cohort: DayCohort, effects: CohortEffects, caps: CapacityLimits, rho: float | None = None,
                 weight: float = 0.5, criteria: Sequence[str] = CRITERIA) -> DayResult:
    """Rank-and-cut candidates per feasible headcount, then pick by each criterion.

    For every allowed headcount ``j`` and every ranking score, the
    candidate is the top ``j`` patients; under a reassignment budget it is
    the best mix of additions and removals relative to the observed
    placement. The observed placement is always evaluated when feasible.
    Regret is measured against the best evaluated candidate.
    """
    if effects.size != cohort.size:
        raise ValueError("effect table does not match the cohort")
    P = cohort.size
    observed = cohort.observed.astype(np.int8)
    budget = reassignment_budget(rho, P) if rho is not None else None
    seen: dict[int, int] = {}
    for j in headcount_range(cohort, caps):
        for score in greedy_scores(effects, j, weight).values():
            if budget is None:
                order = np.argsort(-score, kind="stable")
                bits = np.zeros(P, dtype=np.int8)
                bits[order[:j]] = 1
            else:
                bits = _best_with_budget(score, observed, j, budget)
                if bits is None:
                    continue
            cfg = AssignmentConfig(tuple(int(b) for b in bits))
            seen.setdefault(cfg.to_mask(), cfg.reassignments(observed))
    obs_cfg = AssignmentConfig(tuple(int(b) for b in observed))
    if is_feasible(obs_cfg, cohort, caps, rho):
        seen.setdefault(obs_cfg.to_mask(), 0)
    if not seen:
        raise InfeasibleDay(f"no feasible configuration for {cohort.hospital_id} {cohort.day}")
    masks = np.array(sorted(seen), dtype=np.int64)
    moves = np.array([seen[m] for m in masks], dtype=np.int64)
    values = {m: np.array([config_welfare(AssignmentConfig.from_mask(int(k), P), effects, m) for k in masks])
              for m in METRICS}
    return _decide(cohort, effects, masks, moves, values, "greedy", criteria)


def solve_day(cohort: DayCohort, effects: CohortEffects, caps: CapacityLimits, rho: float | None = None,
              exact_threshold: int = 22, weight: float = 0.5) -> DayResult:
    if cohort.size <= exact_threshold:
        return solve_exact(cohort, effects, caps, rho, exact_threshold)
    return solve_greedy(cohort, effects, caps, rho, weight)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class PolicyEvaluation:
    rho: float | None
    days: list[DayResult]
    skipped: list[tuple[str, str, str]]  # hospital, day, reason

    @property
    def n_patients(self) -> int:
        return sum(d.cohort.size for d in self.days)

    def matrix(self) -> list[dict]:
        """Per-patient welfare, welfare gain and regrets, policy by metric."""
        n = max(1, self.n_patients)
        rows = []
        for label in ("welfare", "welfare_gain") + tuple(f"{m}_regret" for m in METRICS):
            row = {"metric": label}
            for pol in POLICIES:
                tot = 0.0
                for d in self.days:
                    ch = d.choices[pol]
                    if label == "welfare":
                        tot += ch.welfare
                    elif label == "welfare_gain":
                        tot += ch.welfare - d.choices["observed"].welfare
                    else:
                        tot += ch.regret[label[: -len("_regret")]]
                row[pol] = tot / n
            rows.append(row)
        return rows

    def _per_patient(self):
        # (diagnosis, policy, placed in intmed, effect at the policy's headcount)
        for d in self.days:
            for pol in POLICIES:
                bits = np.asarray(d.choices[pol].config.bits)
                j = int(bits.sum())
                for i, c in enumerate(d.cohort.cases):
                    yield c.diagnosis_group, pol, int(bits[i]), float(bits[i] * d.effects.point[i, j])

    def welfare_by_diagnosis(self) -> list[dict]:
        tot: dict = {}
        cnt: dict = {}
        for dx, pol, _, v in self._per_patient():
            tot[(dx, pol)] = tot.get((dx, pol), 0.0) + v
            if pol == "observed":
                cnt[dx] = cnt.get(dx, 0) + 1
        rows = []
        for dx in sorted(cnt):
            row = {"diagnosis_group": dx, "n": cnt[dx]}
            for pol in CRITERIA:
                row[pol] = (tot[(dx, pol)] - tot[(dx, "observed")]) / cnt[dx]
            rows.append(row)
        return rows

    def specialization_shares(self) -> list[dict]:
        placed: dict = {}
        cnt: dict = {}
        for dx, pol, b, _ in self._per_patient():
            placed[(dx, pol)] = placed.get((dx, pol), 0) + b
            if pol == "observed":
                cnt[dx] = cnt.get(dx, 0) + 1
        return [
            {"diagnosis_group": dx, "n": cnt[dx], **{pol: placed[(dx, pol)] / cnt[dx] for pol in POLICIES}}
            for dx in sorted(cnt)
        ]

    def utilization(self) -> list[dict]:
        """Mean and maximum post-placement occupancy per hospital, unit and policy."""
        acc: dict = {}
        for d in self.days:
            c = d.cohort
            for pol in POLICIES:
                j = d.choices[pol].config.n_intmed
                for unit, occ in (("intmed", c.baseline_busy_intmed + j),
                                  ("surg", c.baseline_busy_surg + c.size - j)):
                    acc.setdefault((c.hospital_id, unit, pol), []).append(occ)
        rows = []
        for h, unit in sorted({(k[0], k[1]) for k in acc}):
            row = {"hospital_id": h, "unit": unit}
            for pol in POLICIES:
                v = acc[(h, unit, pol)]
                row[f"{pol}_mean"] = float(np.mean(v))
                row[f"{pol}_max"] = int(np.max(v))
            rows.append(row)
        return rows


def evaluate_policies(days: Sequence[tuple[DayCohort, CohortEffects]], caps: CapacityLimits,
                      rho: float | None = None, exact_threshold: int = 22, weight: float = 0.5
                      ) -> PolicyEvaluation:
    results, skipped = [], []
    for cohort, effects in days:
        try:
            results.append(solve_day(cohort, effects, caps, rho, exact_threshold, weight))
        except InfeasibleDay as exc:
            skipped.append((cohort.hospital_id, cohort.day.isoformat(), str(exc)))
    return PolicyEvaluation(rho, results, skipped)
