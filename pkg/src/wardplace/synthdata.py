"""Synthetic hospital data with known effects, plus CSV ingestion.

The generator simulates a set of hospitals over consecutive days. Each
hospital-day receives a cohort of patients whose emergency count drives the
instrument; patients are placed according to a latent compliance type and
occupy beds for a random length of stay. Background (non-cohort) stays fill
the wards so that busyness varies from day to day.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import (
    BUSY_COLUMNS,
    DIAGNOSIS_GROUPS,
    UNITS,
    CapacityLimits,
    CovariateSchema,
    DataError,
    PatientCase,
    Stay,
    build_instrument,
    default_schema,
)

COMPLIANCE_TYPES = ("complier", "always_taker", "never_taker", "defier")

CASE_FIXED_COLUMNS = (
    "case_id", "hospital_id", "admit_day", "year", "w", "z", "y", "diagnosis_group", "is_emergency",
)
OCCUPANCY_COLUMNS = ("hospital_id", "unit", "admit_day", "discharge_day")
TRUTH_COLUMNS = ("case_id", "true_tau", "compliance_type")


class DataValidationError(DataError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors[:20]) + (" ..." if len(self.errors) > 20 else ""))


@dataclass(frozen=True)
class EffectFn:
    """Effect of internal-medicine placement on survival probability.

    ``kind`` is one of ``constant``, ``linear`` or ``busyness``. The busyness
    form subtracts ``gamma * (busy_intmed / C_intmed - busy_surg / C_surg)``
    from the linear part.
    """

    kind: str = "constant"
    intercept: float = 0.0
    coefs: Mapping[str, float] = field(default_factory=dict)
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "busyness"):
            raise ValueError(f"unknown effect form {self.kind!r}")


@dataclass(frozen=True)
class BaselineFn:
    intercept: float = 0.9
    coefs: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DgpSpec:
    n_days: int = 60
    patients_per_day: tuple[int, int] = (4, 12)
    effect_fn: EffectFn = field(default_factory=EffectFn)
    baseline_fn: BaselineFn = field(default_factory=BaselineFn)
    compliance_mix: Mapping[str, float] = field(
        default_factory=lambda: {"complier": 0.6, "always_taker": 0.25, "never_taker": 0.15, "defier": 0.0}
    )
    instrument_prob: float = 0.4
    confounding_strength: float = 0.5
    # survival-probability shift per unit of latent risk
    risk_coef: float = 0.03
    capacities: CapacityLimits | None = None
    seed: int = 0
    hospitals: tuple[str, ...] = ("A", "B", "C", "D", "E")
    start_date: date = date(2019, 1, 1)
    capacity_per_unit: int = 60
    background_load: float = 0.6
    mean_los: float = 4.0
    max_los: int = 12

    def validate(self) -> None:
        mix = {k: float(v) for k, v in self.compliance_mix.items()}
        unknown = set(mix) - set(COMPLIANCE_TYPES)
        if unknown:
            raise ValueError(f"unknown compliance types {sorted(unknown)}")
        if any(v < 0 or v > 1 for v in mix.values()) or not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("compliance_mix must be probabilities summing to 1")
        if not 0.0 < self.instrument_prob < 1.0:
            raise ValueError("instrument_prob must lie in (0, 1)")
        lo, hi = self.patients_per_day
        if lo < 1 or hi < lo:
            raise ValueError("patients_per_day must satisfy 1 <= min <= max")
        if hi < _emergency_base(lo) + 2:
            raise ValueError("patients_per_day max too small to realise high-emergency days")
        if self.n_days < 1:
            raise ValueError("n_days must be positive")
        if not 0.0 <= self.background_load < 1.0:
            raise ValueError("background_load must lie in [0, 1)")
        if self.capacity_per_unit <= hi:
            raise ValueError("capacity_per_unit must exceed the largest cohort")

    @property
    def schema(self) -> CovariateSchema:
        return default_schema(self.hospitals)


@dataclass
class GroundTruth:
    case_ids: list[str]
    true_tau: np.ndarray
    compliance_type: list[str]
    mu0: np.ndarray
    mu1: np.ndarray
    capacities: CapacityLimits
    instrument_agreement: float
    # per-case pieces needed to re-evaluate the effect at other busyness levels
    base_index: np.ndarray
    tau_static: np.ndarray
    gamma: float
    cap_intmed: np.ndarray
    cap_surg: np.ndarray

    def tau_at(self, i: int, busy_intmed: float, busy_surg: float) -> float:
        shift = self.gamma * (busy_intmed / self.cap_intmed[i] - busy_surg / self.cap_surg[i])
        b = self.base_index[i]
        return float(np.clip(b + self.tau_static[i] - shift, 0, 1) - np.clip(b, 0, 1))

    def true_tau_at_busyness(self, busy_intmed: float, busy_surg: float) -> np.ndarray:
        shift = self.gamma * (busy_intmed / self.cap_intmed - busy_surg / self.cap_surg)
        return np.clip(self.base_index + self.tau_static - shift, 0, 1) - np.clip(self.base_index, 0, 1)

    def population_conditionals(self) -> np.ndarray:
        """Population ``P(Y=y, W=w | Z=z)`` as a ``[y, w, z]`` array implied by the truth."""
        cond = np.zeros((2, 2, 2))
        types = np.array(self.compliance_type)
        for z in (0, 1):
            w = np.where(types == "always_taker", 1, np.where(types == "never_taker", 0,
                         np.where(types == "complier", z, 1 - z)))
            mu = np.where(w == 1, self.mu1, self.mu0)
            for wv in (0, 1):
                sel = w == wv
                cond[1, wv, z] = mu[sel].sum() / len(mu)
                cond[0, wv, z] = (1 - mu[sel]).sum() / len(mu)
        return cond

    def late(self) -> float:
        sel = np.array(self.compliance_type) == "complier"
        return float(np.mean(self.mu1[sel] - self.mu0[sel]))


def _emergency_base(min_patients: int) -> int:
    return min_patients // 3


def _linear(coefs: Mapping[str, float], intercept: float, X: np.ndarray, schema: CovariateSchema) -> np.ndarray:
    out = np.full(X.shape[0], float(intercept))
    for name, c in coefs.items():
        if name not in schema.columns:
            raise ValueError(f"unknown covariate {name!r} in functional form")
        out += c * X[:, schema.index(name)]
    return out


def _los(rng: np.random.Generator, mean: float, cap: int) -> int:
    return int(min(max(rng.poisson(mean), 1), cap))


def generate(spec: DgpSpec) -> tuple[list[PatientCase], list[Stay], GroundTruth]:
    """Simulate cases, ward stays and the ground truth behind them."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    schema = spec.schema
    p = len(schema)
    lo, hi = spec.patients_per_day
    e_low = _emergency_base(lo)
    days = [spec.start_date + timedelta(days=k) for k in range(spec.n_days)]

    # --- cohorts: emergency counts follow a drawn day-level instrument
    rows = []  # (hospital, day_idx, is_emergency)
    drawn_z = []
    for h in spec.hospitals:
        for k in range(spec.n_days):
            zday = int(rng.random() < spec.instrument_prob)
            n_emerg = e_low if zday == 0 else min(e_low + 2 + int(rng.poisson(1.0)), hi)
            n_other = int(rng.integers(max(lo - n_emerg, 0), hi - n_emerg + 1))
            for j in range(n_emerg + n_other):
                rows.append((h, k, int(j < n_emerg)))
                drawn_z.append(zday)
    n = len(rows)

    X = np.zeros((n, p))
    dx_idx = rng.integers(0, len(DIAGNOSIS_GROUPS), size=n)
    X[np.arange(n), dx_idx] = 1.0
    X[:, schema.index("proc_1")] = rng.random(n) < 0.3
    X[:, schema.index("proc_2")] = rng.random(n) < 0.2
    X[:, schema.index("age")] = np.clip(np.round(rng.normal(70, 12, n)), 18, 100)
    X[:, schema.index("sex")] = rng.random(n) < 0.5
    X[:, schema.index("swiss")] = rng.random(n) < 0.7
    X[:, schema.index("emergency")] = [r[2] for r in rows]
    for i, (h, k, _) in enumerate(rows):
        dow = days[k].isoweekday() % 7  # Sunday -> 0
        if dow > 0:
            X[i, schema.index(f"dow_{dow - 1}")] = 1.0
        X[i, schema.index(f"hosp_{h}")] = 1.0

    prelim = [
        PatientCase(
            case_id=f"{h}-{k:05d}-{i:07d}", hospital_id=h, admit_day=days[k], year=days[k].year,
            covariates=(), w=0, y=0, diagnosis_group=DIAGNOSIS_GROUPS[dx_idx[i]], is_emergency=e,
        )
        for i, (h, k, e) in enumerate(rows)
    ]
    z = np.array([c.z for c in build_instrument(prelim)], dtype=int)
    agreement = float(np.mean(z == np.array(drawn_z))) if n else 1.0

    # --- compliance types, tilted by latent risk to create confounding
    risk = rng.normal(size=n)
    mix = np.array([float(spec.compliance_mix.get(t, 0.0)) for t in COMPLIANCE_TYPES])
    tilt = np.exp(spec.confounding_strength * risk)
    probs = np.tile(mix, (n, 1))
    probs[:, 1] *= tilt
    probs[:, 2] /= tilt
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(n)
    type_idx = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    type_idx = np.minimum(type_idx, 3)
    types = [COMPLIANCE_TYPES[t] for t in type_idx]
    w = np.select([type_idx == 0, type_idx == 1, type_idx == 2], [z, 1, 0], 1 - z).astype(int)

    # --- ward occupancy with capacity-respecting admissions
    caps = spec.capacities
    years = sorted({d.year for d in days})
    if caps is None:
        caps = CapacityLimits({(h, y, u): spec.capacity_per_unit for h in spec.hospitals for y in years for u in UNITS})
    stays, baseline, realised = _simulate_wards(spec, rng, rows, w, days, caps)

    # covariates carry pre-placement busyness; the effect responds to the
    # occupancy after the day's cohort has been placed
    bi, bs = schema.busy_intmed_index, schema.busy_surg_index
    X[:, bi] = baseline[:, 0]
    X[:, bs] = baseline[:, 1]
    cap_im = np.array([caps.get(h, days[k].year, "intmed") for h, k, _ in rows], dtype=float)
    cap_s = np.array([caps.get(h, days[k].year, "surg") for h, k, _ in rows], dtype=float)

    # --- potential outcomes
    ef = spec.effect_fn
    tau_static = np.full(n, ef.intercept) if ef.kind == "constant" else _linear(ef.coefs, ef.intercept, X, schema)
    gamma = ef.gamma if ef.kind == "busyness" else 0.0
    base_index = _linear(spec.baseline_fn.coefs, spec.baseline_fn.intercept, X, schema) - spec.risk_coef * risk
    shift = gamma * (realised[:, 0] / cap_im - realised[:, 1] / cap_s)
    mu0 = np.clip(base_index, 0, 1)
    mu1 = np.clip(base_index + tau_static - shift, 0, 1)
    v = rng.random(n)
    y = (v < np.where(w == 1, mu1, mu0)).astype(int)

    cases = [
        replace(c, covariates=tuple(float(a) for a in X[i]), w=int(w[i]), y=int(y[i]), z=int(z[i]))
        for i, c in enumerate(prelim)
    ]
    truth = GroundTruth(
        case_ids=[c.case_id for c in cases],
        true_tau=mu1 - mu0,
        compliance_type=types,
        mu0=mu0,
        mu1=mu1,
        capacities=caps,
        instrument_agreement=agreement,
        base_index=base_index,
        tau_static=tau_static,
        gamma=gamma,
        cap_intmed=cap_im,
        cap_surg=cap_s,
    )
    return cases, stays, truth


def _simulate_wards(spec, rng, rows, w, days, caps):
    """Place cohort and background stays.

    Returns the stays plus, per case, the pre-placement busyness of both
    units and the busyness once the case's own cohort has been placed.

    Stays admitted before day ``t`` never push occupancy on ``t`` above
    ``C - max_cohort``, which leaves room for the cohort admitted on ``t``.
    """
    hi = spec.patients_per_day[1]
    burn = 3 * spec.max_los
    horizon = burn + spec.n_days + spec.max_los + 1
    origin = spec.start_date - timedelta(days=burn)
    by_day: dict[tuple[str, int], list[int]] = {}
    for i, (h, k, _) in enumerate(rows):
        by_day.setdefault((h, k), []).append(i)

    stays: list[Stay] = []
    baseline = np.zeros((len(rows), 2))
    realised = np.zeros((len(rows), 2))
    for h in spec.hospitals:
        occ = {u: np.zeros(horizon, dtype=int) for u in UNITS}

        def cap_at(u, t):
            d = origin + timedelta(days=int(t))
            year = min(max(d.year, days[0].year), days[-1].year)
            return caps.get(h, year, u)

        def add_stay(u, t0, los, reserve):
            # extend day by day while room remains; the admission day is pre-checked
            t_end = t0
            occ[u][t0] += 1
            for t in range(t0 + 1, min(t0 + los, horizon - 1) + 1):
                if occ[u][t] + 1 > cap_at(u, t) - reserve:
                    break
                occ[u][t] += 1
                t_end = t
            stays.append(Stay(h, u, origin + timedelta(days=t0), origin + timedelta(days=t_end)))

        for t in range(burn + spec.n_days):
            k = t - burn
            members = by_day.get((h, k), []) if k >= 0 else []
            if members:
                base = {u: int(occ[u][t]) for u in UNITS}
                n_im = int(sum(w[i] for i in members))
                for i in members:
                    baseline[i] = (base["intmed"], base["surg"])
                    realised[i] = (base["intmed"] + n_im, base["surg"] + len(members) - n_im)
                for i in members:
                    add_stay(UNITS[0] if w[i] == 1 else UNITS[1], t, _los(rng, spec.mean_los, spec.max_los), hi)
            for u in UNITS:
                lam = spec.background_load * (cap_at(u, t) - hi) / spec.mean_los
                for _ in range(int(rng.poisson(lam))):
                    los = _los(rng, spec.mean_los, spec.max_los)
                    end = min(t + los, horizon - 1)
                    if np.all(occ[u][t:end + 1] + 1 <= cap_at(u, t) - hi):
                        occ[u][t:end + 1] += 1
                        stays.append(Stay(h, u, origin + timedelta(days=t), origin + timedelta(days=end)))
    return stays, baseline, realised


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def write_cases_csv(path, cases: Sequence[PatientCase], schema: CovariateSchema) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CASE_FIXED_COLUMNS + schema.columns)
        for c in cases:
            wr.writerow([
                c.case_id, c.hospital_id, c.admit_day.isoformat(), c.year, c.w,
                "" if c.z is None else c.z, c.y, c.diagnosis_group, c.is_emergency,
                *(repr(float(v)) for v in c.covariates),
            ])


def write_occupancy_csv(path, stays: Sequence[Stay]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(OCCUPANCY_COLUMNS)
        for s in stays:
            wr.writerow([s.hospital_id, s.unit, s.admit_day.isoformat(), s.discharge_day.isoformat()])


def write_truth_csv(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRUTH_COLUMNS)
        for cid, t, ct in zip(truth.case_ids, truth.true_tau, truth.compliance_type):
            wr.writerow([cid, repr(float(t)), ct])


def write_capacities_csv(path, caps: CapacityLimits) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["hospital_id", "year", "unit", "capacity"])
        for (h, y, u), c in sorted(caps.limits.items()):
            wr.writerow([h, y, u, c])


def read_capacities_csv(path) -> CapacityLimits:
    with open(path, newline="") as fh:
        return CapacityLimits({(r["hospital_id"], int(r["year"]), r["unit"]): int(r["capacity"]) for r in csv.DictReader(fh)})


def _binary(value: str, name: str, line: int, errors: list[str]) -> int | None:
    if value not in ("0", "1"):
        errors.append(f"line {line}: {name} must be 0 or 1, got {value!r}")
        return None
    return int(value)


def _day(value: str, name: str, line: int, errors: list[str]) -> date | None:
    try:
        return date.fromisoformat(value)
    except ValueError:
        errors.append(f"line {line}: {name} is not an ISO date: {value!r}")
        return None


def ingest_csv(case_path, occupancy_path=None, schema: CovariateSchema | None = None
               ) -> tuple[list[PatientCase], list[Stay]]:
    """Read case and occupancy files.

    Cases read from a file without a ``z`` column come back with ``z=None``;
    :func:`needs_instrument` reports that and :func:`~wardplace.domain.build_instrument`
    fills it in. All schema problems are collected and raised together.
    """
    errors: list[str] = []
    cases: list[PatientCase] = []
    with open(case_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError([f"{case_path}: empty file"]) from None
        required = [c for c in CASE_FIXED_COLUMNS if c != "z"]
        missing = [c for c in required if c not in header]
        cov_cols = [c for c in header if c not in CASE_FIXED_COLUMNS]
        if schema is not None:
            missing += [c for c in schema.columns if c not in header]
            cov_cols = list(schema.columns)
        if missing:
            raise DataValidationError([f"line 1: missing column {c!r}" for c in missing])
        try:
            CovariateSchema(tuple(cov_cols))
        except DataError as exc:
            raise DataValidationError([f"line 1: {exc}"]) from None
        pos = {c: header.index(c) for c in header}
        has_z = "z" in pos
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                errors.append(f"line {line}: expected {len(header)} fields, got {len(row)}")
                continue
            n_err = len(errors)
            get = lambda c: row[pos[c]].strip()  # noqa: E731
            w = _binary(get("w"), "w", line, errors)
            y = _binary(get("y"), "y", line, errors)
            e = _binary(get("is_emergency"), "is_emergency", line, errors)
            z = None
            if has_z and get("z") != "":
                z = _binary(get("z"), "z", line, errors)
            day = _day(get("admit_day"), "admit_day", line, errors)
            dx = get("diagnosis_group")
            if dx not in DIAGNOSIS_GROUPS:
                errors.append(f"line {line}: unknown diagnosis_group {dx!r}")
            try:
                year = int(get("year"))
            except ValueError:
                errors.append(f"line {line}: year is not an integer: {get('year')!r}")
            try:
                cov = tuple(float(get(c)) for c in cov_cols)
            except ValueError:
                errors.append(f"line {line}: non-numeric covariate")
            if len(errors) > n_err:
                continue
            cases.append(PatientCase(
                case_id=get("case_id"), hospital_id=get("hospital_id"), admit_day=day, year=year,
                covariates=cov, w=w, y=y, diagnosis_group=dx, is_emergency=e, z=z,
            ))

    stays: list[Stay] = []
    if occupancy_path is not None:
        with open(occupancy_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, [])
            missing = [c for c in OCCUPANCY_COLUMNS if c not in header]
            if missing:
                errors += [f"{occupancy_path} line 1: missing column {c!r}" for c in missing]
            else:
                pos = {c: header.index(c) for c in header}
                for line, row in enumerate(reader, start=2):
                    n_err = len(errors)
                    a = _day(row[pos["admit_day"]], "admit_day", line, errors)
                    d = _day(row[pos["discharge_day"]], "discharge_day", line, errors)
                    if len(errors) == n_err and a > d:
                        errors.append(f"{occupancy_path} line {line}: admit_day after discharge_day")
                    if len(errors) == n_err:
                        stays.append(Stay(row[pos["hospital_id"]], row[pos["unit"]], a, d))
    if errors:
        raise DataValidationError(errors)
    return cases, stays


def needs_instrument(cases: Sequence[PatientCase]) -> bool:
    return any(c.z is None for c in cases)


def schema_from_csv(case_path) -> CovariateSchema:
    with open(case_path, newline="") as fh:
        header = next(csv.reader(fh))
    return CovariateSchema(tuple(c for c in header if c not in CASE_FIXED_COLUMNS))


__all__ = [
    "BUSY_COLUMNS", "COMPLIANCE_TYPES", "BaselineFn", "DataValidationError", "DgpSpec", "EffectFn",
    "GroundTruth", "generate", "ingest_csv", "needs_instrument", "schema_from_csv", "write_cases_csv",
    "write_occupancy_csv", "write_truth_csv", "write_capacities_csv", "read_capacities_csv",
]
