"""Core data model shared by every stage of the pipeline.

Treatment is coded ``w = 1`` for internal medicine and ``w = 0`` for the
surgical unit. The outcome ``y`` is survival to discharge.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

DIAGNOSIS_GROUPS = ("I2", "I3", "I6", "I7", "C1", "C2", "C3", "C4", "C7")
UNITS = ("intmed", "surg")
BUSY_COLUMNS = ("busy_intmed", "busy_surg")


class DataError(ValueError):
    """Input data violates a schema or a precondition."""


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate layout.

    The two busyness columns are always the last two entries so that
    callers can overwrite them by index without looking names up.
    """

    columns: tuple[str, ...]

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        if len(set(cols)) != len(cols):
            raise DataError("duplicate covariate column names")
        if cols[-2:] != BUSY_COLUMNS:
            raise DataError(f"schema must end with {BUSY_COLUMNS}, got {cols[-2:]}")

    def __len__(self) -> int:
        return len(self.columns)

    @property
    def busy_intmed_index(self) -> int:
        return len(self.columns) - 2

    @property
    def busy_surg_index(self) -> int:
        return len(self.columns) - 1

    def index(self, name: str) -> int:
        return self.columns.index(name)


def default_schema(hospitals: Sequence[str] = ("A", "B", "C", "D", "E")) -> CovariateSchema:
    cols = [f"dx_{g}" for g in DIAGNOSIS_GROUPS]
    cols += ["proc_1", "proc_2"]
    cols += ["age", "sex", "swiss", "emergency"]
    cols += [f"dow_{k}" for k in range(6)]  # Sunday is the reference day
    cols += [f"hosp_{h}" for h in hospitals]
    cols += list(BUSY_COLUMNS)
    return CovariateSchema(tuple(cols))


@dataclass(frozen=True)
class PatientCase:
    case_id: str
    hospital_id: str
    admit_day: date
    year: int
    covariates: tuple[float, ...]
    w: int
    y: int
    diagnosis_group: str
    is_emergency: int
    z: int | None = None

    def __post_init__(self):
        if self.w not in (0, 1) or self.y not in (0, 1):
            raise DataError(f"case {self.case_id}: w and y must be binary")
        if self.z is not None and self.z not in (0, 1):
            raise DataError(f"case {self.case_id}: z must be binary")
        if self.is_emergency not in (0, 1):
            raise DataError(f"case {self.case_id}: is_emergency must be binary")
        if self.diagnosis_group not in DIAGNOSIS_GROUPS:
            raise DataError(f"case {self.case_id}: unknown diagnosis group {self.diagnosis_group!r}")

    @property
    def day_key(self) -> tuple[str, date]:
        return (self.hospital_id, self.admit_day)


@dataclass(frozen=True)
class DayCohort:
    hospital_id: str
    day: date
    cases: tuple[PatientCase, ...]
    baseline_busy_intmed: int
    baseline_busy_surg: int

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        for c in self.cases:
            if c.hospital_id != self.hospital_id or c.admit_day != self.day:
                raise DataError(f"case {c.case_id} does not belong to cohort {self.hospital_id}/{self.day}")
        if self.baseline_busy_intmed < 0 or self.baseline_busy_surg < 0:
            raise DataError("baseline busyness must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.cases)

    @property
    def year(self) -> int:
        return self.cases[0].year if self.cases else self.day.year

    @property
    def observed(self) -> np.ndarray:
        return np.array([c.w for c in self.cases], dtype=np.int8)


@dataclass(frozen=True)
class AssignmentConfig:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("assignment bits must be 0/1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_mask(cls, mask: int, size: int) -> "AssignmentConfig":
        # patient 0 is the most significant bit, so integer order is lexicographic order
        return cls(tuple((mask >> (size - 1 - i)) & 1 for i in range(size)))

    def to_mask(self) -> int:
        m = 0
        for b in self.bits:
            m = (m << 1) | b
        return m

    @property
    def size(self) -> int:
        return len(self.bits)

    @property
    def n_intmed(self) -> int:
        return sum(self.bits)

    @property
    def n_surg(self) -> int:
        return len(self.bits) - sum(self.bits)

    def reassignments(self, observed: Sequence[int]) -> int:
        return sum(int(a != b) for a, b in zip(self.bits, observed))


@dataclass(frozen=True)
class CapacityLimits:
    """Maximum beds per ``(hospital_id, year, unit)``."""

    limits: Mapping[tuple[str, int, str], int] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (h, y, u), c in dict(self.limits).items():
            if u not in UNITS:
                raise DataError(f"unknown unit {u!r} in capacity key")
            if c <= 0:
                raise DataError(f"capacity for {(h, y, u)} must be positive")
            clean[(str(h), int(y), u)] = int(c)
        object.__setattr__(self, "limits", clean)

    def get(self, hospital_id: str, year: int, unit: str) -> int:
        try:
            return self.limits[(hospital_id, year, unit)]
        except KeyError:
            raise KeyError(f"no capacity for hospital={hospital_id} year={year} unit={unit}") from None

    def for_cohort(self, cohort: DayCohort) -> tuple[int, int]:
        """(internal medicine, surgical) limits for the cohort's hospital-year."""
        return (
            self.get(cohort.hospital_id, cohort.year, "intmed"),
            self.get(cohort.hospital_id, cohort.year, "surg"),
        )

    @classmethod
    def unbounded(cls, keys: Iterable[tuple[str, int]], value: int = 10**9) -> "CapacityLimits":
        return cls({(h, y, u): value for h, y in keys for u in UNITS})

    @classmethod
    def from_occupancy(cls, occupancy: Sequence["Stay"]) -> "CapacityLimits":
        """Observed maximum daily occupancy per hospital, year and unit."""
        table = occupancy_table(occupancy)
        limits: dict[tuple[str, int, str], int] = {}
        for (h, u, d), n in table.items():
            key = (h, d.year, u)
            limits[key] = max(limits.get(key, 0), n)
        return cls({k: v for k, v in limits.items() if v > 0})


@dataclass(frozen=True)
class DaySplit:
    train_days: frozenset
    test_days: frozenset
    seed: int

    def partition(self, cases: Iterable[PatientCase]) -> tuple[list[PatientCase], list[PatientCase]]:
        train, test = [], []
        for c in cases:
            if c.day_key in self.train_days:
                train.append(c)
            elif c.day_key in self.test_days:
                test.append(c)
            else:
                raise DataError(f"case {c.case_id} falls on a day outside the split")
        return train, test


@dataclass(frozen=True)
class Stay:
    hospital_id: str
    unit: str
    admit_day: date
    discharge_day: date


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def build_instrument(cases: Sequence[PatientCase]) -> list[PatientCase]:
    """Fill ``z`` with the high-emergency-day indicator.

    A case gets ``z = 1`` when the number of emergency admissions on its
    hospital-day, not counting the case itself, strictly exceeds the median
    of the daily emergency counts of that hospital-year.
    """
    if not cases:
        return []
    counts: Counter = Counter()
    days_by_hy: dict[tuple[str, int], set] = defaultdict(set)
    for c in cases:
        if c.admit_day is None or c.hospital_id is None or c.year is None:
            raise DataError(f"case {c.case_id}: missing hospital, day or year")
        days_by_hy[(c.hospital_id, c.year)].add(c.admit_day)
        counts[(c.hospital_id, c.admit_day)] += c.is_emergency

    medians = {
        hy: float(np.median([counts[(hy[0], d)] for d in sorted(days)]))
        for hy, days in days_by_hy.items()
    }
    out = []
    for c in cases:
        hy = (c.hospital_id, c.year)
        if hy not in medians:
            raise DataError(f"no median for hospital-year {hy}")
        n = counts[c.day_key] - c.is_emergency
        out.append(replace(c, z=int(n > medians[hy])))
    return out


def compute_busyness(stays: Iterable[Stay], hospital_id: str, unit: str, day: date) -> int:
    """Pre-placement occupancy of a unit: stays covering ``day`` that were admitted earlier."""
    if unit not in UNITS:
        warnings.warn(f"unknown unit {unit!r}; busyness reported as 0", stacklevel=2)
        return 0
    n = 0
    for s in stays:
        if s.hospital_id == hospital_id and s.unit == unit and s.admit_day < day <= s.discharge_day:
            n += 1
    return n


def occupancy_table(stays: Sequence[Stay], *, include_same_day: bool = True) -> dict[tuple[str, str, date], int]:
    """Daily occupancy per (hospital, unit, day); same-day admissions optional."""
    table: Counter = Counter()
    for s in stays:
        if s.admit_day > s.discharge_day:
            raise DataError(f"stay admitted {s.admit_day} after discharge {s.discharge_day}")
        start = s.admit_day.toordinal() + (0 if include_same_day else 1)
        for o in range(start, s.discharge_day.toordinal() + 1):
            table[(s.hospital_id, s.unit, date.fromordinal(o))] += 1
    return dict(table)


def baseline_busyness(stays: Sequence[Stay]) -> dict[tuple[str, str, date], int]:
    """Vectorised :func:`compute_busyness` over every day touched by a stay."""
    return occupancy_table(stays, include_same_day=False)


def split_days(days: Sequence[tuple[str, date]], fraction: float, seed: int) -> DaySplit:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    uniq = sorted(set(days))
    if not uniq:
        raise ValueError("no days to split")
    if len(uniq) != len(days):
        raise ValueError("days must be deduplicated")
    n_train = int(math.floor(fraction * len(uniq) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(uniq))
    train = frozenset(uniq[i] for i in perm[:n_train])
    test = frozenset(uniq[i] for i in perm[n_train:])
    return DaySplit(train, test, seed)


def is_feasible(cfg: AssignmentConfig, cohort: DayCohort, caps: CapacityLimits, rho: float | None = None) -> bool:
    if cfg.size != cohort.size:
        raise ValueError("configuration length does not match cohort size")
    cap_im, cap_s = caps.for_cohort(cohort)
    if cohort.baseline_busy_intmed + cfg.n_intmed > cap_im:
        return False
    if cohort.baseline_busy_surg + cfg.n_surg > cap_s:
        return False
    if rho is not None:
        budget = reassignment_budget(rho, cohort.size)
        if cfg.reassignments(cohort.observed) > budget:
            return False
    return True


def reassignment_budget(rho: float, size: int) -> int:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    # small epsilon keeps 0.1 * 10 at 1 despite binary rounding
    return int(math.floor(rho * size + 1e-9))


def build_cohorts(cases: Sequence[PatientCase], stays: Sequence[Stay]) -> list[DayCohort]:
    """Group cases into hospital-day cohorts with pre-placement busyness."""
    base = baseline_busyness(stays)
    grouped: dict[tuple[str, date], list[PatientCase]] = defaultdict(list)
    for c in cases:
        grouped[c.day_key].append(c)
    cohorts = []
    for (h, d), members in sorted(grouped.items()):
        cohorts.append(
            DayCohort(
                hospital_id=h,
                day=d,
                cases=tuple(members),
                baseline_busy_intmed=base.get((h, "intmed", d), 0),
                baseline_busy_surg=base.get((h, "surg", d), 0),
            )
        )
    return cohorts


def case_arrays(cases: Sequence[PatientCase]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack cases into ``(X, y, w, z)`` float arrays."""
    if any(c.z is None for c in cases):
        raise DataError("instrument not built; call build_instrument first")
    X = np.array([c.covariates for c in cases], dtype=float).reshape(len(cases), -1)
    y = np.array([c.y for c in cases], dtype=float)
    w = np.array([c.w for c in cases], dtype=float)
    z = np.array([c.z for c in cases], dtype=float)
    return X, y, w, z
