"""CSV report writers.

Every report carries a ``data_source`` column so synthetic results cannot
be mistaken for estimates from real admissions data.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..bounds import bounds_summary
from ..forest import FIRST_STAGE_FORMULAS, cate_by_group, compliance_histogram, overlap_report
from ..policy import CRITERIA, METRICS, POLICIES

REPORT_FILES = (
    "summary_stats.csv",
    "first_stage.csv",
    "ate_cate.csv",
    "bounds_summary.csv",
    "policy_matrix.csv",
    "utilization.csv",
    "specialization_shares.csv",
    "welfare_by_diagnosis.csv",
)
PLOT_FILES = (
    "busyness_timeseries.csv",
    "cate_by_busyness.csv",
    "propensity_hist.csv",
    "compliance_hist.csv",
    "bounds_per_case.csv",
)

HEADERS = {
    "summary_stats.csv": ["variable", "n", "mean", "sd", "min", "max"],
    "first_stage.csv": ["metric", "value", "definition"],
    "ate_cate.csv": ["scope", "group", "n", "estimate", "se", "note"],
    "bounds_summary.csv": ["method", "lower", "upper", "mean_width", "n_cases", "n_crossed"],
    "policy_matrix.csv": ["rho", "metric", *POLICIES, "n_days", "n_patients", "n_exact_days", "n_greedy_days",
                          "n_skipped_days"],
    "utilization.csv": ["rho", "hospital_id", "unit", *[f"{p}_{s}" for p in POLICIES for s in ("mean", "max")]],
    "specialization_shares.csv": ["rho", "diagnosis_group", "n", *POLICIES],
    "welfare_by_diagnosis.csv": ["rho", "diagnosis_group", "n", *CRITERIA],
    "busyness_timeseries.csv": ["hospital_id", "day", "busy_intmed", "busy_surg", "cohort_size"],
    "cate_by_busyness.csv": ["hospital_id", "busy_intmed_bin", "bin_low", "bin_high", "n", "estimate", "se"],
    "propensity_hist.csv": ["bin_low", "bin_high", "n_intmed", "n_surg", "overlap_share"],
    "compliance_hist.csv": ["bin_low", "bin_high", "n_z1", "n_z0"],
    "bounds_per_case.csv": ["case_id", "tau_hat", "sigma2", "freq_lower", "freq_upper", "manski_lower",
                            "manski_upper", "pearl_lower", "pearl_upper", "flags"],
    "policy_days.csv": ["rho", "hospital_id", "day", "size", "mode", "policy", "config", "n_intmed",
                        "reassignments", "welfare", *[f"regret_{m}" for m in METRICS]],
}


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".10g")
    return str(v)


def rho_label(rho) -> str:
    return "none" if rho is None else format(rho, "g")


class ReportWriter:
    def __init__(self, out_dir, data_source: str = "synthetic", split_tag: str | None = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.data_source = data_source
        self.split_tag = split_tag  # debug mode tags every row with its split of origin
        self.written: list[Path] = []

    def header(self, name: str) -> list[str]:
        cols = list(HEADERS[name]) + ["data_source"]
        if self.split_tag is not None:
            cols.append("split")
        return cols

    def write(self, name: str, rows: Iterable[dict], template: str | None = None) -> Path:
        """Write ``rows`` to ``name``; ``template`` borrows another report's header."""
        cols = self.header(template or name)
        path = self.out_dir / name
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for row in rows:
                row = dict(row, data_source=self.data_source)
                if self.split_tag is not None:
                    row["split"] = self.split_tag
                extra = set(row) - set(cols)
                if extra:
                    raise ValueError(f"{name}: unexpected columns {sorted(extra)}")
                wr.writerow([fmt(row.get(c)) for c in cols])
        self.written.append(path)
        return path


# ---------------------------------------------------------------------------
# row builders
# ---------------------------------------------------------------------------

def summary_rows(y, w, z, n_days: int) -> list[dict]:
    rows = [{"variable": "N", "n": len(y), "mean": None, "sd": None, "min": None, "max": None}]
    for name, v in (("Y", y), ("W", w), ("Z", z)):
        v = np.asarray(v, dtype=float)
        rows.append({"variable": name, "n": v.size, "mean": v.mean(), "sd": v.std(ddof=1) if v.size > 1 else 0.0,
                     "min": v.min(), "max": v.max()})
    rows.append({"variable": "days", "n": n_days, "mean": None, "sd": None, "min": None, "max": None})
    return rows


def first_stage_rows(fs, tauW_hat, n_excluded: int) -> list[dict]:
    return [
        {"metric": "r_squared", "value": fs.r_squared, "definition": FIRST_STAGE_FORMULAS["r_squared"]},
        {"metric": "f_statistic", "value": fs.f_statistic, "definition": FIRST_STAGE_FORMULAS["f_statistic"]},
        {"metric": "partial_r_squared", "value": fs.partial_r_squared,
         "definition": FIRST_STAGE_FORMULAS["partial_r_squared"]},
        {"metric": "partial_f_statistic", "value": fs.partial_f_statistic,
         "definition": FIRST_STAGE_FORMULAS["partial_f_statistic"]},
        {"metric": "mean_compliance_score", "value": float(np.mean(tauW_hat)),
         "definition": "mean of E[W|Z=1,X] - E[W|Z=0,X] over test cases"},
        {"metric": "n_excluded_training_cases", "value": n_excluded,
         "definition": "training cases whose pseudo-outcome denominator fell below the floor"},
        {"metric": "n", "value": fs.n, "definition": "test cases"},
    ]


def ate_cate_rows(tau, scores, clusters, dx, busy_bins, bin_labels) -> list[dict]:
    from ..forest import ate

    est, se = ate(tau, scores, clusters)
    rows = [{"scope": "ate", "group": "all", "n": len(tau), "estimate": est, "se": se, "note": ""}]
    for r in cate_by_group(tau, dx, scores):
        rows.append({"scope": "diagnosis_group", **r})
    for r in cate_by_group(tau, busy_bins, scores, order=bin_labels):
        rows.append({"scope": "busy_intmed_bin", **r})
    return rows


def bounds_rows(estimates) -> list[dict]:
    return bounds_summary(estimates)


def bounds_case_rows(case_ids: Sequence[str], estimates) -> list[dict]:
    return [
        {
            "case_id": cid, "tau_hat": e.tau_hat, "sigma2": e.sigma2_hat,
            "freq_lower": e.frequentist.lower, "freq_upper": e.frequentist.upper,
            "manski_lower": e.manski.lower, "manski_upper": e.manski.upper,
            "pearl_lower": e.pearl.lower, "pearl_upper": e.pearl.upper,
            "flags": ";".join(e.flags),
        }
        for cid, e in zip(case_ids, estimates)
    ]


def policy_matrix_rows(ev) -> list[dict]:
    modes = [d.mode for d in ev.days]
    meta = {
        "rho": rho_label(ev.rho), "n_days": len(ev.days), "n_patients": ev.n_patients,
        "n_exact_days": modes.count("exact"), "n_greedy_days": modes.count("greedy"),
        "n_skipped_days": len(ev.skipped),
    }
    return [{**meta, **row} for row in ev.matrix()]


def policy_day_rows(ev) -> list[dict]:
    rows = []
    for d in ev.days:
        for pol in POLICIES:
            ch = d.choices[pol]
            rows.append({
                "rho": rho_label(ev.rho), "hospital_id": d.cohort.hospital_id, "day": d.cohort.day.isoformat(),
                "size": d.cohort.size, "mode": d.mode, "policy": pol,
                "config": "".join(str(b) for b in ch.config.bits), "n_intmed": ch.config.n_intmed,
                "reassignments": ch.reassignments, "welfare": ch.welfare,
                **{f"regret_{m}": ch.regret[m] for m in METRICS},
            })
    return rows


def with_rho(rows, rho) -> list[dict]:
    return [{"rho": rho_label(rho), **r} for r in rows]


def histogram_rows(report, share: bool = False) -> list[dict]:
    rows = report.rows()
    if share:
        rows = [dict(r, overlap_share=report.overlap_share) for r in rows]
    return rows


def propensity_rows(p_hat, w) -> list[dict]:
    return histogram_rows(overlap_report(p_hat, w), share=True)


def compliance_rows(tauW_hat, z) -> list[dict]:
    return histogram_rows(compliance_histogram(tauW_hat, z))


def busyness_bins(values, n_bins: int = 4) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Quantile bins of a busyness column; returns codes, labels and edges."""
    values = np.asarray(values, dtype=float)
    edges = np.unique(np.quantile(values, np.linspace(0, 1, n_bins + 1))) if values.size else np.array([0.0, 0.0])
    if edges.size < 2:
        edges = np.array([edges[0], edges[0]])
    codes = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, max(0, edges.size - 2))
    labels = [f"q{k + 1}" for k in range(max(1, edges.size - 1))]
    return codes, labels, edges


def cate_by_busyness_rows(tau, scores, hospitals, busy) -> list[dict]:
    codes, labels, edges = busyness_bins(busy)
    rows = []
    hospitals = np.asarray(hospitals, dtype=object)
    for h in sorted(set(hospitals.tolist())):
        sel = hospitals == h
        for r in cate_by_group(np.asarray(tau)[sel], [labels[c] for c in codes[sel]],
                               np.asarray(scores)[sel], order=labels):
            k = labels.index(r["group"])
            rows.append({"hospital_id": h, "busy_intmed_bin": r["group"], "bin_low": edges[k],
                         "bin_high": edges[min(k + 1, edges.size - 1)], "n": r["n"], "estimate": r["estimate"],
                         "se": r["se"]})
    return rows
