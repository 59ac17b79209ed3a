"""First-stage strength and common-support diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FIRST_STAGE_FORMULAS = {
    "r_squared": "R^2 of the OLS regression W ~ 1 + Z",
    "f_statistic": "squared t-statistic of Z in W ~ 1 + Z, equal to R^2 (n - 2) / (1 - R^2)",
    "partial_r_squared": "R^2 of (W - p_hat) ~ 1 + (Z - e_hat), covariates partialled out by the nuisances",
    "partial_f_statistic": "F of the residualised regression, same formula as f_statistic",
}


@dataclass(frozen=True)
class FirstStage:
    r_squared: float
    f_statistic: float
    partial_r_squared: float | None
    partial_f_statistic: float | None
    n: int


def _simple_ols_r2(a: np.ndarray, b: np.ndarray) -> float:
    # R^2 of a ~ 1 + b
    bc = b - b.mean()
    ac = a - a.mean()
    sbb = float(bc @ bc)
    saa = float(ac @ ac)
    if saa == 0:
        return 0.0
    return float((bc @ ac) ** 2 / (sbb * saa))


def _f_from_r2(r2: float, n: int) -> float:
    if r2 >= 1.0:
        return float("inf")
    return r2 * (n - 2) / (1.0 - r2)


def first_stage_diagnostics(w, z, nuisances=None) -> FirstStage:
    """Strength of the instrument for placement.

    Raises ValueError when the instrument has no variance.
    """
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    n = len(w)
    if n < 3 or np.ptp(z) == 0:
        raise ValueError("instrument has zero variance; first stage undefined")
    r2 = _simple_ols_r2(w, z)
    pr2 = pf = None
    if nuisances is not None:
        zr = z - nuisances.e_hat
        if np.ptp(zr) > 0:
            pr2 = _simple_ols_r2(w - nuisances.p_hat, zr)
            pf = _f_from_r2(pr2, n)
    return FirstStage(r2, _f_from_r2(r2, n), pr2, pf, n)


@dataclass(frozen=True)
class HistogramReport:
    edges: np.ndarray
    counts: dict  # arm label -> counts per bin
    overlap_share: float | None = None

    def rows(self, value_name: str = "value") -> list[dict]:
        """Non-empty bins as table rows."""
        out = []
        labels = list(self.counts)
        for b in range(len(self.edges) - 1):
            cells = {k: int(self.counts[k][b]) for k in labels}
            if sum(cells.values()) == 0:
                continue
            row = {"bin_low": float(self.edges[b]), "bin_high": float(self.edges[b + 1])}
            row.update({f"n_{k}": v for k, v in cells.items()})
            out.append(row)
        return out


def _hist(values, arms, labels, edges) -> dict:
    out = {}
    for code, label in labels.items():
        out[label] = np.histogram(values[arms == code], bins=edges)[0]
    return out


def overlap_report(p_hat, w, bins: int = 20, band: tuple[float, float] = (0.05, 0.95)) -> HistogramReport:
    """Binned propensity scores per placement arm.

    The overlap share is the fraction of cases with ``p_hat`` inside ``band``.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    w = np.asarray(w, dtype=int)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = _hist(p_hat, w, {1: "intmed", 0: "surg"}, edges)
    share = float(np.mean((p_hat >= band[0]) & (p_hat <= band[1]))) if p_hat.size else 0.0
    return HistogramReport(edges, counts, share)


def compliance_histogram(tauW_hat, z, bins: int = 20) -> HistogramReport:
    """Binned compliance scores on [-1, 1] per instrument arm."""
    tauW_hat = np.asarray(tauW_hat, dtype=float)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return HistogramReport(edges, _hist(tauW_hat, np.asarray(z, dtype=int), {1: "z1", 0: "z0"}, edges))
