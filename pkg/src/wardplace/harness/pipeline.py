"""End-to-end run: data, instrument, split, forest, bounds, policies, reports."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..bounds import DegenerateNeighborhood, attach_bounds
from ..domain import (
    CapacityLimits,
    DataError,
    build_cohorts,
    build_instrument,
    case_arrays,
    split_days,
)
from ..forest import (
    IvForest,
    NoValidNeighborhood,
    first_stage_diagnostics,
    fit_forest,
    iv_scores,
    save_forest,
)
from ..policy import InfeasibleDay, cohort_effects, evaluate_policies
from ..synthdata import (
    generate,
    ingest_csv,
    needs_instrument,
    read_capacities_csv,
    write_capacities_csv,
    write_cases_csv,
    write_occupancy_csv,
    write_truth_csv,
)
from . import reports as R
from .config import ConfigError, RunConfig, describe, stage_seed

log = logging.getLogger("wardplace")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.exc = exc
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.exc)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (NoValidNeighborhood, DegenerateNeighborhood, InfeasibleDay, FloatingPointError,
                        np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_OTHER


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


@dataclass
class Dataset:
    cases: list
    stays: list
    caps: CapacityLimits
    columns: tuple
    truth: object = None


@dataclass
class RunResult:
    out_dir: Path
    files: list = field(default_factory=list)
    manifest: Path | None = None
    forest: IvForest | None = None
    evaluations: list = field(default_factory=list)


def load_data(cfg: RunConfig, data_dir: Path | None = None) -> Dataset:
    """Synthesize or ingest cases; fills the instrument and busyness if needed."""
    if cfg.mode == "synth":
        spec = replace(cfg.dgp, seed=stage_seed(cfg.seed, "synth"))
        cases, stays, truth = generate(spec)
        ds = Dataset(cases, stays, truth.capacities, spec.schema.columns, truth)
        if data_dir is not None:
            data_dir.mkdir(parents=True, exist_ok=True)
            write_cases_csv(data_dir / "cases.csv", cases, spec.schema)
            write_occupancy_csv(data_dir / "occupancy.csv", stays)
            write_truth_csv(data_dir / "truth.csv", truth)
            write_capacities_csv(data_dir / "capacities.csv", truth.capacities)
        return ds
    cases, stays = ingest_csv(cfg.cases_path, cfg.occupancy_path, cfg.schema)
    if not cases:
        raise DataError(f"{cfg.cases_path}: no cases")
    if needs_instrument(cases):
        cases = build_instrument(cases)
    cols = cfg.schema.columns if cfg.schema is not None else None
    if cols is None:
        from ..synthdata import schema_from_csv
        cols = schema_from_csv(cfg.cases_path).columns
    if stays:
        # busyness covariates are recomputed from the occupancy records
        cases = _with_baseline_busyness(cases, stays)
    if cfg.capacities_path is not None:
        caps = read_capacities_csv(cfg.capacities_path)
    elif stays:
        caps = CapacityLimits.from_occupancy(stays)
    else:
        caps = CapacityLimits.unbounded({(c.hospital_id, c.year) for c in cases})
    return Dataset(cases, stays, caps, tuple(cols))


def _with_baseline_busyness(cases, stays):
    from ..domain import baseline_busyness

    base = baseline_busyness(stays)
    out = []
    for c in cases:
        cov = list(c.covariates)
        cov[-2] = float(base.get((c.hospital_id, "intmed", c.admit_day), 0))
        cov[-1] = float(base.get((c.hospital_id, "surg", c.admit_day), 0))
        out.append(replace(c, covariates=tuple(cov)))
    return out


def _clusters(cases):
    return [f"{c.hospital_id}|{c.admit_day.isoformat()}" for c in cases]


def fit_on_train(cfg: RunConfig, ds: Dataset):
    days = sorted({c.day_key for c in ds.cases})
    split = split_days(days, cfg.split_fraction, cfg.resolved_split_seed())
    train, test = split.partition(ds.cases)
    if not train or not test:
        raise DataError("split left the training or test set empty; more days are needed")
    X, y, w, z = case_arrays(train)
    params = replace(cfg.forest, seed=stage_seed(cfg.seed, "forest"))
    forest = fit_forest(X, y, w, z, params, columns=ds.columns, groups=_clusters(train))
    return split, train, test, forest


def split_of(cases, split) -> str:
    """Which side of the day split a set of cases comes from."""
    keys = {c.day_key for c in cases}
    if keys <= split.test_days:
        return "test"
    if keys <= split.train_days:
        return "train"
    return "mixed"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, files) -> Path:
    entries = sorted({Path(f).resolve() for f in files})
    man = {
        "files": [
            {"path": str(p.relative_to(out_dir.resolve())), "sha256": sha256_file(p), "bytes": p.stat().st_size}
            for p in entries
        ]
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def emit_reports(cfg: RunConfig, ds: Dataset, forest: IvForest, test, evaluations, writer: R.ReportWriter,
                 estimates=None) -> list:
    """Write every report and plot-data file; all rows come from test-day cases."""
    X, y, w, z = case_arrays(test)
    nu = forest.nuisances_for(X)
    if estimates is None:
        estimates = attach_bounds(X, forest, cfg.alpha, cfg.convention)
    tau = np.array([e.tau_hat for e in estimates])
    scores = iv_scores(tau, y, w, z, nu, forest.params.denom_floor)
    clusters = _clusters(test)
    dx = [c.diagnosis_group for c in test]
    busy = X[:, -2]
    codes, labels, _ = R.busyness_bins(busy)

    writer.write("summary_stats.csv", R.summary_rows(y, w, z, len(set(clusters))))
    fs = first_stage_diagnostics(w, z, nu)
    writer.write("first_stage.csv", R.first_stage_rows(fs, nu.tauW_hat, forest.n_excluded))
    writer.write("ate_cate.csv", R.ate_cate_rows(tau, scores, clusters, dx, [labels[c] for c in codes], labels))
    writer.write("bounds_summary.csv", R.bounds_rows(estimates))
    matrix, days, util, shares, welfare = [], [], [], [], []
    for ev in evaluations:
        rows = R.policy_matrix_rows(ev)
        matrix += rows
        days += R.policy_day_rows(ev)
        util += R.with_rho(ev.utilization(), ev.rho)
        shares += R.with_rho(ev.specialization_shares(), ev.rho)
        welfare += R.with_rho(ev.welfare_by_diagnosis(), ev.rho)
    writer.write("policy_matrix.csv", matrix)
    for ev in evaluations:
        _write_alias(writer, "policy_matrix.csv", f"policy_matrix_rho-{R.rho_label(ev.rho)}.csv",
                     R.policy_matrix_rows(ev))
    writer.write("policy_days.csv", days)
    writer.write("utilization.csv", util)
    writer.write("specialization_shares.csv", shares)
    writer.write("welfare_by_diagnosis.csv", welfare)

    hospitals = [c.hospital_id for c in test]
    ts = []
    seen = set()
    for c, row in zip(test, X):
        if c.day_key in seen:
            continue
        seen.add(c.day_key)
        ts.append({"hospital_id": c.hospital_id, "day": c.admit_day.isoformat(), "busy_intmed": row[-2],
                   "busy_surg": row[-1], "cohort_size": sum(1 for d in test if d.day_key == c.day_key)})
    ts.sort(key=lambda r: (r["hospital_id"], r["day"]))
    writer.write("busyness_timeseries.csv", ts)
    writer.write("cate_by_busyness.csv", R.cate_by_busyness_rows(tau, scores, hospitals, busy))
    writer.write("propensity_hist.csv", R.propensity_rows(nu.p_hat, w))
    writer.write("compliance_hist.csv", R.compliance_rows(nu.tauW_hat, z))
    writer.write("bounds_per_case.csv", R.bounds_case_rows([c.case_id for c in test], estimates))
    return list(writer.written)


def _write_alias(writer: R.ReportWriter, template: str, name: str, rows) -> None:
    writer.write(name, rows, template=template)


def evaluate(cfg: RunConfig, ds: Dataset, forest: IvForest, test) -> list:
    cohorts = build_cohorts(test, ds.stays) if ds.stays else _cohorts_from_covariates(test)
    per_day = [(c, cohort_effects(c, forest, cfg.alpha, cfg.convention)) for c in cohorts]
    return [evaluate_policies(per_day, ds.caps, rho, cfg.exact_threshold, cfg.greedy_weight) for rho in cfg.rhos]


def _cohorts_from_covariates(cases):
    # without occupancy records the baseline busyness comes from the covariates
    from collections import defaultdict

    from ..domain import DayCohort

    grouped = defaultdict(list)
    for c in cases:
        grouped[c.day_key].append(c)
    return [
        DayCohort(h, d, tuple(m), int(m[0].covariates[-2]), int(m[0].covariates[-1]))
        for (h, d), m in sorted(grouped.items())
    ]


def run_pipeline(cfg: RunConfig) -> RunResult:
    """Run every stage; errors are re-raised as StageError naming the stage."""
    with _Stage("config"):
        cfg.validate()
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
    res = RunResult(out)
    with _Stage("ingest" if cfg.mode == "ingest" else "synth"):
        ds = load_data(cfg, out / "data" if cfg.mode == "synth" else None)
    with _Stage("fit"):
        split, train, test, forest = fit_on_train(cfg, ds)
        save_forest(forest, out / "forest.npz")
        res.forest = forest
    with _Stage("bounds"):
        X_test = case_arrays(test)[0]
        estimates = attach_bounds(X_test, forest, cfg.alpha, cfg.convention)
    with _Stage("policy"):
        res.evaluations = evaluate(cfg, ds, forest, test)
    with _Stage("report"):
        writer = R.ReportWriter(out, "synthetic" if cfg.mode == "synth" else "ingested",
                                split_tag=split_of(test, split) if cfg.debug else None)
        emit_reports(cfg, ds, forest, test, res.evaluations, writer, estimates)
        run_info = out / "run_config.json"
        info = describe(cfg)
        info["split_days"] = {"train": len(split.train_days), "test": len(split.test_days)}
        info["cases"] = {"train": len(train), "test": len(test)}
        run_info.write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
        files = list(writer.written) + [out / "forest.npz", run_info]
        if cfg.mode == "synth":
            files += [out / "data" / n for n in ("cases.csv", "occupancy.csv", "truth.csv", "capacities.csv")]
        res.manifest = write_manifest(out, files)
        res.files = sorted(files)
    return res
