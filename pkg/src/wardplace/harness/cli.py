"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path

from joblib import parallel_config

from ..bounds import attach_bounds
from ..domain import DataError, case_arrays
from ..forest import load_forest, save_forest
from ..synthdata import read_capacities_csv
from . import reports as R
from .config import ConfigError, RunConfig, load_config
from .pipeline import (
    EXIT_OK,
    Dataset,
    StageError,
    _Stage,
    emit_reports,
    evaluate,
    exit_code_for,
    fit_on_train,
    load_data,
    run_pipeline,
    write_manifest,
)

log = logging.getLogger("wardplace")


def _rho_arg(text: str):
    if text.lower() == "none":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rho must be a number or 'none', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out-dir", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for nuisance learners")
    common.add_argument("--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--cases", type=Path, help="case CSV (defaults to synthetic data)")
    data.add_argument("--occupancy", type=Path, help="occupancy CSV")

    p = argparse.ArgumentParser(prog="wardplace", description="IV forest effects, bounds and ward placement policies",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic data set")
    s.add_argument("--days", type=int)

    f = sub.add_parser("fit", parents=[common, data], help="fit the forest on the training days")
    f.add_argument("--trees", type=int)
    f.add_argument("--min-leaf", type=int)
    f.add_argument("--out", type=Path, help="forest file (default OUT_DIR/forest.npz)")

    b = sub.add_parser("bounds", parents=[common, data], help="per-case bounds for the test days")
    b.add_argument("--forest", type=Path, required=True)
    b.add_argument("--alpha", type=float)
    b.add_argument("--out", type=Path, help="per-case CSV (default OUT_DIR/bounds_per_case.csv)")

    for name, text in (("policy", "solve daily placement policies on the test days"),
                       ("report", "write every report from a fitted forest")):
        q = sub.add_parser(name, parents=[common, data], help=text)
        q.add_argument("--forest", type=Path, required=True)
        q.add_argument("--caps", type=Path, help="capacity CSV")
        q.add_argument("--rho", type=_rho_arg, action="append", help="reassignment share; repeatable; 'none' for no limit")
        q.add_argument("--exact-threshold", type=int)
        q.add_argument("--alpha", type=float)

    sub.add_parser("run", parents=[common], help="full pipeline")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.verbose = cfg.verbose or args.verbose
    if getattr(args, "cases", None) is not None:
        cfg.mode = "ingest"
        cfg.cases_path = args.cases
        cfg.occupancy_path = args.occupancy
    if getattr(args, "days", None) is not None:
        cfg.dgp = replace(cfg.dgp, n_days=args.days)
    if getattr(args, "trees", None) is not None:
        cfg.forest = replace(cfg.forest, n_trees=args.trees)
    if getattr(args, "min_leaf", None) is not None:
        cfg.forest = replace(cfg.forest, min_leaf=args.min_leaf)
    if getattr(args, "caps", None) is not None:
        cfg.capacities_path = args.caps
    if getattr(args, "rho", None):
        cfg.rhos = tuple(args.rho)
    if getattr(args, "exact_threshold", None) is not None:
        cfg.exact_threshold = args.exact_threshold
    if getattr(args, "alpha", None) is not None:
        cfg.alpha = args.alpha
    cfg.validate()
    return cfg


def _split_path(forest_path: Path) -> Path:
    return forest_path.with_suffix(".split.json")


def _write_split(path: Path, split) -> None:
    doc = {
        "seed": split.seed,
        "train": sorted(f"{h}|{d.isoformat()}" for h, d in split.train_days),
        "test": sorted(f"{h}|{d.isoformat()}" for h, d in split.test_days),
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _test_cases(ds: Dataset, forest_path: Path):
    """Cases on the test days recorded at fit time, or every case if no record exists."""
    sp = _split_path(forest_path)
    if not sp.is_file():
        log.warning("no split record next to %s; using every case", forest_path)
        return list(ds.cases)
    test = set()
    for key in json.loads(sp.read_text())["test"]:
        h, d = key.split("|")
        test.add((h, date.fromisoformat(d)))
    out = [c for c in ds.cases if c.day_key in test]
    if not out:
        raise DataError("no cases fall on the recorded test days")
    return out


def _load_fitted(cfg: RunConfig, path: Path):
    ds = load_data(cfg)
    forest = load_forest(path, refit_nuisance=True, expected_columns=ds.columns)
    return ds, forest, _test_cases(ds, path)


def cmd_synth(cfg: RunConfig) -> None:
    with _Stage("synth"):
        out = Path(cfg.out_dir)
        load_data(replace(cfg, mode="synth"), out / "data")
    print(out / "data")


def cmd_fit(cfg: RunConfig, out: Path | None) -> None:
    with _Stage("ingest" if cfg.mode == "ingest" else "synth"):
        ds = load_data(cfg)
    with _Stage("fit"):
        split, train, test, forest = fit_on_train(cfg, ds)
        path = out or Path(cfg.out_dir) / "forest.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_forest(forest, path)
        _write_split(_split_path(path), split)
    print(f"{path}: {len(forest.trees)} trees, {len(train)} training cases, {len(test)} test cases")


def cmd_bounds(cfg: RunConfig, forest_path: Path, out: Path | None) -> None:
    with _Stage("ingest"):
        ds, forest, test = _load_fitted(cfg, forest_path)
    with _Stage("bounds"):
        est = attach_bounds(case_arrays(test)[0], forest, cfg.alpha, cfg.convention)
        writer = R.ReportWriter(out.parent if out else cfg.out_dir, "ingested" if cfg.mode == "ingest" else "synthetic")
        name = out.name if out else "bounds_per_case.csv"
        writer.write(name, R.bounds_case_rows([c.case_id for c in test], est), template="bounds_per_case.csv")
        writer.write("bounds_summary.csv", R.bounds_rows(est))
    print("\n".join(str(p) for p in writer.written))


def cmd_policy(cfg: RunConfig, forest_path: Path, full_report: bool) -> None:
    with _Stage("ingest"):
        ds, forest, test = _load_fitted(cfg, forest_path)
        if cfg.capacities_path is not None:
            ds.caps = read_capacities_csv(cfg.capacities_path)
    with _Stage("policy"):
        evaluations = evaluate(cfg, ds, forest, test)
    with _Stage("report"):
        writer = R.ReportWriter(cfg.out_dir, "ingested" if cfg.mode == "ingest" else "synthetic")
        if full_report:
            emit_reports(cfg, ds, forest, test, evaluations, writer)
            write_manifest(Path(cfg.out_dir), writer.written)
        else:
            matrix, days, util, shares, welfare = [], [], [], [], []
            for ev in evaluations:
                matrix += R.policy_matrix_rows(ev)
                days += R.policy_day_rows(ev)
                util += R.with_rho(ev.utilization(), ev.rho)
                shares += R.with_rho(ev.specialization_shares(), ev.rho)
                welfare += R.with_rho(ev.welfare_by_diagnosis(), ev.rho)
            writer.write("policy_matrix.csv", matrix)
            writer.write("policy_days.csv", days)
            writer.write("utilization.csv", util)
            writer.write("specialization_shares.csv", shares)
            writer.write("welfare_by_diagnosis.csv", welfare)
    print("\n".join(str(p) for p in writer.written))


def cmd_run(cfg: RunConfig) -> None:
    res = run_pipeline(cfg)
    print(res.manifest)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        with parallel_config(n_jobs=cfg.threads):
            _dispatch(args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"error: stage 'config' failed: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_OK


def _dispatch(args, cfg: RunConfig) -> None:
    if args.command == "synth":
        cmd_synth(cfg)
    elif args.command == "fit":
        cmd_fit(cfg, args.out)
    elif args.command == "bounds":
        cmd_bounds(cfg, args.forest, args.out)
    elif args.command in ("policy", "report"):
        cmd_policy(cfg, args.forest, args.command == "report")
    else:
        cmd_run(cfg)

if __name__ == "__main__":
    sys.exit(main())
