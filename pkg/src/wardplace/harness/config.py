"""Run configuration and seed derivation."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import date
from pathlib import Path

from ..domain import CovariateSchema, DataError
from ..forest import ForestParams
from ..synthdata import BaselineFn, DgpSpec, EffectFn

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def default_dgp() -> DgpSpec:
    # heterogeneous effect that shrinks as internal medicine fills up
    return DgpSpec(
        n_days=60,
        patients_per_day=(4, 12),
        effect_fn=EffectFn("busyness", -0.02, {"dx_I2": 0.06, "dx_C1": -0.05, "age": -0.0005}, gamma=0.15),
        baseline_fn=BaselineFn(0.9),
    )


def default_forest() -> ForestParams:
    return ForestParams(n_trees=500, min_leaf=20)


@dataclass
class RunConfig:
    mode: str = "synth"
    cases_path: Path | None = None
    occupancy_path: Path | None = None
    capacities_path: Path | None = None
    dgp: DgpSpec = field(default_factory=default_dgp)
    schema: CovariateSchema | None = None
    split_fraction: float = 0.75
    split_seed: int | None = None  # derived from the master seed when absent
    forest: ForestParams = field(default_factory=default_forest)
    alpha: float = 0.05
    convention: str = "joint"
    exact_threshold: int = 22
    rhos: tuple = (None, 0.2, 0.1)
    greedy_weight: float = 0.5
    out_dir: Path = Path("out")
    seed: int = 0
    threads: int = 1
    verbose: bool = False
    debug: bool = False

    def validate(self) -> None:
        if self.mode not in ("synth", "ingest"):
            raise ConfigError(f"mode must be 'synth' or 'ingest', got {self.mode!r}")
        if self.mode == "ingest":
            if self.cases_path is None:
                raise ConfigError("ingest mode needs data.cases")
            for p in (self.cases_path, self.occupancy_path, self.capacities_path):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"input file not found: {p}")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split.fraction must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ConfigError("bounds.alpha must lie in (0, 1)")
        if self.convention not in ("joint", "conditional"):
            raise ConfigError("bounds.convention must be 'joint' or 'conditional'")
        if self.exact_threshold < 0 or self.exact_threshold > 26:
            raise ConfigError("policy.exact_threshold must lie in [0, 26]")
        for r in self.rhos:
            if r is not None and not 0 <= r <= 1:
                raise ConfigError(f"policy.rho values must lie in [0, 1], got {r}")
        if not 0 <= self.greedy_weight <= 1:
            raise ConfigError("policy.greedy_weight must lie in [0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        try:
            self.forest.validate()
            if self.mode == "synth":
                self.dgp.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def resolved_split_seed(self) -> int:
        return self.split_seed if self.split_seed is not None else stage_seed(self.seed, "split")


def stage_seed(master: int, stage: str) -> int:
    """Stable per-stage seed from the master seed and the stage name."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _take(section: dict, cls, name: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return dict(section)


def _rho(value):
    if value is None or (isinstance(value, str) and value.lower() == "none"):
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"rho must be a number or 'none', got {value!r}") from None


_SECTION_KEYS = {
    "data": {"mode", "cases", "occupancy", "capacities"},
    "schema": {"columns"},
    "split": {"fraction", "seed"},
    "bounds": {"alpha", "convention"},
    "policy": {"exact_threshold", "rho", "greedy_weight"},
    "output": {"dir", "debug"},
}


def config_from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    known = {"data", "synth", "schema", "split", "forest", "bounds", "policy", "output", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name, keys in _SECTION_KEYS.items():
        extra = set(raw.get(name, {})) - keys
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    try:
        if "seed" in raw:
            cfg.seed = int(raw["seed"])
        data = raw.get("data", {})
        cfg.mode = data.get("mode", cfg.mode)
        for key, attr in (("cases", "cases_path"), ("occupancy", "occupancy_path"), ("capacities", "capacities_path")):
            if key in data:
                setattr(cfg, attr, Path(data[key]))
        if "synth" in raw:
            s = dict(raw["synth"])
            kw = {}
            if "effect" in s:
                kw["effect_fn"] = EffectFn(**_take(s.pop("effect"), EffectFn, "synth.effect"))
            if "baseline" in s:
                kw["baseline_fn"] = BaselineFn(**_take(s.pop("baseline"), BaselineFn, "synth.baseline"))
            if "patients_per_day" in s:
                kw["patients_per_day"] = tuple(int(v) for v in s.pop("patients_per_day"))
            if "hospitals" in s:
                kw["hospitals"] = tuple(str(h) for h in s.pop("hospitals"))
            if "start_date" in s:
                v = s.pop("start_date")
                kw["start_date"] = v if isinstance(v, date) else date.fromisoformat(str(v))
            kw.update(_take(s, DgpSpec, "synth"))
            cfg.dgp = replace(cfg.dgp, **kw)
        if "schema" in raw:
            cfg.schema = CovariateSchema(tuple(raw["schema"]["columns"]))
        split = raw.get("split", {})
        cfg.split_fraction = float(split.get("fraction", cfg.split_fraction))
        if "seed" in split:
            cfg.split_seed = int(split["seed"])
        if "forest" in raw:
            cfg.forest = replace(cfg.forest, **_take(raw["forest"], ForestParams, "forest"))
        b = raw.get("bounds", {})
        cfg.alpha = float(b.get("alpha", cfg.alpha))
        cfg.convention = b.get("convention", cfg.convention)
        pol = raw.get("policy", {})
        cfg.exact_threshold = int(pol.get("exact_threshold", cfg.exact_threshold))
        if "rho" in pol:
            vals = pol["rho"] if isinstance(pol["rho"], list) else [pol["rho"]]
            cfg.rhos = tuple(_rho(v) for v in vals)
        cfg.greedy_weight = float(pol.get("greedy_weight", cfg.greedy_weight))
        out = raw.get("output", {})
        if "dir" in out:
            cfg.out_dir = Path(out["dir"])
        cfg.debug = bool(out.get("debug", cfg.debug))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, DataError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(raw)
    # relative input paths resolve against the config file's directory
    root = Path(path).resolve().parent
    for attr in ("cases_path", "occupancy_path", "capacities_path"):
        p = getattr(cfg, attr)
        if p is not None and not p.is_absolute():
            setattr(cfg, attr, root / p)
    return cfg


def describe(cfg: RunConfig) -> dict:
    """JSON-friendly echo of the resolved configuration."""
    from dataclasses import asdict

    d = asdict(cfg.dgp)
    d["start_date"] = cfg.dgp.start_date.isoformat()
    d["capacities"] = None if cfg.dgp.capacities is None else "given"
    return {
        "mode": cfg.mode,
        "cases_path": None if cfg.cases_path is None else Path(cfg.cases_path).name,
        "occupancy_path": None if cfg.occupancy_path is None else Path(cfg.occupancy_path).name,
        "capacities_path": None if cfg.capacities_path is None else Path(cfg.capacities_path).name,
        "synth": d if cfg.mode == "synth" else None,
        "schema": None if cfg.schema is None else list(cfg.schema.columns),
        "split": {"fraction": cfg.split_fraction, "seed": cfg.resolved_split_seed()},
        "forest": asdict(cfg.forest),
        "bounds": {"alpha": cfg.alpha, "convention": cfg.convention},
        "policy": {"exact_threshold": cfg.exact_threshold, "rho": [r if r is not None else "none" for r in cfg.rhos],
                   "greedy_weight": cfg.greedy_weight},
        "seed": cfg.seed,
    }
