"""Forest persistence.

File layout (numpy ``.npz``, no pickled objects):

- ``header``: JSON string with ``format``, ``version``, the forest
  hyperparameters, ``columns`` and ``schema_hash``.
- ``X``, ``y``, ``w``, ``z``: training data; predictions are weighted
  averages over these cases.
- ``m_hat``, ``e_hat``, ``p_hat``, ``tauW_hat``: cross-fitted nuisances.
- ``tree_sizes``, ``member_sizes``, ``split_sizes``: per-tree lengths used to
  cut the concatenated arrays below.
- ``feature``, ``threshold``, ``left``, ``right``, ``leaf_start``,
  ``leaf_count``, ``leaf_est``: concatenated node arrays.
- ``members``, ``split_idx``, ``est_idx``: concatenated index arrays.

Nuisance learners are not stored; ``load_forest`` refits them from the
stored training data when asked.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict

import numpy as np

from .forest import ForestParams, IvForest, IvTree
from .nuisance import NuisanceEstimates, fit_models

FORMAT = "wardplace-ivforest"
VERSION = 1

_NODE = ("feature", "threshold", "left", "right", "leaf_start", "leaf_count", "leaf_est")


def schema_hash(columns) -> str:
    return hashlib.sha256("\n".join(columns).encode()).hexdigest()[:16]


def save_forest(forest: IvForest, path) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "params": asdict(forest.params),
        "columns": list(forest.columns),
        "schema_hash": schema_hash(forest.columns),
    }
    t = forest.trees
    arrays = {
        "header": np.array(json.dumps(header, sort_keys=True)),
        "X": forest.X, "y": forest.y, "w": forest.w, "z": forest.z,
        "m_hat": forest.nuisances.m_hat, "e_hat": forest.nuisances.e_hat,
        "p_hat": forest.nuisances.p_hat, "tauW_hat": forest.nuisances.tauW_hat,
        "tree_sizes": np.array([len(x.feature) for x in t], dtype=np.int64),
        "member_sizes": np.array([len(x.members) for x in t], dtype=np.int64),
        "split_sizes": np.array([len(x.split_idx) for x in t], dtype=np.int64),
        "est_sizes": np.array([len(x.est_idx) for x in t], dtype=np.int64),
        "members": np.concatenate([x.members for x in t]),
        "split_idx": np.concatenate([x.split_idx for x in t]),
        "est_idx": np.concatenate([x.est_idx for x in t]),
    }
    for name in _NODE:
        arrays[name] = np.concatenate([getattr(x, name) for x in t])
    _write_npz(path, arrays)


def _write_npz(path, arrays: dict) -> None:
    # np.savez stamps members with the current time; fixed stamps keep files reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def _cut(arr, sizes):
    return np.split(arr, np.cumsum(sizes)[:-1])


def load_forest(path, *, refit_nuisance: bool = False, expected_columns=None) -> IvForest:
    """Read a forest written by ``save_forest``.

    ``expected_columns`` is checked against the stored schema hash.
    """
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not a forest file")
        if header.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported forest file version {header.get('version')}")
        if expected_columns is not None and schema_hash(expected_columns) != header["schema_hash"]:
            raise ValueError(f"{path}: covariate schema does not match the fitted forest")
        d = {k: data[k] for k in data.files if k != "header"}
    params = ForestParams(**header["params"])
    node = {name: _cut(d[name], d["tree_sizes"]) for name in _NODE}
    members = _cut(d["members"], d["member_sizes"])
    split_idx = _cut(d["split_idx"], d["split_sizes"])
    est_idx = _cut(d["est_idx"], d["est_sizes"])
    trees = [
        IvTree(*(node[name][b] for name in _NODE), members[b], split_idx[b], est_idx[b])
        for b in range(len(d["tree_sizes"]))
    ]
    nu = NuisanceEstimates(d["m_hat"], d["e_hat"], d["p_hat"], d["tauW_hat"])
    models = None
    if refit_nuisance:
        models = fit_models(d["X"], d["y"], d["w"], d["z"], seed=params.seed,
                            n_trees=params.nuisance_trees, min_leaf=params.nuisance_min_leaf)
    return IvForest(trees, d["X"], d["y"], d["w"], d["z"], nu, params, models=models,
                    columns=tuple(header["columns"]))
