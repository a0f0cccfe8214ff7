"""CSV / JSON readers and writers for panels, matrices, models and manifests.

Emitted CSVs start with one ``#`` comment line carrying provenance (tool
version, seed, config hash); the readers here skip it.  Floats are written
with 17 significant digits so that reading a file back reproduces the
in-memory values exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .factor_model import CovarianceBundle, DataError, FittedFactorModel, LinearModel
from .nn import NetworkParams

FLOAT_FORMAT = "%.17g"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(seed: int, config: dict) -> dict:
    return {"tool": "dnnfm", "version": __version__, "seed": seed, "config_hash": config_hash(config)}


def _comment(prov: dict | None) -> str:
    if not prov:
        return ""
    return "# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n"


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_panel(path) -> pd.DataFrame:
    """Read a ``date`` + one-column-per-series CSV; dates stay string labels."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    df = pd.read_csv(path, comment="#", dtype={"date": str}, float_precision="round_trip")
    if "date" not in df.columns:
        raise DataError(f"{path} has no 'date' column")
    df = df.set_index("date")
    df.columns = [str(c) for c in df.columns]
    return df.astype(np.float64)


def check_aligned(returns: pd.DataFrame, factors: pd.DataFrame) -> None:
    """Raise ``DataError`` naming the first date where the two panels disagree."""
    a, b = list(returns.index), list(factors.index)
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            raise DataError(f"date mismatch at row {i}: returns {x!r} vs factors {y!r}")
    if len(a) != len(b):
        longer = a if len(a) > len(b) else b
        raise DataError(f"panels differ in length; first unmatched date {longer[min(len(a), len(b))]!r}")


def write_frame(path, df: pd.DataFrame, prov: dict | None = None, index: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_comment(prov))
        df.to_csv(fh, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_matrix(path, M, ids: Sequence[str], prov: dict | None = None) -> None:
    write_frame(path, pd.DataFrame(np.asarray(M), columns=list(ids)), prov)


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    return [str(c) for c in df.columns], df.to_numpy(dtype=np.float64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not JSON serialisable: {type(x)}")


def model_to_dict(model: FittedFactorModel) -> dict:
    entries = []
    for aid, m in zip(model.asset_ids, model.models):
        d = m.to_dict()
        d["asset_id"] = aid
        entries.append(d)
    return {"mode": model.mode, "factor_dim": model.factor_dim, "models": entries}


def model_from_dict(d: dict) -> FittedFactorModel:
    models, ids = [], []
    for entry in d["models"]:
        ids.append(entry["asset_id"])
        if entry.get("kind") == "linear":
            models.append(LinearModel(np.asarray(entry["coef"], dtype=np.float64)))
        else:
            models.append(NetworkParams.from_dict(entry))
    return FittedFactorModel(d["mode"], models, ids, int(d["factor_dim"]))


BUNDLE_MATRICES = ("sigma_f", "sigma_u_raw", "theta", "sigma_u_th", "sigma_y", "precision_u", "precision_y")


def write_bundle(out_dir, bundle: CovarianceBundle, ids: Sequence[str], prov: dict | None = None) -> dict:
    """Write one CSV per matrix plus ``bundle.json``; returns the sidecar contents."""
    out_dir = Path(out_dir)
    for name in BUNDLE_MATRICES:
        write_matrix(out_dir / f"{name}.csv", getattr(bundle, name), ids, prov)
    sidecar = {
        "J": bundle.J, "n": bundle.n, "omega_n": bundle.omega_n,
        "eig_floor": bundle.eig_floor, "eig_floor_applied": bundle.eig_floor_applied,
        "eig_shift": bundle.eig_shift, "s_n": bundle.s_n,
    }
    if prov:
        sidecar["provenance"] = prov
    write_json(out_dir / "bundle.json", sidecar)
    return sidecar
