"""Versioned JSON snapshots of a trained model plus its normalisation and schema."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import flow as fl
from . import latent as lt
from . import oda as od
from .data import NormStats
from .model import SSCFlowModel, TrainConfig

FORMAT = "sscflow-snapshot"
VERSION = 1


class SnapshotError(ValueError):
    pass


def _arr(a: np.ndarray) -> dict:
    # float repr round-trips exactly through JSON
    return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _prior(p: lt.LatentPrior | None):
    return None if p is None else {"means": _arr(p.means), "priors": _arr(p.priors)}


def _unprior(d):
    return None if d is None else lt.LatentPrior(_unarr(d["means"]), _unarr(d["priors"]))


def to_dict(model: SSCFlowModel, stats: NormStats | None = None,
            columns: list[str] | None = None, classes: list[str] | None = None) -> dict:
    layers = []
    for layer in model.flow.layers:
        layers.append({
            "cond": layer.cond.tolist(), "trans": layer.trans.tolist(),
            "nets": {k: [[_arr(W), _arr(b)] for W, b in v] for k, v in layer.nets.items()},
        })
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": asdict(model.config),
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "schema": {"columns": columns, "classes": classes},
        "norm": None if stats is None else {"lo": _arr(stats.lo), "hi": _arr(stats.hi),
                                            "kept": [int(k) for k in stats.kept]},
        "flow": {"hidden": model.flow.hidden, "layers": layers},
        "oda": {"activation": model.oda.activation, "overcomplete": model.oda.overcomplete,
                **{k: _arr(v) for k, v in model.oda.named_arrays().items()}},
        "prior": _prior(model.prior),
        "feature_prior": _prior(model.feature_prior),
    }


def from_dict(d: dict) -> tuple[SSCFlowModel, NormStats | None, dict]:
    if d.get("format") != FORMAT:
        raise SnapshotError("not a model snapshot")
    if d.get("version") != VERSION:
        raise SnapshotError(f"unsupported snapshot version {d.get('version')}")
    layers = []
    for ld in d["flow"]["layers"]:
        nets = {k: [(_unarr(W), _unarr(b)) for W, b in v] for k, v in ld["nets"].items()}
        layers.append(fl.CouplingLayer(np.array(ld["cond"], dtype=np.intp),
                                       np.array(ld["trans"], dtype=np.intp), nets))
    flow = fl.FlowParams(layers, d["flow"]["hidden"])
    o = d["oda"]
    oda = od.OdaParams(_unarr(o["oda.enc.W"]), _unarr(o["oda.enc.b"]), _unarr(o["oda.dec.W"]),
                       _unarr(o["oda.dec.b"]), o["activation"], o["overcomplete"])
    model = SSCFlowModel(flow, oda, _unprior(d["prior"]), TrainConfig.from_dict(d["config"]),
                         d["n_features"], d["n_classes"], _unprior(d["feature_prior"]))
    n = d["norm"]
    stats = None if n is None else NormStats(_unarr(n["lo"]), _unarr(n["hi"]),
                                             np.array(n["kept"], dtype=np.intp))
    return model, stats, d["schema"]


def save(path, model: SSCFlowModel, stats: NormStats | None = None,
         columns=None, classes=None) -> None:
    Path(path).write_text(json.dumps(to_dict(model, stats, columns, classes), sort_keys=True))


def load(path) -> tuple[SSCFlowModel, NormStats | None, dict]:
    return from_dict(json.loads(Path(path).read_text()))
