"""JSON checkpoints: full model or encoder-only export."""
import json

import numpy as np

from dpdcan.errors import DataError
from dpdcan.model import ModelParams

FORMAT = "dpdcan-ckpt-1"


def _rounded(a):
    a = np.asarray(a)
    if a.ndim == 0:
        return float(f"{float(a):.9g}")
    return [_rounded(x) for x in a]


def to_dict(params: ModelParams, encoder_only=False):
    return {
        "format": FORMAT,
        "dims": params.dims,
        "n_clusters": params.n_clusters,
        "tensors": {name: _rounded(t) for name, t in params.tensors(encoder_only).items()},
    }


def save(path, params: ModelParams, encoder_only=False):
    with open(path, "w") as fh:
        json.dump(to_dict(params, encoder_only), fh, separators=(",", ":"))
        fh.write("\n")


def load(path) -> ModelParams:
    """Read a checkpoint; tensors absent from an encoder-only export stay zero."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise DataError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    dims = doc["dims"]
    params = ModelParams(dims[0], doc["n_clusters"], hidden=dims[1:-1], latent=dims[-1])
    for name, value in doc["tensors"].items():
        if name not in params.by_name:
            raise DataError(f"{path}: unexpected tensor {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != params.by_name[name].shape:
            raise DataError(f"{path}: tensor {name!r} has shape {arr.shape}")
        params[name] = arr
    return params
