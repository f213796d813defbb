"""Human-readable JSON model files.

Floats are written with ``repr`` so a write/read cycle reproduces every weight
bit for bit.
"""
import json

import numpy as np

from ..exceptions import ModelFileError, UnknownArchitectureError
from .base import Dims

FORMAT = "stablernn-model"
VERSION = 1


def encode_array(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def decode_array(obj, name="array"):
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.array(obj["data"], dtype=np.float64)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed array {name!r}: {exc}") from exc


def model_to_dict(model):
    if hasattr(model, "to_dict"):
        body = model.to_dict()
    else:
        body = {
            "architecture": model.arch,
            "dims": {"n_u": model.dims.n_u, "n_y": model.dims.n_y, "n_x": model.dims.n_x, "N": model.dims.N},
            "weights": {name: encode_array(a) for name, a in model.weights().items()},
        }
        if model.arch == "nnarx":
            body["activation"] = model.activation
    body["meta"] = dict(getattr(model, "meta", {}) or {})
    return {"format": FORMAT, "version": VERSION, **body}


def _registry():
    from . import ESN, GRU, LSTM, NNARX
    from ..physics import BlackBoxLSTM, CompositeLSTM

    return {c.arch: c for c in (NNARX, ESN, LSTM, GRU, CompositeLSTM, BlackBoxLSTM)}


def model_from_dict(obj):
    if not isinstance(obj, dict) or obj.get("format") != FORMAT:
        raise ModelFileError("not a stablernn model file")
    arch = obj.get("architecture")
    registry = _registry()
    if arch not in registry:
        raise UnknownArchitectureError(f"unknown architecture tag {arch!r}")
    cls = registry[arch]
    if hasattr(cls, "from_dict"):
        return cls.from_dict(obj)
    try:
        dims = Dims(**obj["dims"])
        weights = {name: decode_array(obj["weights"][name], name) for name in cls.weight_names}
    except KeyError as exc:
        raise ModelFileError(f"missing field {exc}") from exc
    extra = {"activation": obj["activation"]} if arch == "nnarx" else {}
    return cls(dims=dims, meta=obj.get("meta", {}), **weights, **extra)


def dumps(model):
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def loads(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"invalid JSON: {exc.msg}", f"{exc.lineno}:{exc.colno}") from exc
    return model_from_dict(obj)


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(dumps(model))


def load_model(path):
    with open(path) as fh:
        return loads(fh.read())
