"""Recurrent model families: NNARX, ESN, LSTM and GRU.

Module-level helpers mirror the model methods so code can stay functional:

>>> y_seq, x_seq = simulate(model, model.zero_state(), u_seq)
"""
import numpy as np

from .._utils import substream
from .base import Dims, RecurrentModel
from .esn import ESN, generate_reservoir
from .gru import GRU
from .io import dumps, load_model, loads, save_model
from .lstm import LSTM
from .nnarx import ACTIVATIONS, NNARX

ARCHITECTURES = {"nnarx": NNARX, "esn": ESN, "lstm": LSTM, "gru": GRU}

__all__ = [
    "ACTIVATIONS",
    "ARCHITECTURES",
    "Dims",
    "ESN",
    "GRU",
    "LSTM",
    "NNARX",
    "RecurrentModel",
    "bptt_gradient",
    "dumps",
    "generate_reservoir",
    "init_model",
    "load_model",
    "loads",
    "save_model",
    "simulate",
    "step",
]


def init_model(arch, dims, seed=0, **options):
    """Randomly initialised model; trained weights are uniform in +-1/sqrt(fan_in)."""
    if arch == "esn":
        model = generate_reservoir(dims, seed=seed, **options)
    else:
        cls = ARCHITECTURES[arch]
        model = cls.init(dims, substream(seed, "init"), **options)
    model.meta.update({"seed": int(seed), "init": "uniform_fan_in"})
    return model


def step(model, x, u):
    """One state update: returns ``(x_next, y)`` with ``y`` read from the current state."""
    return model.step(x, u)


def simulate(model, x0, u_seq):
    return model.simulate(x0, u_seq)


def bptt_gradient(model, x0, u_seq, loss_tail):
    """Gradient of ``sum_k loss_tail[k] . y_k`` with respect to every weight.

    ``loss_tail[k]`` is dL/dy_k; washout steps should carry zero vectors.
    Fixed ESN reservoir weights receive zero gradients.  The returned dict is
    keyed like ``model.weights()``.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    loss_tail = np.asarray(loss_tail, dtype=float)
    if loss_tail.shape[:-1] != u_seq.shape[:-1]:
        raise ValueError("loss_tail must have one entry per input step")
    _, cache = model.forward(x0, u_seq)
    if loss_tail.ndim == 2:
        loss_tail = loss_tail[None]
    grads = model.backward(cache, loss_tail)
    return {name: grads[name] for name in model.weight_names}
