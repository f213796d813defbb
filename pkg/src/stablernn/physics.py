"""Physics-structured composite LSTM and its black-box baseline.

The composite mirrors the plant: one LSTM block per vessel, each producing
that vessel's four outputs [H, x_A, x_B, T].  Block i is fed its own vessel
inputs plus the previous-step outputs of the upstream vessel, following the
material flow 1 -> 2 -> 3 with the recycle 3 -> 1.  Mass fractions go
through a logistic output so they stay inside (0, 1).

The baseline is a plain three-layer LSTM stack with the same number of units
and a linear output head.
"""
import csv
import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from ._utils import sigmoid
from .exceptions import ModelFileError, ShapeError
from .models.base import Dims, RecurrentModel, batched_outer
from .models.io import decode_array, encode_array
from .models.lstm import cell_backward, cell_forward, fuse, gate_names, init_lstm_weights, unfuse
from .models.lstm import sequence_backward, sequence_forward
from .plant import INPUT_NAMES, STATE_NAMES

BLOCK_WIDTH = 4
# per-vessel output activation: level, x_A, x_B, temperature
SIGMA = ("identity", "sigmoid", "sigmoid", "identity")


@dataclass(frozen=True)
class Port:
    """Input wiring of one block: plant inputs it reads and the block feeding it."""

    inputs: tuple
    upstream: int

    def to_dict(self):
        return {"inputs": list(self.inputs), "upstream": self.upstream}


# vessel input groups: [Q1, F_f1], [Q2, F_f2], [Q3, F_R]; block 1 is fed by
# block 3 through the recycle
DEFAULT_WIRING = (Port((0, 3), 2), Port((1, 4), 0), Port((2, 5), 1))
_BLOCK_WEIGHTS = gate_names() + ("U_y", "b_y")


def _check_wiring(wiring, n_u):
    if len(wiring) != 3:
        raise ShapeError("wiring", (3,), (len(wiring),))
    for i, port in enumerate(wiring):
        if not 0 <= port.upstream < 3 or port.upstream == i:
            raise ValueError(f"block {i + 1}: invalid upstream block {port.upstream + 1}")
        for j in port.inputs:
            if not 0 <= j < n_u:
                raise ValueError(f"block {i + 1}: input port reads channel {j}, but u has {n_u} channels")


def _block_shapes(n_in, n_x):
    shapes = {}
    for g in ("f", "i", "c", "o"):
        shapes[f"W_{g}"] = (n_x, n_in)
        shapes[f"U_{g}"] = (n_x, n_x)
        shapes[f"b_{g}"] = (n_x,)
    shapes["U_y"] = (BLOCK_WIDTH, n_x)
    shapes["b_y"] = (BLOCK_WIDTH,)
    return shapes


def _freeze(blocks, shapes):
    out = []
    for i, blk in enumerate(blocks):
        frozen = {}
        for name, shape in shapes[i].items():
            if name not in blk:
                raise ModelFileError(f"block {i + 1}: missing weight {name!r}")
            arr = np.array(blk[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"block{i + 1}.{name}", shape, arr.shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"block{i + 1}.{name} has non-finite entries")
            arr.setflags(write=False)
            frozen[name] = arr
        out.append(frozen)
    return tuple(out)


class _MultiBlock(RecurrentModel):
    """Shared parameter plumbing for models made of named LSTM blocks."""

    def weights(self):
        return {f"block{i + 1}.{k}": v for i, blk in enumerate(self.blocks) for k, v in blk.items()}

    def parameters(self):
        return self.weights()

    def with_parameters(self, **arrays):
        blocks = [dict(b) for b in self.blocks]
        for key, arr in arrays.items():
            head, _, name = key.partition(".")
            if not head.startswith("block") or name not in blocks[int(head[5:]) - 1]:
                raise KeyError(key)
            blocks[int(head[5:]) - 1][name] = arr
        return dataclasses.replace(self, blocks=blocks)

    def n_parameters(self):
        return int(sum(v.size for v in self.weights().values()))

    def _dims_dict(self):
        return {"n_u": self.dims.n_u, "n_y": self.dims.n_y, "n_x": self.dims.n_x, "N": None}

    def _encoded_blocks(self):
        return [{k: encode_array(v) for k, v in blk.items()} for blk in self.blocks]

    @staticmethod
    def _decoded_blocks(obj):
        try:
            return [{k: decode_array(v, k) for k, v in blk.items()} for blk in obj["blocks"]]
        except (KeyError, TypeError, AttributeError) as exc:
            raise ModelFileError(f"malformed blocks section: {exc}") from exc


@dataclass(eq=False)
class CompositeLSTM(_MultiBlock):
    """Three interconnected LSTM blocks, one per vessel.

    State layout: ``[chi_1, xi_1, chi_2, xi_2, chi_3, xi_3, p]`` where ``p``
    (12 entries) stores the previous-step outputs used by the wiring.
    ``y_scale``/``y_offset`` map a logistic mass fraction c into the
    normalised output space as ``y = y_scale c + y_offset`` (sigmoid channels
    only).
    """

    dims: Dims
    blocks: tuple
    wiring: tuple = DEFAULT_WIRING
    y_scale: np.ndarray = None
    y_offset: np.ndarray = None
    meta: dict = field(default_factory=dict)

    arch = "composite"

    def __post_init__(self):
        if self.dims.n_y != 3 * BLOCK_WIDTH:
            raise ShapeError("n_y", 3 * BLOCK_WIDTH, self.dims.n_y)
        self.wiring = tuple(p if isinstance(p, Port) else Port(tuple(p["inputs"]), int(p["upstream"]))
                            for p in self.wiring)
        _check_wiring(self.wiring, self.dims.n_u)
        shapes = [_block_shapes(self.block_inputs(i), self.dims.n_x) for i in range(3)]
        self.blocks = _freeze(self.blocks, shapes)
        ny = self.dims.n_y
        self.y_scale = np.ones(ny) if self.y_scale is None else np.asarray(self.y_scale, dtype=float)
        self.y_offset = np.zeros(ny) if self.y_offset is None else np.asarray(self.y_offset, dtype=float)
        for name in ("y_scale", "y_offset"):
            if getattr(self, name).shape != (ny,):
                raise ShapeError(name, (ny,), getattr(self, name).shape)
        self._sig = np.tile(np.array([s == "sigmoid" for s in SIGMA]), 3)

    def block_inputs(self, i):
        return len(self.wiring[i].inputs) + BLOCK_WIDTH

    @property
    def state_size(self):
        return 6 * self.dims.n_x + self.dims.n_y

    def state_box(self):
        lo, hi = super().state_box()
        lo[-self.dims.n_y:], hi[-self.dims.n_y:] = -1.0, 1.0
        return lo, hi

    @classmethod
    def init(cls, rng, n_x=10, n_u=6, wiring=DEFAULT_WIRING, y_scale=None, y_offset=None, forget_bias=0.0):
        blocks = [init_lstm_weights(rng, len(p.inputs) + BLOCK_WIDTH, n_x, BLOCK_WIDTH, forget_bias) for p in wiring]
        return cls(Dims(n_u, 3 * BLOCK_WIDTH, n_x), blocks, wiring, y_scale, y_offset)

    def zeroed(self):
        return self.with_parameters(**{k: np.zeros_like(v) for k, v in self.weights().items()})

    def concentration_map(self, normalizer):
        """Copy with the sigmoid channels mapped through a fitted output normaliser."""
        scale = np.where(self._sig, normalizer.scale_, 1.0)
        offset = np.where(self._sig, normalizer.min_, 0.0)
        return dataclasses.replace(self, y_scale=scale, y_offset=offset)

    def _head(self, xi, blk, i):
        g = xi @ blk["U_y"].T + blk["b_y"]
        sl = slice(BLOCK_WIDTH * i, BLOCK_WIDTH * (i + 1))
        sig, s, m = self._sig[sl], self.y_scale[sl], self.y_offset[sl]
        c = sigmoid(g)
        y = np.where(sig, s * c + m, g)
        dy_dg = np.where(sig, s * c * (1.0 - c), 1.0)
        return y, dy_dg

    def _forward(self, x0, u, ablate=()):
        B, T, _ = u.shape
        n, ny = self.dims.n_x, self.dims.n_y
        fused = [fuse(blk) for blk in self.blocks]
        U_T = [f[1].T.copy() for f in fused]
        chi = [x0[:, 2 * n * i: 2 * n * i + n] for i in range(3)]
        xi = [x0[:, 2 * n * i + n: 2 * n * (i + 1)] for i in range(3)]
        p = x0[:, 6 * n:]
        xs = np.empty((B, T + 1, self.state_size))
        xs[:, 0] = x0
        ys = np.empty((B, T, ny))
        dys = np.empty((B, T, ny))
        gates = np.empty((3, B, T, 4 * n))
        tcs = np.empty((3, B, T, n))
        uts = [np.empty((B, T, self.block_inputs(i))) for i in range(3)]
        for k in range(T):
            for i in range(3):
                sl = slice(BLOCK_WIDTH * i, BLOCK_WIDTH * (i + 1))
                ys[:, k, sl], dys[:, k, sl] = self._head(xi[i], self.blocks[i], i)
            for i, port in enumerate(self.wiring):
                up = port.upstream
                feed = np.zeros((B, BLOCK_WIDTH)) if i in ablate else p[:, BLOCK_WIDTH * up: BLOCK_WIDTH * (up + 1)]
                ut = np.concatenate([u[:, k, list(port.inputs)], feed], axis=1)
                uts[i][:, k] = ut
                W, _, b = fused[i]
                chi[i], xi[i], gates[i, :, k], tcs[i, :, k] = cell_forward(U_T[i], ut @ W.T + b, chi[i], xi[i])
            p = ys[:, k]
            xs[:, k + 1] = np.concatenate([c for pair in zip(chi, xi) for c in pair] + [p], axis=1)
        cache = {"x": xs, "gates": gates, "tc": tcs, "ut": uts, "dydg": dys}
        return ys, cache

    def _backward(self, cache, dy):
        xs, gates, tcs, uts, dydg = cache["x"], cache["gates"], cache["tc"], cache["ut"], cache["dydg"]
        B, T, ny = dy.shape
        n = self.dims.n_x
        fused = [fuse(blk) for blk in self.blocks]
        lam_chi = [np.zeros((B, n)) for _ in range(3)]
        lam_xi = [np.zeros((B, n)) for _ in range(3)]
        lam_p = np.zeros((B, ny))
        das = [np.empty((B, T, 4 * n)) for _ in range(3)]
        dgs = np.empty((B, T, ny))
        for k in range(T - 1, -1, -1):
            # x_{k+1} = cell(x_k, [u_k, p_k]); p_{k+1} = y_k = head(xi_k)
            new_p = np.zeros((B, ny))
            for i, port in enumerate(self.wiring):
                chi_k = xs[:, k, 2 * n * i: 2 * n * i + n]
                da, lam_chi[i], dxi = cell_backward(fused[i][1], gates[i, :, k], tcs[i, :, k], chi_k,
                                                    lam_chi[i], lam_xi[i])
                das[i][:, k] = da
                up = port.upstream
                new_p[:, BLOCK_WIDTH * up: BLOCK_WIDTH * (up + 1)] += (da @ fused[i][0])[:, len(port.inputs):]
                lam_xi[i] = dxi
            dg = (dy[:, k] + lam_p) * dydg[:, k]
            dgs[:, k] = dg
            for i in range(3):
                sl = slice(BLOCK_WIDTH * i, BLOCK_WIDTH * (i + 1))
                lam_xi[i] = lam_xi[i] + dg[:, sl] @ self.blocks[i]["U_y"]
            lam_p = new_p
        grads = {}
        for i in range(3):
            xi_seq = xs[:, :T, 2 * n * i + n: 2 * n * (i + 1)]
            g = unfuse(batched_outer(das[i], uts[i]), batched_outer(das[i], xi_seq), das[i].sum(axis=(0, 1)))
            sl = slice(BLOCK_WIDTH * i, BLOCK_WIDTH * (i + 1))
            g["U_y"] = batched_outer(dgs[:, :, sl], xi_seq)
            g["b_y"] = dgs[:, :, sl].sum(axis=(0, 1))
            grads.update({f"block{i + 1}.{k}": v for k, v in g.items()})
        grads["x0"] = np.concatenate([c for pair in zip(lam_chi, lam_xi) for c in pair] + [lam_p], axis=1)
        return grads

    def simulate_ablated(self, x0, u, blocks=(0,)):
        """Simulate with the upstream feed of ``blocks`` replaced by zeros."""
        x0, u = self._check_inputs(x0, u)
        return self._forward(x0, u, ablate=tuple(blocks))[0]

    def concentrations(self, y):
        """Physical mass fractions (..., 3, 2) recovered from normalised outputs."""
        y = np.asarray(y, dtype=float)
        c = (y - self.y_offset) / self.y_scale
        return c[..., self._sig].reshape(y.shape[:-1] + (3, 2))

    def to_dict(self):
        return {
            "architecture": self.arch,
            "dims": self._dims_dict(),
            "blocks": self._encoded_blocks(),
            "wiring": [
                {"block": i + 1, **p.to_dict(),
                 "input_names": [INPUT_NAMES[j] for j in p.inputs],
                 "source_channels": list(STATE_NAMES[BLOCK_WIDTH * p.upstream: BLOCK_WIDTH * (p.upstream + 1)])}
                for i, p in enumerate(self.wiring)
            ],
            "output_activation": list(SIGMA),
            "y_scale": encode_array(self.y_scale),
            "y_offset": encode_array(self.y_offset),
        }

    @classmethod
    def from_dict(cls, obj):
        try:
            wiring = tuple(Port(tuple(w["inputs"]), int(w["upstream"])) for w in obj["wiring"])
            return cls(Dims(**obj["dims"]), cls._decoded_blocks(obj), wiring,
                       decode_array(obj["y_scale"]), decode_array(obj["y_offset"]), obj.get("meta", {}))
        except KeyError as exc:
            raise ModelFileError(f"missing field {exc}") from exc


def consistency_penalty(model, weight=0.05):
    """Output penalty ``w * mean_k sum_vessels max(x_A + x_B - 1, 0)`` for training.

    Returns a callable ``(Y, T_w) -> (value, dY)`` with the same normalisation
    as the MSE term.
    """
    if weight < 0:
        raise ValueError("consistency weight must be >= 0")
    sig = model._sig

    def penalty(y, T_w):
        B, T, _ = y.shape
        c = model.concentrations(y)
        excess = c.sum(axis=-1) - 1.0
        active = excess > 0
        active[:, :T_w] = False
        scale = weight / (B * (T - T_w))
        value = float(np.sum(np.where(active, excess, 0.0)) * scale)
        dc = np.repeat(active[..., None] * scale, 2, axis=-1).reshape(B, T, -1)
        dy = np.zeros_like(y)
        dy[..., sig] = dc / model.y_scale[sig]
        return value, dy

    return penalty


def composite_loss(model, sequences, T_w, weight=0.05):
    """MSE plus the weighted concentration-consistency hinge."""
    from .data import stack
    from .training import squared_error

    u, y = stack(sequences)
    y_hat, _ = model.forward(model.zero_state(len(sequences)), u)
    return squared_error(y_hat, y, T_w)[0] + consistency_penalty(model, weight)(y_hat, T_w)[0]


@dataclass(eq=False)
class BlackBoxLSTM(_MultiBlock):
    """Three stacked LSTM layers with a linear head on the top layer's hidden state.

    Layer l is fed the freshly updated hidden state of layer l - 1; the output
    at step k reads the top hidden state before the update, as in the
    single-layer LSTM.
    """

    dims: Dims
    blocks: tuple
    meta: dict = field(default_factory=dict)

    arch = "blackbox"
    n_layers = 3

    def __post_init__(self):
        n, nu, ny = self.dims.n_x, self.dims.n_u, self.dims.n_y
        shapes = []
        for layer in range(self.n_layers):
            s = _block_shapes(nu if layer == 0 else n, n)
            del s["U_y"], s["b_y"]
            shapes.append(s)
        shapes[-1]["U_y"] = (ny, n)
        shapes[-1]["b_y"] = (ny,)
        self.blocks = _freeze(self.blocks, shapes)

    @property
    def state_size(self):
        return 2 * self.n_layers * self.dims.n_x

    @classmethod
    def init(cls, rng, n_x=10, n_u=6, n_y=12, forget_bias=0.0):
        blocks = [init_lstm_weights(rng, n_u if l == 0 else n_x, n_x, n_y if l == cls.n_layers - 1 else None,
                                    forget_bias)
                  for l in range(cls.n_layers)]
        return cls(Dims(n_u, n_y, n_x), blocks)

    def _forward(self, x0, u):
        n = self.dims.n_x
        caches, inp = [], u
        for l, blk in enumerate(self.blocks):
            c = sequence_forward(fuse(blk), x0[:, 2 * n * l: 2 * n * l + n], x0[:, 2 * n * l + n: 2 * n * (l + 1)], inp)
            caches.append(c)
            inp = c["xi"][:, 1:]
        top = self.blocks[-1]
        y = caches[-1]["xi"][:, :-1] @ top["U_y"].T + top["b_y"]
        xs = np.concatenate([a for c in caches for a in (c["chi"], c["xi"])], axis=2)
        return y, {"x": xs, "layers": caches}

    def _backward(self, cache, dy):
        caches = cache["layers"]
        B, T, _ = dy.shape
        n = self.dims.n_x
        top = self.blocks[-1]
        dxi_ext = np.zeros((B, T + 1, n))
        dxi_ext[:, :T] = dy @ top["U_y"]
        grads, x0_parts = {}, []
        for l in range(self.n_layers - 1, -1, -1):
            g, du, dchi0, dxi0 = sequence_backward(fuse(self.blocks[l]), caches[l], dxi_ext, need_du=l > 0)
            grads.update({f"block{l + 1}.{k}": v for k, v in g.items()})
            x0_parts.insert(0, (dchi0, dxi0))
            if l > 0:
                dxi_ext = np.zeros((B, T + 1, n))
                dxi_ext[:, 1:] = du
        grads[f"block{self.n_layers}.U_y"] = batched_outer(dy, caches[-1]["xi"][:, :T])
        grads[f"block{self.n_layers}.b_y"] = dy.sum(axis=(0, 1))
        grads["x0"] = np.concatenate([a for pair in x0_parts for a in pair], axis=1)
        return grads

    def to_dict(self):
        return {"architecture": self.arch, "dims": self._dims_dict(), "blocks": self._encoded_blocks()}

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(Dims(**obj["dims"]), cls._decoded_blocks(obj), obj.get("meta", {}))
        except KeyError as exc:
            raise ModelFileError(f"missing field {exc}") from exc


def _train_output_mean(dataset):
    return np.concatenate([q.y for q in dataset.train]).mean(axis=0)


# forget-gate bias at initialisation for the benchmark networks: the plant's
# outputs decorrelate over 50-100 samples, and f ~ 0.95 lets training start
# from a long memory instead of having to discover it
FORGET_BIAS = 3.0


def build_composite(dataset, seed=0, n_x=10, forget_bias=FORGET_BIAS):
    """Composite with random weights and output biases at the training-data mean.

    Sigmoid channels get the logit of the mean physical mass fraction, so the
    initial prediction is the mean trajectory, as for :func:`build_blackbox`.
    """
    from ._utils import substream

    model = CompositeLSTM.init(substream(seed, "init"), n_x=n_x, n_u=dataset.u_norm.n_features_in_,
                               forget_bias=forget_bias)
    model = model.concentration_map(dataset.y_norm)
    y_mean = _train_output_mean(dataset)
    c = np.clip((y_mean - model.y_offset) / model.y_scale, 1e-6, 1 - 1e-6)
    target = np.where(model._sig, np.log(c / (1.0 - c)), y_mean)
    return model.with_parameters(**{f"block{i + 1}.b_y": target[BLOCK_WIDTH * i: BLOCK_WIDTH * (i + 1)]
                                    for i in range(3)})


def build_blackbox(dataset, seed=0, n_x=10, forget_bias=FORGET_BIAS):
    from ._utils import substream

    model = BlackBoxLSTM.init(substream(seed, "init"), n_x=n_x, n_u=dataset.u_norm.n_features_in_,
                              n_y=dataset.y_norm.n_features_in_, forget_bias=forget_bias)
    return model.with_parameters(**{f"block{BlackBoxLSTM.n_layers}.b_y": _train_output_mean(dataset)})


def train_composite(dataset, config, seed=0, weight=0.05, n_x=10):
    from .training import train

    model = build_composite(dataset, seed, n_x)
    return train(model, dataset, config, output_penalty=consistency_penalty(model, weight))


def train_blackbox(dataset, config, seed=0, n_x=10):
    from .training import train

    return train(build_blackbox(dataset, seed, n_x), dataset, config)


@dataclass
class Comparison:
    channels: tuple
    fits: dict  # model label -> per-channel FIT array

    def overall(self, label):
        return float(np.mean(self.fits[label]))

    def to_csv(self):
        labels = list(self.fits)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel"] + labels)
        for j, ch in enumerate(self.channels):
            w.writerow([ch] + [f"{self.fits[l][j]:.6f}" for l in labels])
        w.writerow(["overall"] + [f"{self.overall(l):.6f}" for l in labels])
        return buf.getvalue()


def compare(models, sequences, T_w, mode="pointwise"):
    """Per-channel FIT of each labelled model on the same sequences."""
    from .training import fit_metric

    fits = {label: fit_metric(m, sequences, T_w, mode=mode).per_channel for label, m in models.items()}
    return Comparison(STATE_NAMES, fits)
