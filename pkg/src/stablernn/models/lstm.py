from dataclasses import dataclass, field

import numpy as np

from .._utils import sigmoid
from .base import Dims, RecurrentModel, batched_outer, uniform_init

GATES = ("f", "i", "c", "o")
# fused row order: the three sigmoid gates first, then the tanh candidate
_FUSED = ("f", "i", "o", "c")


def gate_names():
    return tuple(f"{k}_{g}" for g in GATES for k in ("W", "U", "b"))


def fuse(w):
    """Stack per-gate blocks into (W, U, b) with rows ordered f, i, o, c."""
    W = np.vstack([w[f"W_{g}"] for g in _FUSED])
    U = np.vstack([w[f"U_{g}"] for g in _FUSED])
    b = np.concatenate([w[f"b_{g}"] for g in _FUSED])
    return W, U, b


def unfuse(dW, dU, db):
    n = db.shape[0] // 4
    out = {}
    for j, g in enumerate(_FUSED):
        sl = slice(j * n, (j + 1) * n)
        out[f"W_{g}"] = dW[sl]
        out[f"U_{g}"] = dU[sl]
        out[f"b_{g}"] = db[sl]
    return out


def cell_forward(U_T, a_in, chi, xi):
    """One LSTM state update given the input contribution ``a_in = W u + b``."""
    n = chi.shape[1]
    a = a_in + xi @ U_T
    s = sigmoid(a[:, : 3 * n])
    g = np.tanh(a[:, 3 * n:])
    chi_n = s[:, :n] * chi + s[:, n: 2 * n] * g
    tc = np.tanh(chi_n)
    xi_n = s[:, 2 * n:] * tc
    return chi_n, xi_n, np.concatenate([s, g], axis=1), tc


def cell_backward(U, gates, tc, chi, lam_chi, lam_xi):
    """Backpropagate dL/dchi+, dL/dxi+ through one update.

    Returns the pre-activation gradient ``da`` (rows f, i, o, c), dL/dchi and
    the recurrent part of dL/dxi.
    """
    n = chi.shape[1]
    f = gates[:, :n]
    i = gates[:, n: 2 * n]
    o = gates[:, 2 * n: 3 * n]
    g = gates[:, 3 * n:]
    dchi_n = lam_chi + lam_xi * o * (1.0 - tc * tc)
    da = np.concatenate(
        [
            dchi_n * chi * f * (1.0 - f),
            dchi_n * g * i * (1.0 - i),
            lam_xi * tc * o * (1.0 - o),
            dchi_n * i * (1.0 - g * g),
        ],
        axis=1,
    )
    return da, dchi_n * f, da @ U


def sequence_forward(fused, chi0, xi0, u):
    """Run one LSTM layer over ``u`` (B, T, n_in); returns the layer cache."""
    W, U, b = fused
    B, T, _ = u.shape
    n = chi0.shape[1]
    a_in = u @ W.T + b
    U_T = U.T.copy()
    chis = np.empty((B, T + 1, n))
    xis = np.empty((B, T + 1, n))
    gates = np.empty((B, T, 4 * n))
    tcs = np.empty((B, T, n))
    chi, xi = chi0, xi0
    chis[:, 0], xis[:, 0] = chi, xi
    for k in range(T):
        chi, xi, gates[:, k], tcs[:, k] = cell_forward(U_T, a_in[:, k], chi, xi)
        chis[:, k + 1], xis[:, k + 1] = chi, xi
    return {"u": u, "chi": chis, "xi": xis, "gates": gates, "tc": tcs}


def sequence_backward(fused, cache, dxi_ext, need_du=False):
    """Backward pass of :func:`sequence_forward`.

    ``dxi_ext[:, k]`` is the gradient reaching xi_k from outside the recurrence
    (output head, upper layers), for k = 0..T.
    """
    W, U, _ = fused
    u, chis, gates, tcs = cache["u"], cache["chi"], cache["gates"], cache["tc"]
    B, T, _ = u.shape
    n = chis.shape[2]
    das = np.empty((B, T, 4 * n))
    lam_chi = np.zeros((B, n))
    lam_xi = dxi_ext[:, T].copy()
    for k in range(T - 1, -1, -1):
        da, lam_chi, dxi = cell_backward(U, gates[:, k], tcs[:, k], chis[:, k], lam_chi, lam_xi)
        lam_xi = dxi + dxi_ext[:, k]
        das[:, k] = da
    grads = unfuse(batched_outer(das, u), batched_outer(das, cache["xi"][:, :T]), das.sum(axis=(0, 1)))
    du = das @ W if need_du else None
    return grads, du, lam_chi, lam_xi


@dataclass(eq=False)
class LSTM(RecurrentModel):
    """Single-layer LSTM with state x = [chi; xi] and affine output y = U_y xi + b_y."""

    dims: Dims
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_i: np.ndarray
    U_i: np.ndarray
    b_i: np.ndarray
    W_c: np.ndarray
    U_c: np.ndarray
    b_c: np.ndarray
    W_o: np.ndarray
    U_o: np.ndarray
    b_o: np.ndarray
    U_y: np.ndarray
    b_y: np.ndarray
    meta: dict = field(default_factory=dict)

    arch = "lstm"
    weight_names = gate_names() + ("U_y", "b_y")
    trainable = weight_names

    def weight_shapes(self):
        nu, ny, nx = self.dims.n_u, self.dims.n_y, self.dims.n_x
        shapes = {}
        for g in GATES:
            shapes[f"W_{g}"] = (nx, nu)
            shapes[f"U_{g}"] = (nx, nx)
            shapes[f"b_{g}"] = (nx,)
        shapes["U_y"] = (ny, nx)
        shapes["b_y"] = (ny,)
        return shapes

    @property
    def state_size(self):
        return 2 * self.dims.n_x

    @classmethod
    def init(cls, dims, rng):
        return cls(dims=dims, **init_lstm_weights(rng, dims.n_u, dims.n_x, dims.n_y))

    def _forward(self, x0, u):
        n = self.dims.n_x
        cache = sequence_forward(fuse(self.weights()), x0[:, :n], x0[:, n:], u)
        cache["x"] = np.concatenate([cache["chi"], cache["xi"]], axis=2)
        y = cache["xi"][:, :-1] @ self.U_y.T + self.b_y
        return y, cache

    def _backward(self, cache, dy):
        B, T, _ = dy.shape
        dxi_ext = np.zeros((B, T + 1, self.dims.n_x))
        dxi_ext[:, :T] = dy @ self.U_y
        grads, _, dchi0, dxi0 = sequence_backward(fuse(self.weights()), cache, dxi_ext)
        grads["U_y"] = batched_outer(dy, cache["xi"][:, :T])
        grads["b_y"] = dy.sum(axis=(0, 1))
        grads["x0"] = np.concatenate([dchi0, dxi0], axis=1)
        return grads


def init_lstm_weights(rng, n_in, n_x, n_out=None, forget_bias=0.0):
    """Uniform fan-in initialisation; ``forget_bias`` is added to ``b_f`` for longer initial memory."""
    w = {}
    for g in GATES:
        w[f"W_{g}"] = uniform_init(rng, (n_x, n_in), n_in + n_x)
        w[f"U_{g}"] = uniform_init(rng, (n_x, n_x), n_in + n_x)
        w[f"b_{g}"] = uniform_init(rng, (n_x,), n_in + n_x)
    w["b_f"] = w["b_f"] + forget_bias
    if n_out is not None:
        w["U_y"] = uniform_init(rng, (n_out, n_x), n_x)
        w["b_y"] = uniform_init(rng, (n_out,), n_x)
    return w
