from dataclasses import dataclass, field

import numpy as np

from .._utils import sigmoid
from .base import Dims, RecurrentModel, batched_outer, uniform_init

_GATES = ("r", "z", "f")


@dataclass(eq=False)
class GRU(RecurrentModel):
    """Gated recurrent unit in state-space form.

    x+ = z*x + (1-z)*tanh(W_r u + U_r (f*x) + b_r),  y = U_o x + b_o,
    with z and f sigmoid gates of (u, x).
    """

    dims: Dims
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    U_o: np.ndarray
    b_o: np.ndarray
    meta: dict = field(default_factory=dict)

    arch = "gru"
    weight_names = ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_f", "U_f", "b_f", "U_o", "b_o")
    trainable = weight_names

    def weight_shapes(self):
        nu, ny, nx = self.dims.n_u, self.dims.n_y, self.dims.n_x
        shapes = {}
        for g in _GATES:
            shapes[f"W_{g}"] = (nx, nu)
            shapes[f"U_{g}"] = (nx, nx)
            shapes[f"b_{g}"] = (nx,)
        shapes["U_o"] = (ny, nx)
        shapes["b_o"] = (ny,)
        return shapes

    @property
    def state_size(self):
        return self.dims.n_x

    @classmethod
    def init(cls, dims, rng):
        nu, nx = dims.n_u, dims.n_x
        w = {}
        for g in _GATES:
            w[f"W_{g}"] = uniform_init(rng, (nx, nu), nu + nx)
            w[f"U_{g}"] = uniform_init(rng, (nx, nx), nu + nx)
            w[f"b_{g}"] = uniform_init(rng, (nx,), nu + nx)
        w["U_o"] = uniform_init(rng, (dims.n_y, nx), nx)
        w["b_o"] = uniform_init(rng, (dims.n_y,), nx)
        return cls(dims=dims, **w)

    def _forward(self, x0, u):
        n = self.dims.n_x
        B, T, _ = u.shape
        W_zf = np.vstack([self.W_z, self.W_f])
        U_zf = np.vstack([self.U_z, self.U_f])
        a_zf_in = u @ W_zf.T + np.concatenate([self.b_z, self.b_f])
        a_r_in = u @ self.W_r.T + self.b_r
        U_zf_T = U_zf.T.copy()
        U_r_T = self.U_r.T.copy()

        xs = np.empty((B, T + 1, n))
        zf = np.empty((B, T, 2 * n))
        rs = np.empty((B, T, n))
        fx = np.empty((B, T, n))
        x = x0
        xs[:, 0] = x
        for k in range(T):
            s = sigmoid(a_zf_in[:, k] + x @ U_zf_T)
            z = s[:, :n]
            fxk = s[:, n:] * x
            r = np.tanh(a_r_in[:, k] + fxk @ U_r_T)
            x = z * x + (1.0 - z) * r
            zf[:, k] = s
            rs[:, k] = r
            fx[:, k] = fxk
            xs[:, k + 1] = x
        y = xs[:, :T] @ self.U_o.T + self.b_o
        return y, {"x": xs, "u": u, "zf": zf, "r": rs, "fx": fx, "U_zf": U_zf}

    def _backward(self, cache, dy):
        n = self.dims.n_x
        xs, u, zf, rs, fx, U_zf = (cache[k] for k in ("x", "u", "zf", "r", "fx", "U_zf"))
        B, T, _ = u.shape
        lam_out = dy @ self.U_o
        da_zf = np.empty((B, T, 2 * n))
        da_r = np.empty((B, T, n))
        lam = np.zeros((B, n))
        U_r = self.U_r
        for k in range(T - 1, -1, -1):
            x = xs[:, k]
            z = zf[:, k, :n]
            f = zf[:, k, n:]
            r = rs[:, k]
            dar = lam * (1.0 - z) * (1.0 - r * r)
            dfx = dar @ U_r
            dz = lam * (x - r) * z * (1.0 - z)
            df = dfx * x * f * (1.0 - f)
            dazf = np.concatenate([dz, df], axis=1)
            lam = lam * z + dfx * f + dazf @ U_zf + lam_out[:, k]
            da_zf[:, k] = dazf
            da_r[:, k] = dar
        g = {
            "W_r": batched_outer(da_r, u),
            "U_r": batched_outer(da_r, fx),
            "b_r": da_r.sum(axis=(0, 1)),
            "U_o": batched_outer(dy, xs[:, :T]),
            "b_o": dy.sum(axis=(0, 1)),
        }
        dW = batched_outer(da_zf, u)
        dU = batched_outer(da_zf, xs[:, :T])
        db = da_zf.sum(axis=(0, 1))
        g["W_z"], g["W_f"] = dW[:n], dW[n:]
        g["U_z"], g["U_f"] = dU[:n], dU[n:]
        g["b_z"], g["b_f"] = db[:n], db[n:]
        g["x0"] = lam
        return g
