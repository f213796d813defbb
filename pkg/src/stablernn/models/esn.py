from dataclasses import dataclass, field

import numpy as np

from .._utils import sigmoid, spectral_norm
from .base import Dims, RecurrentModel, batched_outer


@dataclass(eq=False)
class ESN(RecurrentModel):
    """Echo state network with output feedback.

    x+ = sigmoid(W_x x + W_u u + W_y y),  y = W_out1 x + W_out2 u_prev.

    The state carries the reservoir followed by a one-slot memory of the
    previous input, so ``step`` keeps the uniform (x, u) -> (x+, y) shape.
    Only ``W_out1`` and ``W_out2`` are trained.
    """

    dims: Dims
    W_x: np.ndarray
    W_u: np.ndarray
    W_y: np.ndarray
    W_out1: np.ndarray
    W_out2: np.ndarray
    meta: dict = field(default_factory=dict)

    arch = "esn"
    weight_names = ("W_x", "W_u", "W_y", "W_out1", "W_out2")
    trainable = ("W_out1", "W_out2")
    fixed = ("W_x", "W_u", "W_y")

    def weight_shapes(self):
        nu, ny, nx = self.dims.n_u, self.dims.n_y, self.dims.n_x
        return {
            "W_x": (nx, nx),
            "W_u": (nx, nu),
            "W_y": (nx, ny),
            "W_out1": (ny, nx),
            "W_out2": (ny, nu),
        }

    @property
    def state_size(self):
        return self.dims.n_x + self.dims.n_u

    @property
    def spectral_norm_Wx(self):
        return spectral_norm(self.W_x)

    def state_box(self):
        nx, nu = self.dims.n_x, self.dims.n_u
        return np.r_[np.zeros(nx), -np.ones(nu)], np.ones(nx + nu)

    def _forward(self, x0, u):
        nx = self.dims.n_x
        B, T, _ = u.shape
        a_in = u @ self.W_u.T
        W_x_T, W_y_T = self.W_x.T.copy(), self.W_y.T.copy()
        W1_T, W2_T = self.W_out1.T.copy(), self.W_out2.T.copy()
        xs = np.empty((B, T + 1, self.state_size))
        ys = np.empty((B, T, self.dims.n_y))
        xs[:, 0] = x0
        r, p = x0[:, :nx], x0[:, nx:]
        for k in range(T):
            y = r @ W1_T + p @ W2_T
            r = sigmoid(r @ W_x_T + a_in[:, k] + y @ W_y_T)
            p = u[:, k]
            ys[:, k] = y
            xs[:, k + 1, :nx] = r
            xs[:, k + 1, nx:] = p
        return ys, {"x": xs, "u": u}

    def _backward(self, cache, dy):
        nx = self.dims.n_x
        xs, u = cache["x"], cache["u"]
        B, T, _ = u.shape
        dys = np.empty_like(dy)
        lam = np.zeros((B, nx))
        lam_p = np.zeros((B, self.dims.n_u))
        for k in range(T - 1, -1, -1):
            r_next = xs[:, k + 1, :nx]
            da = lam * r_next * (1.0 - r_next)
            dyk = dy[:, k] + da @ self.W_y
            lam = da @ self.W_x + dyk @ self.W_out1
            lam_p = dyk @ self.W_out2
            dys[:, k] = dyk
        g = {name: np.zeros_like(getattr(self, name)) for name in self.fixed}
        g["W_out1"] = batched_outer(dys, xs[:, :T, :nx])
        g["W_out2"] = batched_outer(dys, xs[:, :T, nx:])
        g["x0"] = np.concatenate([lam, lam_p], axis=1)
        return g

    def teacher_forced_states(self, u, y_meas, x0=None):
        """Reservoir trajectory when the feedback term uses measured outputs.

        Returns the regressors [x_k, u_{k-1}] for k = 0..T-1, shape (T, n_x + n_u).
        """
        u = np.asarray(u, dtype=float)
        y_meas = np.asarray(y_meas, dtype=float)
        T = u.shape[0]
        x = self.zero_state() if x0 is None else np.asarray(x0, dtype=float)
        nx = self.dims.n_x
        r, p = x[:nx], x[nx:]
        drive = u @ self.W_u.T + y_meas @ self.W_y.T
        out = np.empty((T, self.state_size))
        for k in range(T):
            out[k, :nx], out[k, nx:] = r, p
            r = sigmoid(self.W_x @ r + drive[k])
            p = u[k]
        return out


def generate_reservoir(dims, sparsity=0.8, target_norm=0.9, seed=0, input_scale=0.1, feedback_scale=0.1):
    """Random fixed ESN weights with ``||W_x||_2 == target_norm``.

    Exactly ``round(sparsity * n_x**2)`` entries of ``W_x`` are zero.  ``W_u`` and
    ``W_y`` are uniform in [-1, 1] scaled by ``input_scale`` / ``feedback_scale``.
    The trained output weights start at zero.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    if not 0.0 < target_norm < 1.0:
        raise ValueError(f"target_norm must lie in (0, 1), got {target_norm}")
    rng = np.random.default_rng(seed)
    nx = dims.n_x
    W = rng.uniform(-1.0, 1.0, size=(nx, nx))
    n_zero = int(round(sparsity * nx * nx))
    if n_zero >= nx * nx:
        raise ValueError("sparsity leaves no nonzero reservoir entry")
    W.ravel()[rng.permutation(nx * nx)[:n_zero]] = 0.0
    W *= target_norm / spectral_norm(W)
    return ESN(
        dims=dims,
        W_x=W,
        W_u=input_scale * rng.uniform(-1.0, 1.0, size=(nx, dims.n_u)),
        W_y=feedback_scale * rng.uniform(-1.0, 1.0, size=(nx, dims.n_y)),
        W_out1=np.zeros((dims.n_y, nx)),
        W_out2=np.zeros((dims.n_y, dims.n_u)),
        meta={"seed": int(seed), "sparsity": float(sparsity), "target_norm": float(target_norm)},
    )
