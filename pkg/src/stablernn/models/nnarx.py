from dataclasses import dataclass, field

import numpy as np

from .base import Dims, RecurrentModel, batched_outer, uniform_init

# activation name -> (psi, psi', Lipschitz constant); every entry has psi(0) = 0
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2, 1.0),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(float), 1.0),
}


@dataclass(eq=False)
class NNARX(RecurrentModel):
    """Neural NARX model written as a normal canonical state-space form.

    The state stacks N regressor blocks z_i = [y_{k-N+i}; u_{k-N-1+i}].  The
    newest block is produced by the one-hidden-layer regression
    ``U0 psi(W1 u + U1 x + b1) + b0`` and the output reads the y part of z_N.
    """

    dims: Dims
    U0: np.ndarray
    b0: np.ndarray
    W1: np.ndarray
    U1: np.ndarray
    b1: np.ndarray
    activation: str = "tanh"
    meta: dict = field(default_factory=dict)

    arch = "nnarx"
    weight_names = ("U0", "b0", "W1", "U1", "b1")
    trainable = weight_names

    def __post_init__(self):
        if self.dims.N is None:
            raise ValueError("NNARX needs the regression horizon dims.N")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        super().__post_init__()

    @property
    def L_psi(self):
        return ACTIVATIONS[self.activation][2]

    @property
    def block(self):
        return self.dims.n_y + self.dims.n_u

    @property
    def state_size(self):
        return self.dims.N * self.block

    def weight_shapes(self):
        nu, ny, nh = self.dims.n_u, self.dims.n_y, self.dims.n_x
        return {
            "U0": (ny, nh),
            "b0": (ny,),
            "W1": (nh, nu),
            "U1": (nh, self.state_size),
            "b1": (nh,),
        }

    @classmethod
    def init(cls, dims, rng, activation="tanh"):
        if dims.N is None:
            raise ValueError("NNARX needs the regression horizon dims.N")
        nu, ny, nh = dims.n_u, dims.n_y, dims.n_x
        fan = dims.N * (ny + nu) + nu
        return cls(
            dims=dims,
            U0=uniform_init(rng, (ny, nh), nh),
            b0=uniform_init(rng, (ny,), nh),
            W1=uniform_init(rng, (nh, nu), fan),
            U1=uniform_init(rng, (nh, dims.N * (ny + nu)), fan),
            b1=uniform_init(rng, (nh,), fan),
            activation=activation,
        )

    def output_slice(self):
        start = (self.dims.N - 1) * self.block
        return slice(start, start + self.dims.n_y)

    def _forward(self, x0, u):
        psi = ACTIVATIONS[self.activation][0]
        B, T, _ = u.shape
        d = self.block
        a_in = u @ self.W1.T + self.b1
        U1_T = self.U1.T.copy()
        U0_T = self.U0.T.copy()
        xs = np.empty((B, T + 1, self.state_size))
        acts = np.empty((B, T, self.dims.n_x))
        hs = np.empty_like(acts)
        x = x0
        xs[:, 0] = x
        for k in range(T):
            a = a_in[:, k] + x @ U1_T
            h = psi(a)
            x = np.concatenate([x[:, d:], h @ U0_T + self.b0, u[:, k]], axis=1)
            acts[:, k] = a
            hs[:, k] = h
            xs[:, k + 1] = x
        y = xs[:, :T, self.output_slice()]
        return y, {"x": xs, "u": u, "a": acts, "h": hs}

    def _backward(self, cache, dy):
        dpsi = ACTIVATIONS[self.activation][1]
        xs, u, acts, hs = cache["x"], cache["u"], cache["a"], cache["h"]
        B, T, _ = u.shape
        d = self.block
        ny = self.dims.n_y
        shift = (self.dims.N - 1) * d
        out = self.output_slice()
        dpre = dpsi(acts)
        dfo = np.empty((B, T, ny))
        das = np.empty_like(acts)
        lam = np.zeros((B, self.state_size))
        for k in range(T - 1, -1, -1):
            df = lam[:, shift: shift + ny]
            da = (df @ self.U0) * dpre[:, k]
            dx = da @ self.U1
            dx[:, d:] += lam[:, :shift]
            dx[:, out] += dy[:, k]
            dfo[:, k] = df
            das[:, k] = da
            lam = dx
        return {
            "U0": batched_outer(dfo, hs),
            "b0": dfo.sum(axis=(0, 1)),
            "W1": batched_outer(das, u),
            "U1": batched_outer(das, xs[:, :T]),
            "b1": das.sum(axis=(0, 1)),
            "x0": lam,
        }

    def window_state(self, y_past, u_past):
        """State built from the last N outputs y_{k-N+1..k} and inputs u_{k-N..k-1}."""
        y_past = np.asarray(y_past, dtype=float).reshape(self.dims.N, self.dims.n_y)
        u_past = np.asarray(u_past, dtype=float).reshape(self.dims.N, self.dims.n_u)
        return np.concatenate([y_past, u_past], axis=1).ravel()
