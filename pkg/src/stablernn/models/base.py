"""Shared machinery for the four recurrent architectures.

Every model is a dataclass holding its weight arrays.  The numerical core works
on batches: states are ``(B, n_state)``, input sequences ``(B, T, n_u)`` and
outputs ``(B, T, n_y)``.  The public helpers accept unbatched arrays too.
"""
import dataclasses
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from ..exceptions import NonFiniteError, ShapeError


@dataclass(frozen=True)
class Dims:
    """Input, output and hidden widths; ``N`` is the NNARX regression horizon."""

    n_u: int
    n_y: int
    n_x: int
    N: int | None = None

    def __post_init__(self):
        for name in ("n_u", "n_y", "n_x"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.N is not None and (int(self.N) != self.N or self.N < 1):
            raise ValueError(f"N must be a positive integer, got {self.N!r}")


class RecurrentModel:
    """Base class; subclasses are dataclasses with one field per weight array."""

    arch: ClassVar[str] = ""
    weight_names: ClassVar[tuple] = ()
    trainable: ClassVar[tuple] = ()

    def __post_init__(self):
        for name, shape in self.weight_shapes().items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(name, shape, arr.shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- interface for subclasses ------------------------------------------------
    def weight_shapes(self):
        raise NotImplementedError

    @property
    def state_size(self):
        raise NotImplementedError

    def state_box(self):
        """Box (lo, hi) of admissible states, used to draw random initial states."""
        n = self.state_size
        return -np.ones(n), np.ones(n)

    def _forward(self, x0, u):
        raise NotImplementedError

    def _backward(self, cache, dy):
        raise NotImplementedError

    # -- generic API -------------------------------------------------------------
    def weights(self):
        return {name: getattr(self, name) for name in self.weight_names}

    def parameters(self):
        return {name: getattr(self, name) for name in self.trainable}

    def with_parameters(self, **arrays):
        return dataclasses.replace(self, **arrays)

    def n_parameters(self):
        return int(sum(getattr(self, n).size for n in self.trainable))

    def zero_state(self, batch=None):
        shape = (self.state_size,) if batch is None else (batch, self.state_size)
        return np.zeros(shape)

    def _check_inputs(self, x0, u):
        x0 = np.asarray(x0, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if u.ndim == 2:
            u = u[None]
        if u.ndim != 3 or u.shape[-1] != self.dims.n_u:
            raise ShapeError("u", (None, self.dims.n_u), u.shape)
        if u.shape[1] == 0:
            raise ValueError("input sequence is empty")
        if x0.ndim == 1:
            x0 = np.broadcast_to(x0, (u.shape[0], x0.shape[0]))
        if x0.shape != (u.shape[0], self.state_size):
            raise ShapeError("x0", (u.shape[0], self.state_size), x0.shape)
        bad = ~np.isfinite(u).all(axis=(0, 2))
        if bad.any():
            raise NonFiniteError(np.argmax(bad), "input")
        return np.array(x0), u

    def forward(self, x0, u):
        """Batched simulation returning ``(Y, cache)``; ``cache['x']`` holds the states."""
        x0, u = self._check_inputs(x0, u)
        with np.errstate(over="ignore", invalid="ignore"):
            y, cache = self._forward(x0, u)
        xs = cache["x"]
        bad = ~np.isfinite(xs[:, 1:]).all(axis=(0, 2))
        if bad.any():
            raise NonFiniteError(np.argmax(bad))
        return y, cache

    def backward(self, cache, dy):
        """Gradient of ``sum(dy * Y)`` w.r.t. every weight array (plus ``'x0'``)."""
        return self._backward(cache, np.asarray(dy, dtype=np.float64))

    def step(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        single = x.ndim == 1
        if u.shape[-1:] != (self.dims.n_u,):
            raise ShapeError("u", (self.dims.n_u,), u.shape)
        y, cache = self.forward(np.atleast_2d(x), np.atleast_2d(u)[:, None, :])
        x_next, y = cache["x"][:, 1], y[:, 0]
        return (x_next[0], y[0]) if single else (x_next, y)

    def simulate(self, x0, u_seq):
        """Simulate from ``x0``; returns ``(Y, X)`` with ``X[k]`` the state before step k.

        ``X`` has one more entry than ``Y``; its last element is the final state,
        from which a later simulation can resume.
        """
        u_seq = np.asarray(u_seq, dtype=np.float64)
        single = u_seq.ndim == 2
        y, cache = self.forward(x0, u_seq)
        if single:
            return y[0], cache["x"][0]
        return y, cache["x"]


def batched_outer(d, a):
    """sum_{b,t} d[b,t,:]^T a[b,t,:] for (B,T,m) and (B,T,n) arrays."""
    return np.einsum("bti,btj->ij", d, a, optimize=True)


def uniform_init(rng, shape, fan_in):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)
