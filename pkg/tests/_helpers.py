"""Shared oracles for the test suite."""
import numpy as np

from stablernn.models import init_model
from stablernn.models.base import Dims


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def small_model(arch, seed=0, n_u=2, n_y=2, n_x=3, N=2, **kw):
    dims = Dims(n_u, n_y, n_x, N if arch == "nnarx" else None)
    return init_model(arch, dims, seed=seed, **kw)


def linear_loss(model, x0, u, w):
    y, _ = model.forward(x0, u)
    return float(np.sum(w * y))


def fd_gradients(model, x0, u, w, h=1e-5, names=None):
    """Central differences of sum(w * Y) for every trainable coordinate."""
    out = {}
    params = model.parameters()
    for name in names or params:
        p = params[name]
        g = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            a, b = p.copy(), p.copy()
            a[idx] += h
            b[idx] -= h
            g[idx] = (linear_loss(model.with_parameters(**{name: a}), x0, u, w)
                      - linear_loss(model.with_parameters(**{name: b}), x0, u, w)) / (2 * h)
        out[name] = g
    return out


def fd_state_gradient(model, x0, u, w, h=1e-5):
    g = np.empty_like(x0)
    for idx in np.ndindex(x0.shape):
        a, b = x0.copy(), x0.copy()
        a[idx] += h
        b[idx] -= h
        g[idx] = (linear_loss(model, a, u, w) - linear_loss(model, b, u, w)) / (2 * h)
    return g


def max_grad_error(model, rng, B=2, T=10, h=1e-5):
    lo, hi = model.state_box()
    x0 = lo + (hi - lo) * rng.uniform(0.25, 0.75, size=(B, lo.shape[0]))
    u = rng.uniform(-1, 1, size=(B, T, model.dims.n_u))
    w = rng.normal(size=(B, T, model.dims.n_y))
    y, cache = model.forward(x0, u)
    an = model.backward(cache, w)
    fd = fd_gradients(model, x0, u, w, h)
    worst = max(float(rel_err(an[k], fd[k]).max()) for k in fd)
    worst = max(worst, float(rel_err(an["x0"], fd_state_gradient(model, x0, u, w, h)).max()))
    return worst
