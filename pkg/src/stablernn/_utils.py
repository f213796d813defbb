import hashlib

import numpy as np
from scipy.special import expit

# named random substreams; the index is part of the file formats, do not reorder
STREAMS = {"dataset": 0, "init": 1, "minibatch": 2, "scenario": 3, "split": 4, "probe": 5}


def substream(seed, name):
    """Independent generator for ``name`` derived from a single integer seed."""
    key = STREAMS[name] if isinstance(name, str) else int(name)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


def sigmoid(a):
    return expit(a)


def spectral_norm(a):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


def spectral_norm_grad(a):
    """Gradient of the spectral norm: outer product of the top singular pair."""
    a = np.asarray(a, dtype=float)
    if a.size == 0 or not np.any(a):
        return np.zeros_like(a)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return np.outer(u[:, 0], vt[0])


def inf_norm(a):
    """Induced infinity norm (max absolute row sum)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0.0
    return float(np.abs(a).sum(axis=1).max())


def inf_norm_grad(a):
    """Subgradient of the infinity norm (first maximizing row, sign pattern)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    g = np.zeros_like(a)
    if a.size == 0:
        return g
    row = int(np.argmax(np.abs(a).sum(axis=1)))
    g[row] = np.sign(a[row])
    return g


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
