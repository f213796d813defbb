"""Input checks for the estimator API."""
import numpy as np

from .exceptions import ShapeError


def check_sequences(X, y=None, n_u=None, n_y=None):
    """Validate batched sequences: ``X`` (n_seq, T, n_u), ``y`` (n_seq, T, n_y).

    2-D arrays are read as a single sequence.  Returns float64 copies.
    """
    X = np.array(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] == 0:
        raise ShapeError("X", ("n_seq", "T", "n_u"), X.shape)
    if n_u is not None and X.shape[2] != n_u:
        raise ShapeError("X", ("n_seq", "T", n_u), X.shape)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if y is None:
        return X
    y = np.array(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3 or y.shape[:2] != X.shape[:2]:
        raise ShapeError("y", X.shape[:2] + ("n_y",), y.shape)
    if n_y is not None and y.shape[2] != n_y:
        raise ShapeError("y", X.shape[:2] + (n_y,), y.shape)
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return X, y


def check_washout(T_w, T):
    if int(T_w) != T_w or not 0 <= T_w < T:
        raise ValueError(f"washout must be an integer in [0, {T}), got {T_w!r}")
    return int(T_w)
