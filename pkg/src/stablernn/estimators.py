"""scikit-learn compatible wrappers around model construction and training.

Sequences are passed as 3-D arrays: inputs ``X`` of shape (n_seq, T, n_u) and
targets ``y`` of shape (n_seq, T, n_y).
"""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import certificates
from ._validation import check_sequences, check_washout
from .data import Sequence
from .models import init_model
from .models.base import Dims
from .training import TrainConfig, fit_metric, train


def _to_sequences(X, y):
    return [Sequence(X[i], y[i], i) for i in range(X.shape[0])]


class RecurrentRegressor(RegressorMixin, BaseEstimator):
    """Simulation-error regressor for NNARX, ESN, LSTM and GRU models.

    ``target_property`` ('ISS' or 'dISS') trains under the weight certificate;
    ``certified_`` reports whether the fitted model satisfies it.
    """

    def __init__(self, arch="gru", n_x=10, N=5, target_property=None, epochs=200, lr=1e-2,
                 batch_size=16, patience=50, washout=0, ridge=1e-6, optimizer="rmsprop", seed=0):
        self.arch = arch
        self.n_x = n_x
        self.N = N
        self.target_property = target_property
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.washout = washout
        self.ridge = ridge
        self.optimizer = optimizer
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_sequences(X, y)
        T_w = check_washout(self.washout, X.shape[1])
        train_set = _to_sequences(X, y)
        if X_val is None:
            val_set = train_set
        else:
            X_val, y_val = check_sequences(X_val, y_val, X.shape[2], y.shape[2])
            val_set = _to_sequences(X_val, y_val)
        dims = Dims(X.shape[2], y.shape[2], self.n_x, self.N if self.arch == "nnarx" else None)
        model = init_model(self.arch, dims, seed=self.seed)
        cfg = TrainConfig(optimizer=self.optimizer, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                          patience=self.patience, ridge=self.ridge, seed=self.seed)
        result = train(model, train_set, cfg, self.target_property, val=val_set, T_w=T_w)
        self.model_ = result.model
        self.trace_ = result.trace
        self.certified_ = result.certified
        self.n_features_in_ = X.shape[2]
        self.n_outputs_ = y.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X, n_u=self.n_features_in_)
        y, _ = self.model_.forward(self.model_.zero_state(X.shape[0]), X)
        return y

    def score(self, X, y, sample_weight=None):
        """Coefficient of determination over all post-washout samples."""
        X, y = check_sequences(X, y, self.n_features_in_, self.n_outputs_)
        T_w = check_washout(self.washout, X.shape[1])
        y_hat = self.predict(X)[:, T_w:].reshape(-1, self.n_outputs_)
        y = y[:, T_w:].reshape(-1, self.n_outputs_)
        from sklearn.metrics import r2_score

        return r2_score(y, y_hat, sample_weight=sample_weight)

    def fit_index(self, X, y, mode="pointwise"):
        X, y = check_sequences(X, y, self.n_features_in_, self.n_outputs_)
        T_w = check_washout(self.washout, X.shape[1])
        return fit_metric(self.model_, _to_sequences(X, y), T_w, y_hat=self.predict(X), mode=mode)

    def certificate(self):
        check_is_fitted(self, "model_")
        return certificates.certify(self.model_)
