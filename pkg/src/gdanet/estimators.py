"""scikit-learn style wrappers around the network.

``X`` is always a stack of clouds, ``S x N x C`` with xyz in the first three
channels. The classifier takes one label per cloud, the segmenter one label
per point.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .errors import InvalidInputError, ShapeError
from .model import ModelConfig, count_params, init_model
from .training import Dataset, TrainConfig, evaluate, predict_logits, train


def check_clouds(X, dtype=np.float64, min_points=1):
    """Validate a ``S x N x C`` stack of clouds and return it as a float array."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected clouds shaped S x N x C, got {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < min_points or X.shape[2] < 3:
        raise InvalidInputError(f"need >= 1 cloud of >= {min_points} points with >= 3 channels, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("clouds contain non-finite values")
    return X


class _GDANetBase(BaseEstimator):
    _task = "classification"

    def __init__(self, k_local=20, k_graph=20, m=None, embed_dim=64, use_knn_local=True, use_sharp=True,
                 use_gentle=True, epochs=20, batch_size=16, lr=1e-3, optimizer="adam", votes=1,
                 scale_range=(0.8, 1.2), dtype="float32", random_state=0):
        self.k_local = k_local
        self.k_graph = k_graph
        self.m = m
        self.embed_dim = embed_dim
        self.use_knn_local = use_knn_local
        self.use_sharp = use_sharp
        self.use_gentle = use_gentle
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.votes = votes
        self.scale_range = scale_range
        self.dtype = dtype
        self.random_state = random_state

    def _model_config(self, n_out, in_channels):
        extra = {"n_classes": n_out} if self._task == "classification" else {"part_counts": (n_out,)}
        return ModelConfig(task=self._task, in_channels=in_channels, k_local=self.k_local, k_graph=self.k_graph,
                           m=self.m, embed_dim=self.embed_dim, use_knn_local=self.use_knn_local,
                           use_sharp=self.use_sharp, use_gentle=self.use_gentle, seed=int(self.random_state),
                           dtype=self.dtype, **extra)

    def _train_config(self):
        return TrainConfig(optimizer=self.optimizer, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=int(self.random_state))

    def _fit(self, X, encoded):
        X = check_clouds(X)
        self.config_ = self._model_config(len(self.classes_), X.shape[2])
        self.config_.validate(X.shape[1])
        self.params_ = init_model(self.config_)
        result = train(self.params_, self.config_, Dataset(X, encoded), self._train_config())
        self.history_ = result.history
        self.n_features_in_ = X.shape[2]
        return self

    def _logits(self, X):
        check_is_fitted(self, "params_")
        X = check_clouds(X)
        if X.shape[2] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[2]} channels, the model was fitted on {self.n_features_in_}")
        sr = self.scale_range if self.votes > 1 else (1.0, 1.0)
        return predict_logits(self.params_, self.config_, X, votes=self.votes, scale_range=sr,
                              seed=int(self.random_state))

    def predict_proba(self, X):
        logits = self._logits(X)
        return T.softmax(T.Tensor(logits.astype(np.float64)), axis=-1).data

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(-1)]

    @property
    def n_parameters_(self):
        check_is_fitted(self, "params_")
        return count_params(self.params_)


class GDANetClassifier(ClassifierMixin, _GDANetBase):
    """Point-cloud classifier: ``fit(X, y)`` with one label per cloud."""

    _task = "classification"

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != np.shape(X)[0]:
            raise InvalidInputError("y must hold one label per cloud")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return self._fit(X, encoded)


class GDANetSegmenter(_GDANetBase):
    """Per-point part segmenter: ``fit(X, y)`` with ``y`` shaped ``S x N``."""

    _task = "segmentation"

    def fit(self, X, y):
        y = np.asarray(y)
        if y.shape != np.shape(X)[:2]:
            raise InvalidInputError(f"y must be S x N part labels matching X, got {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return self._fit(X, encoded.reshape(y.shape))

    def score(self, X, y, sample_weight=None):
        """Mean per-point accuracy."""
        pred = self.predict(X)
        return float(np.average(pred == np.asarray(y), weights=sample_weight))

    def evaluate(self, X, y):
        check_is_fitted(self, "params_")
        lookup = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.vectorize(lookup.__getitem__)(np.asarray(y))
        return evaluate(self.params_, self.config_, Dataset(check_clouds(X), encoded))
