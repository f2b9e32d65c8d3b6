"""Geometry disentangling: high-pass graph filtering and sharp/gentle selection.

The filter is ``h(Ã) = I - Ã``. Each point's variation score is the l2 norm
of its filtered feature row; the ``m`` highest-scoring points form the sharp
component and the ``m`` lowest the gentle component. The production path
never touches eigenvalues; ``spectral_check`` exists to validate the
frequency-response identity on small graphs.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, NumericError, ShapeError
from .graph import GraphConfig, apply_adjacency, build_adjacency, build_adjacency_batch

SPECTRAL_LIMIT = 128


@dataclass(frozen=True)
class FilterSpec:
    """Polynomial graph filter ``sum_l coefficients[l] * Ã^l``."""

    coefficients: tuple = (1.0, -1.0)

    def __post_init__(self):
        if tuple(self.coefficients) != (1.0, -1.0):
            raise ConfigError("only the high-pass filter I - Ã (coefficients 1, -1) is supported")

    @property
    def length(self):
        return len(self.coefficients)

    def response(self, eigenvalues):
        """Frequency response: the filter polynomial evaluated at each eigenvalue."""
        lam = np.asarray(eigenvalues)
        return sum(h * lam**ell for ell, h in enumerate(self.coefficients))


HIGH_PASS = FilterSpec()


@dataclass(frozen=True, eq=False)
class VariationSplit:
    """Variation scores, descending order, and the selected index sets.

    Arrays may carry a leading batch axis when several clouds are split at
    once (see ``stack_splits``).
    """

    scores: np.ndarray
    order: np.ndarray
    m: int
    sharp_idx: np.ndarray
    gentle_idx: np.ndarray

    def to_json(self):
        return {"m": int(self.m), "sharp": self.sharp_idx.tolist(), "gentle": self.gentle_idx.tolist()}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_json()))


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues_A: np.ndarray
    eigenvalues_hA: np.ndarray
    max_response_error: float
    eigenvector_basis_condition: float

    def within_unit_interval(self, tol=1e-8):
        lam = self.eigenvalues_A
        return bool(np.all(np.abs(lam.imag) <= tol) and np.all(lam.real >= -tol) and np.all(lam.real <= 1 + tol))


def highpass(graph, features):
    """Filtered signal ``x_i - sum_j Ã_ij x_j`` for every point."""
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] != graph.n_points:
        raise ShapeError(f"features with shape {f.shape} do not match a graph over {graph.n_points} points")
    # I - Ã annihilates constants, so shifting by one row changes nothing in
    # exact arithmetic and makes constant signals filter to exact zeros
    f = f - f[:1]
    return f - apply_adjacency(graph, f)


def variation_scores(filtered):
    f = np.asarray(filtered)
    return np.sqrt(np.einsum("ij,ij->i", f, f))


def split_from_scores(scores, m):
    """Rank by descending score (ties: lower index first) and take both ends."""
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= m or 2 * m > n:
        raise ConfigError(f"selection overlap: m={m} must satisfy 1 <= m <= N/2 with N={n}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return VariationSplit(scores, order, int(m), order[..., :m], order[..., n - m :])


def disentangle(graph, features, m):
    return split_from_scores(variation_scores(highpass(graph, features)), m)


def disentangle_cloud(features, m, cfg=None):
    """Build the graph on ``features`` themselves and split them."""
    cfg = cfg or GraphConfig()
    return disentangle(build_adjacency(features, cfg), features, m)


def stack_splits(splits):
    s0 = splits[0]
    if any(s.m != s0.m for s in splits):
        raise ConfigError("stacked splits must share m")
    return VariationSplit(
        np.stack([s.scores for s in splits]),
        np.stack([s.order for s in splits]),
        s0.m,
        np.stack([s.sharp_idx for s in splits]),
        np.stack([s.gentle_idx for s in splits]),
    )


def disentangle_batch(features, m, cfg=None):
    """Split every cloud of a ``B x N x C`` batch on its own feature graph."""
    f = np.asarray(features, dtype=np.float64)
    b, n, c = f.shape
    graph = build_adjacency_batch(f, cfg or GraphConfig())
    flat = (f - f[:, :1]).reshape(b * n, c)
    scores = variation_scores(flat - apply_adjacency(graph, flat)).reshape(b, n)
    return split_from_scores(scores, m)


def _sorted_spectrum(values, descending):
    # lexicographic on (real, imag) so conjugate pairs line up deterministically
    order = np.lexsort((values.imag, values.real))
    return values[order[::-1]] if descending else values[order]


def spectral_check(graph, limit=SPECTRAL_LIMIT, filt=HIGH_PASS):
    """Compare the spectrum of ``h(Ã)`` with the response ``1 - λ`` of Ã's spectrum."""
    n = graph.n_points
    if n > limit:
        raise ConfigError(f"spectral check limited to N <= {limit}, got {n}")
    a = graph.dense()
    h = sum(c * np.linalg.matrix_power(a, ell) for ell, c in enumerate(filt.coefficients))
    try:
        lam, vecs = np.linalg.eig(a)
        mu = np.linalg.eigvals(h)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed on a {n}-point graph: {exc}") from exc
    lam = _sorted_spectrum(lam.astype(complex), descending=True)
    mu = _sorted_spectrum(mu.astype(complex), descending=False)
    err = float(np.max(np.abs(mu - filt.response(lam)))) if n else 0.0
    if not np.isfinite(err):
        raise NumericError(f"non-finite eigenvalues on a {n}-point graph")
    if np.all(np.abs(lam.imag) < 1e-12):
        lam, mu = lam.real, mu.real
    return SpectralReport(lam, mu, err, float(np.linalg.cond(vecs)))


class GeometryDisentangler(TransformerMixin, BaseEstimator):
    """Transformer view of the high-pass filter over one point cloud.

    Rows of ``X`` are points. ``transform`` returns the filtered signal,
    ``score_samples`` the per-point variation and ``split`` the full
    sharp/gentle selection. ``m=None`` selects a quarter of the points.
    """

    def __init__(self, k_graph=20, m=None, kernel="gaussian", bandwidth_mode="mean_sq_neighbor_dist", sigma=1.0,
                 symmetrize=True):
        self.k_graph = k_graph
        self.m = m
        self.kernel = kernel
        self.bandwidth_mode = bandwidth_mode
        self.sigma = sigma
        self.symmetrize = symmetrize

    def _graph_config(self):
        return GraphConfig(k_graph=self.k_graph, kernel=self.kernel, bandwidth_mode=self.bandwidth_mode,
                           sigma=self.sigma, symmetrize=self.symmetrize)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self._graph_config().validate(X.shape[0])
        self.n_features_in_ = X.shape[1]
        return self

    def _graph(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} channels, fitted on {self.n_features_in_}")
        return X, build_adjacency(X, self._graph_config())

    def transform(self, X):
        X, graph = self._graph(X)
        return highpass(graph, X)

    def score_samples(self, X):
        return variation_scores(self.transform(X))

    def split(self, X):
        X, graph = self._graph(X)
        m = self.m if self.m is not None else X.shape[0] // 4
        return disentangle(graph, X, m)
