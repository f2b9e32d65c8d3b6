"""Exact kNN and the row-normalized adjacency operator over a point set.

Edge weights come from a decreasing kernel of the Euclidean distance,
truncated to each point's ``k_graph`` nearest neighbors. The self weight is
the sum of the off-diagonal weights of the row, so after row normalization
every diagonal entry is exactly 1/2 and the operator is row-stochastic.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DegenerateGraphError, InvalidInputError, ShapeError

KERNELS = ("gaussian", "inverse_distance")
BANDWIDTH_MODES = ("mean_sq_neighbor_dist", "fixed")

# use exact coordinate differences below this many scalar products
_DIRECT_DISTANCE_LIMIT = 4_000_000


@dataclass(frozen=True)
class GraphConfig:
    k_graph: int = 20
    kernel: str = "gaussian"
    bandwidth_mode: str = "mean_sq_neighbor_dist"
    sigma: float = 1.0
    epsilon: float = 1e-3
    self_loop_rule: str = "sum_of_neighbors"
    symmetrize: bool = True

    def validate(self, n_points=None):
        if self.k_graph < 1:
            raise ConfigError(f"k_graph must be >= 1, got {self.k_graph}")
        if n_points is not None and self.k_graph >= n_points:
            raise ConfigError(f"k_graph={self.k_graph} must be smaller than the number of points {n_points}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ConfigError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.bandwidth_mode == "fixed" and not self.sigma > 0:
            raise ConfigError("fixed bandwidth needs sigma > 0")
        if self.kernel == "inverse_distance" and not self.epsilon > 0:
            raise ConfigError("inverse_distance kernel needs epsilon > 0")
        if self.self_loop_rule != "sum_of_neighbors":
            raise ConfigError(f"unknown self loop rule {self.self_loop_rule!r}")
        return self


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Row-stochastic adjacency stored as CSR; row ``i`` lists ``i`` itself."""

    matrix: sp.csr_matrix

    @property
    def n_points(self):
        return self.matrix.shape[0]

    @property
    def neighbors(self):
        m = self.matrix
        return [m.indices[m.indptr[i] : m.indptr[i + 1]] for i in range(self.n_points)]

    @property
    def weights(self):
        m = self.matrix
        return [m.data[m.indptr[i] : m.indptr[i + 1]] for i in range(self.n_points)]

    def dense(self):
        return self.matrix.toarray()

    def to_csv(self, path):
        """Dump ``i,j,weight`` triples, one per stored entry."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = ["i,j,weight"] + [f"{coo.row[t]},{coo.col[t]},{coo.data[t]:.17g}" for t in order]
        Path(path).write_text("\n".join(lines) + "\n")


def _check_points(points):
    x = np.asarray(points)
    if x.ndim not in (2, 3) or x.shape[-1] < 1:
        raise ShapeError(f"points must be N x D (or B x N x D), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("points must be finite")
    return x


def pairwise_sq_dists(x):
    """Squared Euclidean distances within each cloud of ``x`` (N x D or B x N x D)."""
    x = np.asarray(x)
    if x.size * x.shape[-2] <= _DIRECT_DISTANCE_LIMIT:
        diff = x[..., :, None, :] - x[..., None, :, :]
        return np.einsum("...d,...d->...", diff, diff)
    sq = np.einsum("...d,...d->...", x, x)
    d = sq[..., :, None] + sq[..., None, :] - 2 * np.matmul(x, np.swapaxes(x, -1, -2))
    return np.maximum(d, 0)


def knn(points, k):
    """Indices of the ``k`` nearest other points, nearest first.

    Exact; ties in distance go to the lower index. Accepts ``N x D`` or a
    batch ``B x N x D`` and returns ``N x k`` or ``B x N x k``.
    """
    return _knn(_check_points(points), k)[0]


def _knn(x, k):
    n = x.shape[-2]
    if not 1 <= k < n:
        raise ConfigError(f"k={k} must satisfy 1 <= k < N={n}")
    d = pairwise_sq_dists(x)
    diag = np.arange(n)
    d[..., diag, diag] = np.inf
    cols = np.argpartition(d, k - 1, axis=-1)[..., :k]
    kth = np.take_along_axis(d, cols, axis=-1).max(axis=-1, keepdims=True)
    ambiguous = (d <= kth).sum(axis=-1) != k
    if ambiguous.any():
        # a tie straddles the k-th distance: keep the lowest indices among equals
        dr, kr = d[ambiguous], kth[ambiguous]
        less, eq = dr < kr, dr == kr
        need = k - less.sum(axis=-1, keepdims=True)
        mask = less | (eq & (np.cumsum(eq, axis=-1) <= need))
        cols[ambiguous] = np.nonzero(mask)[-1].reshape(-1, k)
    cols = np.sort(cols, axis=-1)
    dist = np.take_along_axis(d, cols, axis=-1)
    order = np.argsort(dist, axis=-1, kind="stable")
    return np.take_along_axis(cols, order, axis=-1), np.take_along_axis(dist, order, axis=-1), d


def build_adjacency(points, cfg=None, neighbors=None):
    """Normalized adjacency over one cloud.

    Off-diagonal raw weights are ``f(||x_i - x_j||)`` on the kNN pattern
    (made symmetric by union when ``cfg.symmetrize``); the raw self weight
    is the row's off-diagonal sum, then each row is scaled to sum to 1.
    """
    x = _check_points(points)
    if x.ndim != 2:
        raise ShapeError(f"build_adjacency takes one N x D cloud, got shape {x.shape}")
    nbrs = None if neighbors is None else np.asarray(neighbors)[None]
    return NeighborGraph(_adjacency_csr(x[None], cfg or GraphConfig(), nbrs))


def build_adjacency_batch(points, cfg=None, neighbors=None):
    """One block-diagonal graph over a ``B x N x D`` batch (cloud b owns rows b*N..)."""
    x = _check_points(points)
    if x.ndim != 3:
        raise ShapeError(f"build_adjacency_batch takes a B x N x D batch, got shape {x.shape}")
    return NeighborGraph(_adjacency_csr(x, cfg or GraphConfig(), neighbors))


def _adjacency_csr(x, cfg, idx):
    x = x.astype(np.float64, copy=False)
    b, n, _ = x.shape
    cfg.validate(n)
    k = cfg.k_graph
    knn_d2 = dense = None
    if idx is None:
        idx, knn_d2, dense = _knn(x, k)
    offsets = (np.arange(b) * n)[:, None, None]
    flat = x.reshape(b * n, -1)
    total = b * n
    rows = np.repeat(np.arange(total), k)
    cols = (idx + offsets).reshape(-1)
    if cfg.symmetrize:
        pattern = sp.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(total, total))
        pattern = (pattern + pattern.T).tocoo()
        rows, cols = pattern.row, pattern.col
    if dense is not None:
        d2 = dense.reshape(-1)[(rows // n) * n * n + (rows % n) * n + cols % n]
    else:
        d2 = _row_sq_dists(flat, rows, cols)

    if cfg.kernel == "gaussian":
        if knn_d2 is None:
            nd = x[np.arange(b)[:, None, None], idx] - x[:, :, None, :]
            knn_d2 = np.einsum("bijk,bijk->bij", nd, nd)
        if cfg.bandwidth_mode == "fixed":
            sigma2 = np.full(b, cfg.sigma**2)
        else:
            sigma2 = knn_d2.reshape(b, -1).mean(axis=1)
            sigma2[sigma2 == 0] = 1.0  # every point coincides: all weights f(0)
        sigma2_row = np.repeat(sigma2, n)
        # shifting each row by its nearest-neighbor term cancels in the
        # normalization and keeps the largest weight at exactly 1
        nearest = knn_d2.min(axis=-1).reshape(-1)
        w = np.exp(-(d2 - nearest[rows]) / (2 * sigma2_row[rows]))
    else:
        w = 1.0 / (np.sqrt(d2) + cfg.epsilon)

    off = sp.csr_matrix((w, (rows, cols)), shape=(total, total))
    row_sum = np.asarray(off.sum(axis=1)).ravel()
    bad = np.flatnonzero(~(row_sum > 0) | ~np.isfinite(row_sum))
    if bad.size:
        raise DegenerateGraphError(f"point {bad[0] % n} has zero total neighbor weight")
    mat = (sp.diags(0.5 / row_sum) @ off + sp.identity(total, format="csr") * 0.5).tocsr()
    mat.sort_indices()
    return mat


def _row_sq_dists(flat, rows, cols, chunk=1 << 16):
    out = np.empty(rows.size)
    for s in range(0, rows.size, chunk):
        diff = flat[rows[s : s + chunk]] - flat[cols[s : s + chunk]]
        out[s : s + chunk] = np.einsum("ij,ij->i", diff, diff)
    return out


def apply_adjacency(graph, features):
    """Graph shift: ``Ã @ features`` (each channel is shifted independently)."""
    f = np.asarray(features)
    if f.ndim not in (1, 2) or f.shape[0] != graph.n_points:
        raise ShapeError(f"features with shape {f.shape} do not match a graph over {graph.n_points} points")
    return np.asarray(graph.matrix @ f)
