"""Sharp-gentle complementary attention.

Every original point attends to all points of the sharp component and all
points of the gentle component through dot-product correlations of learned
embeddings; each attended value sum is added back to the point residually
and the two results are concatenated channel-wise.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, ShapeError

BRANCHES = ("theta_o", "theta_s", "phi_o", "phi_g", "psi_s", "psi_g")


@dataclass
class SgcamParams:
    """View of the six MLPs registered under ``prefix`` in a parameter dict."""

    store: dict
    prefix: str = "sgcam"
    embed_dim: int = 64
    row_softmax: bool = False

    @classmethod
    def create(cls, channels, embed_dim=64, key_depth=1, value_depth=1, seed=0, dtype=np.float64,
               store=None, prefix="sgcam", row_softmax=False):
        """Allocate independent MLPs; value MLPs end in a zero layer."""
        store = {} if store is None else store
        seeds = np.random.SeedSequence(seed).generate_state(len(BRANCHES))
        for name, s in zip(BRANCHES, seeds):
            if name.startswith("psi"):
                widths = [channels] * value_depth
                T.init_mlp(store, f"{prefix}.{name}", channels, widths, int(s), dtype, zero_last=True)
            else:
                widths = [embed_dim] * key_depth
                T.init_mlp(store, f"{prefix}.{name}", channels, widths, int(s), dtype)
        return cls(store, prefix, embed_dim, row_softmax)

    def mlp(self, name, x):
        return T.mlp_forward(self.store, x, f"{self.prefix}.{name}")

    def parameters(self):
        head = f"{self.prefix}."
        return {k: v for k, v in self.store.items() if k.startswith(head)}


@dataclass
class AttentionRecord:
    w_sharp: T.Tensor | None
    w_gentle: T.Tensor | None


def _correlate(q, k, embed_dim, row_softmax):
    w = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(embed_dim))
    return T.softmax(w, axis=-1) if row_softmax else w


def attention_matrices(params, x_o, x_s, x_g):
    """``W_s = Θ_o(x_o) Θ_s(x_s)^T / sqrt(d_k)`` and likewise ``W_g`` with Φ."""
    x_o, x_s, x_g = (T.as_tensor(x) for x in (x_o, x_s, x_g))
    if x_s.shape[-2] != x_g.shape[-2]:
        raise ShapeError(f"sharp and gentle components differ in size: {x_s.shape} vs {x_g.shape}")
    w_s = _correlate(params.mlp("theta_o", x_o), params.mlp("theta_s", x_s), params.embed_dim, params.row_softmax)
    w_g = _correlate(params.mlp("phi_o", x_o), params.mlp("phi_g", x_g), params.embed_dim, params.row_softmax)
    return AttentionRecord(w_s, w_g)


def _branch(params, x_o, x_c, key_o, key_c, value):
    w = _correlate(params.mlp(key_o, x_o), params.mlp(key_c, x_c), params.embed_dim, params.row_softmax)
    return T.add(x_o, T.matmul(w, params.mlp(value, x_c))), w


def fuse(params, x_o, split, features=None, use_sharp=True, use_gentle=True, record=None):
    """``Z = (x_o + W_s Ψ_s(x_s)) ⊕ (x_o + W_g Ψ_g(x_g))``.

    Component rows are gathered from ``features`` (defaults to ``x_o``) with
    the split's index sets; works on single clouds (``N x C``) and batches
    (``B x N x C`` with ``B x M`` indices). Disabling a branch drops its half
    of the output. ``record``, if given, receives the attention matrices.
    """
    x_o = T.as_tensor(x_o)
    features = x_o if features is None else T.as_tensor(features)
    n = features.shape[-2]
    for idx in (split.sharp_idx, split.gentle_idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise InvalidInputError(f"component index out of range for {n} points")
    outs = []
    w_s = w_g = None
    if use_sharp:
        y_s, w_s = _branch(params, x_o, T.gather_rows(features, split.sharp_idx), "theta_o", "theta_s", "psi_s")
        outs.append(y_s)
    if use_gentle:
        y_g, w_g = _branch(params, x_o, T.gather_rows(features, split.gentle_idx), "phi_o", "phi_g", "psi_g")
        outs.append(y_g)
    if record is not None:
        record.append(AttentionRecord(w_s, w_g))
    if not outs:
        raise InvalidInputError("fuse needs at least one of the sharp or gentle branches")
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)


def self_attention_fuse(params, x_o, record=None):
    """Self-attention baseline: both branches attend over every point."""
    x_o = T.as_tensor(x_o)
    y_s, w_s = _branch(params, x_o, x_o, "theta_o", "theta_s", "psi_s")
    y_g, w_g = _branch(params, x_o, x_o, "phi_o", "phi_g", "psi_g")
    if record is not None:
        record.append(AttentionRecord(w_s, w_g))
    return T.concat([y_s, y_g], axis=-1)


def export_attention(record, anchor):
    """Row ``anchor`` of each attention matrix, as numpy vectors."""
    out = []
    for w in (record.w_sharp, record.w_gentle):
        if w is None:
            out.append(None)
            continue
        data = w.data if isinstance(w, T.Tensor) else np.asarray(w)
        if data.ndim != 2:
            raise ShapeError(f"export_attention takes a single-cloud record, got shape {data.shape}")
        if not 0 <= anchor < data.shape[0]:
            raise InvalidInputError(f"anchor {anchor} out of range for {data.shape[0]} points")
        out.append(data[anchor].copy())
    return tuple(out)
