"""The two-block geometry-disentangled attention network.

Layout: KNN local operator -> block -> block -> KNN local operator -> MLP,
then either channel-wise max pooling and a fully connected head
(classification) or per-point heads fed with the pooled feature broadcast to
every point (segmentation). Each block rebuilds a neighbor graph on its
input features, splits the points into sharp and gentle components, fuses
them by attention and adds a projected residual.

Parameters live in a flat ``dict`` of named tensors; every function here is
a pure function of ``(params, cfg, inputs)``.
"""

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, InvalidInputError
from .gdm import VariationSplit, disentangle_batch
from .graph import GraphConfig, knn
from .sgcam import SgcamParams, fuse, self_attention_fuse

TASKS = ("classification", "segmentation")
N_BLOCKS = 2

CHECKPOINT_MAGIC = b"GDAN"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    task: str = "classification"
    n_classes: int = 40
    part_counts: tuple = (2,)
    in_channels: int = 3
    k_local: int = 20
    k_graph: int = 20
    m: int | None = None
    local_width: int = 64
    local2_width: int = 128
    final_width: int = 512
    head_widths: tuple = (256,)
    seg_hidden: int = 128
    embed_dim: int = 64
    key_depth: int = 2
    value_depth: int = 2
    use_knn_local: bool = True
    use_sharp: bool = True
    use_gentle: bool = True
    use_self_attention: bool = False
    dynamic_adjacency: bool = True
    row_softmax: bool = False
    batch_norm: bool = False
    zero_init_residual: bool = True
    graph_kernel: str = "gaussian"
    symmetrize_graph: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "part_counts", tuple(int(p) for p in self.part_counts))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        self.validate()

    @property
    def n_seg_heads(self):
        return len(self.part_counts)

    @property
    def uses_fusion(self):
        return self.use_self_attention or self.use_sharp or self.use_gentle

    def graph_config(self):
        return GraphConfig(k_graph=self.k_graph, kernel=self.graph_kernel, symmetrize=self.symmetrize_graph)

    def selection_count(self, n_points):
        return self.m if self.m is not None else max(1, n_points // 4)

    def validate(self, n_points=None):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        widths = (self.local_width, self.local2_width, self.final_width, self.seg_hidden, self.embed_dim,
                  self.n_classes, *self.head_widths, *self.part_counts)
        if min(widths) < 1 or self.key_depth < 1 or self.value_depth < 1:
            raise ConfigError("all widths, depths and class/part counts must be >= 1")
        if self.k_local < 1 or self.k_graph < 1:
            raise ConfigError("k_local and k_graph must be >= 1")
        if self.use_self_attention and (self.use_sharp or self.use_gentle):
            raise ConfigError("self-attention replaces the sharp/gentle branches; disable them to use it")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if n_points is not None:
            need = max(self.k_local, self.k_graph) + 1
            if n_points < need:
                raise InvalidInputError(f"cloud has {n_points} points; the model needs at least {need}")
            m = self.selection_count(n_points)
            if not self.use_self_attention and self.uses_fusion and not 1 <= 2 * m <= n_points:
                raise ConfigError(f"selection overlap: m={m} exceeds half of N={n_points}")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ----------------------------------------------------------- initialization


def _group_seed(seed, name):
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _add_bn(params, prefix, width, dtype):
    params[f"{prefix}.bn.gamma"] = T.Parameter(np.ones(width, dtype), f"{prefix}.bn.gamma")
    params[f"{prefix}.bn.beta"] = T.Parameter(np.zeros(width, dtype), f"{prefix}.bn.beta")
    params[f"{prefix}.bn.running_mean"] = T.Tensor(np.zeros(width, dtype), name=f"{prefix}.bn.running_mean")
    params[f"{prefix}.bn.running_var"] = T.Tensor(np.ones(width, dtype), name=f"{prefix}.bn.running_var")


def _kaiming_block(shape, fan_in, seed, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return np.random.default_rng(int(seed)).uniform(-bound, bound, size=shape).astype(dtype)


def _init_local(params, prefix, c_in, c_out, cfg, dtype):
    seeds = np.random.SeedSequence(_group_seed(cfg.seed, prefix)).generate_state(2)
    # the edge MLP acts on [x_i, x_j - x_i]; its weight is stored as two halves
    fan_in = 2 * c_in if cfg.use_knn_local else c_in
    for name, s in zip(("w_center", "w_nbr"), seeds):
        if name == "w_nbr" and not cfg.use_knn_local:
            continue
        params[f"{prefix}.{name}"] = T.Parameter(_kaiming_block((c_in, c_out), fan_in, s, dtype), f"{prefix}.{name}")
    params[f"{prefix}.b"] = T.Parameter(np.zeros(c_out, dtype), f"{prefix}.b")
    if cfg.batch_norm:
        _add_bn(params, prefix, c_out, dtype)


def init_model(cfg):
    """Fresh parameter dict for ``cfg`` (deterministic in ``cfg.seed``)."""
    dtype = np.dtype(cfg.dtype)
    params = {}
    c = cfg.local_width
    _init_local(params, "local1", cfg.in_channels, c, cfg, dtype)
    for b in range(1, N_BLOCKS + 1):
        prefix = f"block{b}"
        if not cfg.uses_fusion:
            continue
        SgcamParams.create(c, cfg.embed_dim, cfg.key_depth, cfg.value_depth, _group_seed(cfg.seed, prefix),
                           dtype, store=params, prefix=f"{prefix}.sgcam")
        fused = c if (cfg.use_sharp ^ cfg.use_gentle) else 2 * c
        T.init_mlp(params, f"{prefix}.proj", fused, [c], _group_seed(cfg.seed, f"{prefix}.proj"), dtype,
                   zero_last=cfg.zero_init_residual)
    _init_local(params, "local2", c, cfg.local2_width, cfg, dtype)
    T.init_mlp(params, "mlp", cfg.local2_width, [cfg.final_width], _group_seed(cfg.seed, "mlp"), dtype)
    if cfg.batch_norm:
        _add_bn(params, "mlp", cfg.final_width, dtype)
    if cfg.task == "classification":
        T.init_mlp(params, "head", cfg.final_width, [*cfg.head_widths, cfg.n_classes],
                   _group_seed(cfg.seed, "head"), dtype)
    else:
        for h, n_parts in enumerate(cfg.part_counts):
            prefix = f"seg{h}"
            s1, s2, s3 = np.random.SeedSequence(_group_seed(cfg.seed, prefix)).generate_state(3)
            # halves of one (2F x H) layer acting on [f_i, g]
            for name, s in (("w_point", s1), ("w_global", s2)):
                w = _kaiming_block((cfg.final_width, cfg.seg_hidden), 2 * cfg.final_width, s, dtype)
                params[f"{prefix}.{name}"] = T.Parameter(w, f"{prefix}.{name}")
            params[f"{prefix}.b"] = T.Parameter(np.zeros(cfg.seg_hidden, dtype), f"{prefix}.b")
            T.init_mlp(params, f"{prefix}.out", cfg.seg_hidden, [n_parts], int(s3), dtype)
    return params


def trainable(params):
    return {k: v for k, v in params.items() if isinstance(v, T.Parameter)}


def count_params(params):
    """Total number of trainable scalars."""
    return int(sum(v.data.size for v in trainable(params).values()))


# ------------------------------------------------------------------ layers


def _bn(params, prefix, z, training):
    state = {"mean": params[f"{prefix}.bn.running_mean"].data, "var": params[f"{prefix}.bn.running_var"].data}
    out = T.batch_norm(z, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"], state, training)
    params[f"{prefix}.bn.running_mean"].data = state["mean"].astype(z.dtype)
    params[f"{prefix}.bn.running_var"].data = state["var"].astype(z.dtype)
    return out


def local_operator(params, prefix, features, k_local, use_knn=True, training=False):
    """Edge MLP over ``[x_i, x_j - x_i]`` for the kNN of each point, max over j.

    The first (and only) edge layer is linear in the concatenation, so it
    splits into a center term and a gathered neighbor term; since ReLU is
    monotone the max over neighbors is taken before it.
    """
    x = T.as_tensor(features)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    z = T.add(T.matmul(x, params[f"{prefix}.w_center"]), params[f"{prefix}.b"])
    if use_knn:
        n = x.shape[-2]
        if not k_local < n:
            raise ConfigError(f"k_local={k_local} must be smaller than the number of points {n}")
        idx = knn(x.data, k_local)
        q = T.matmul(x, params[f"{prefix}.w_nbr"])
        z = T.add(T.sub(z, q), T.gather_max(q, idx))
    if f"{prefix}.bn.gamma" in params:
        z = _bn(params, prefix, z, training)
    out = T.relu(z)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def gda_block(params, prefix, features, cfg, xyz=None, trace=None):
    """GDM split on the block input, attention fusion, projection, residual."""
    h = T.as_tensor(features)
    if not cfg.uses_fusion:
        return h
    sg = SgcamParams(params, f"{prefix}.sgcam", cfg.embed_dim, cfg.row_softmax)
    records = [] if trace is not None else None
    if cfg.use_self_attention:
        z = self_attention_fuse(sg, h, record=records)
        split = None
    else:
        space = h.data if (cfg.dynamic_adjacency or xyz is None) else xyz
        n = h.shape[-2]
        squeeze = np.ndim(space) == 2
        space = space[None] if squeeze else space
        split = disentangle_batch(space, cfg.selection_count(n), cfg.graph_config())
        if squeeze:
            split = _first(split)
        z = fuse(sg, h, split, use_sharp=cfg.use_sharp, use_gentle=cfg.use_gentle, record=records)
    if trace is not None:
        trace.append({"block": prefix, "split": split, "attention": records[0]})
    return T.add(h, T.mlp_forward(params, z, f"{prefix}.proj"))


def _first(split):
    return VariationSplit(split.scores[0], split.order[0], split.m, split.sharp_idx[0], split.gentle_idx[0])


def _param_dtype(params):
    return params["local1.w_center"].dtype


def _prepare(params, cfg, points):
    x = points.data if isinstance(points, T.Tensor) else np.asarray(points)
    if x.ndim != 3:
        raise InvalidInputError(f"expected a B x N x C batch, got shape {x.shape}")
    if x.shape[-1] != cfg.in_channels:
        raise InvalidInputError(f"model takes {cfg.in_channels} input channels, got {x.shape[-1]}")
    cfg.validate(x.shape[1])
    if isinstance(points, T.Tensor):
        return points
    return T.Tensor(x.astype(_param_dtype(params), copy=False))


def trunk(params, cfg, points, training=False, trace=None):
    """Per-point features after the final MLP, ``B x N x final_width``."""
    x = _prepare(params, cfg, points)
    xyz = x.data[..., :3]
    h = local_operator(params, "local1", x, cfg.k_local, cfg.use_knn_local, training)
    for b in range(1, N_BLOCKS + 1):
        h = gda_block(params, f"block{b}", h, cfg, xyz=xyz, trace=trace)
    h = local_operator(params, "local2", h, cfg.k_local, cfg.use_knn_local, training)
    f = T.mlp_forward(params, h, "mlp")
    if cfg.batch_norm:
        f = _bn(params, "mlp", f, training)
    return T.relu(f)


def classify_logits(params, cfg, points, training=False, trace=None):
    """``B x n_classes`` logits for a batch of clouds."""
    if cfg.task != "classification":
        raise ConfigError("classify_logits needs a classification model")
    f = trunk(params, cfg, points, training, trace)
    return T.mlp_forward(params, T.max(f, axis=-2), "head")


def segment_logits(params, cfg, points, category, training=False, trace=None):
    """``B x N x n_parts`` logits; every cloud in the batch uses head ``category``."""
    if cfg.task != "segmentation":
        raise ConfigError("segment_logits needs a segmentation model")
    if not 0 <= category < cfg.n_seg_heads:
        raise ConfigError(f"category {category} out of range for {cfg.n_seg_heads} heads")
    f = trunk(params, cfg, points, training, trace)
    g = T.max(f, axis=-2)
    prefix = f"seg{category}"
    # [f_i, g] @ [[w_point], [w_global]] without materializing the broadcast
    glob = T.matmul(g, params[f"{prefix}.w_global"])
    glob = T.reshape(glob, (glob.shape[0], 1, glob.shape[1]))
    hidden = T.relu(T.add(T.add(T.matmul(f, params[f"{prefix}.w_point"]), glob), params[f"{prefix}.b"]))
    return T.mlp_forward(params, hidden, f"{prefix}.out")


def forward_classify(cloud, params, cfg):
    """Logits (numpy, length ``n_classes``) for one ``PointCloud``."""
    with T.no_grad():
        return classify_logits(params, cfg, cloud.points[None]).data[0].copy()


def forward_segment(cloud, params, cfg, category=0):
    """Per-point logits (numpy, ``N x n_parts``) for one ``PointCloud``."""
    with T.no_grad():
        return segment_logits(params, cfg, cloud.points[None], category).data[0].copy()


# -------------------------------------------------------------- checkpoint


def save_checkpoint(params, cfg, path):
    """Binary checkpoint: magic, version, JSON config, then named tensors (little-endian)."""
    cfg_bytes = cfg.to_json().encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)), cfg_bytes,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        t = params[name]
        data = np.ascontiguousarray(t.data)
        if data.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {data.dtype}")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BBB", _DTYPE_CODES[data.dtype], isinstance(t, T.Parameter), data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; validates every field against the config."""
    try:
        r = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("magic: not a GDAN checkpoint")
    version, cfg_len = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"version: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    try:
        cfg = ModelConfig.from_json(r.take(cfg_len, "config").decode())
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"config: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    expected = init_model(cfg)
    params = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name")
        name = r.take(name_len, f"tensor {i} name").decode()
        code, is_param, rank = r.unpack("<BBB", f"{name} header")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"{name} values"), dtype=dtype.newbyteorder("<")).astype(dtype)
        data = data.reshape(dims)
        if name not in expected:
            raise CheckpointError(f"{name}: tensor not part of the configured model")
        if expected[name].shape != tuple(dims):
            raise CheckpointError(f"{name}: shape {tuple(dims)} disagrees with config shape {expected[name].shape}")
        params[name] = T.Parameter(data, name) if is_param else T.Tensor(data, name=name)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last tensor")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"{missing[0]}: tensor missing from checkpoint")
    return params, cfg
