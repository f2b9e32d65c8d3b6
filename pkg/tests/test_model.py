import struct
from dataclasses import replace

import numpy as np
import pytest
from gradcheck import numeric_grad, rel_error, sample_entries

from gdanet import tensor as T
from gdanet.errors import CheckpointError, ConfigError, InvalidInputError
from gdanet.gdm import disentangle_cloud
from gdanet.graph import knn
from gdanet.model import (
    ModelConfig,
    classify_logits,
    count_params,
    forward_classify,
    forward_segment,
    gda_block,
    init_model,
    load_checkpoint,
    local_operator,
    save_checkpoint,
    trunk,
)
from gdanet.pointcloud import PointCloud
from gdanet.sgcam import SgcamParams, fuse

SMALL = dict(n_classes=3, k_local=4, k_graph=4, local_width=8, local2_width=8, final_width=16, head_widths=(8,),
             seg_hidden=8, embed_dim=4, dtype="float64")


def small(**kw):
    return ModelConfig(**{**SMALL, **kw})


def randomize(params, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for t in T_params(params):
        t.data = rng.normal(scale=scale, size=t.shape)
    return params


def T_params(params):
    return [t for t in params.values() if isinstance(t, T.Parameter)]


def loop_local(params, prefix, x, k):
    wc, wn, b = (params[f"{prefix}.{n}"].data for n in ("w_center", "w_nbr", "b"))
    nb = knn(x, k)
    out = np.empty((len(x), wc.shape[1]))
    for i in range(len(x)):
        edges = [np.maximum(x[i] @ wc + (x[j] - x[i]) @ wn + b, 0) for j in nb[i]]
        out[i] = np.max(edges, axis=0)
    return out


def test_local_operator_loop_oracle(rng):
    cfg = small()
    params = randomize(init_model(cfg))
    x = rng.normal(size=(16, 3))
    out = local_operator(params, "local1", x, 4).data
    np.testing.assert_allclose(out, loop_local(params, "local1", x, 4), atol=1e-10)


def test_local_operator_two_points(rng):
    params = randomize(init_model(small()))
    x = rng.normal(size=(2, 3))
    wc, wn, b = (params[f"local1.{n}"].data for n in ("w_center", "w_nbr", "b"))
    out = local_operator(params, "local1", x, 1).data
    np.testing.assert_allclose(out[0], np.maximum(x[0] @ wc + (x[1] - x[0]) @ wn + b, 0), atol=1e-12)
    np.testing.assert_allclose(out[1], np.maximum(x[1] @ wc + (x[0] - x[1]) @ wn + b, 0), atol=1e-12)


def test_local_operator_identical_points():
    params = randomize(init_model(small()))
    x = np.tile([[0.3, -1.0, 2.0]], (6, 1))
    wc, b = params["local1.w_center"].data, params["local1.b"].data
    out = local_operator(params, "local1", x, 3).data
    np.testing.assert_allclose(out, np.tile(np.maximum(x[0] @ wc + b, 0), (6, 1)), atol=1e-12)


def test_local_operator_k_too_large(rng):
    with pytest.raises(ConfigError):
        local_operator(init_model(small()), "local1", rng.normal(size=(4, 3)), 4)


def test_block_identity_at_init(rng):
    cfg = small(zero_init_residual=True)
    params = init_model(cfg)
    h = rng.normal(size=(2, 32, 8))
    assert np.array_equal(gda_block(params, "block1", h, cfg).data, h)


def test_block_constant_input_is_finite():
    cfg = small()
    params = randomize(init_model(cfg))
    out = gda_block(params, "block1", np.ones((1, 16, 8)), cfg).data
    assert np.all(np.isfinite(out))


def test_block_staged_oracle(rng):
    cfg = small()
    params = randomize(init_model(cfg), scale=0.3)
    h = rng.normal(size=(64, 8))
    split = disentangle_cloud(h, 16, cfg.graph_config())
    z = fuse(SgcamParams(params, "block1.sgcam", cfg.embed_dim), h, split)
    expected = h + T.mlp_forward(params, z, "block1.proj").data
    np.testing.assert_allclose(gda_block(params, "block1", h, cfg).data, expected, atol=1e-8)


def test_zero_network_classify_gives_bias():
    cfg = small()
    params = init_model(cfg)
    for t in T_params(params):
        t.data = np.zeros_like(t.data)
    params["head.b1"].data = np.array([0.5, -1.0, 2.0])
    logits = forward_classify(PointCloud(np.random.default_rng(0).normal(size=(20, 3))), params, cfg)
    assert np.array_equal(logits, [0.5, -1.0, 2.0])


def test_zero_network_segment_gives_bias():
    cfg = small(task="segmentation", part_counts=(3,))
    params = init_model(cfg)
    for t in T_params(params):
        t.data = np.zeros_like(t.data)
    params["seg0.out.b0"].data = np.array([1.0, 2.0, 3.0])
    out = forward_segment(PointCloud(np.random.default_rng(0).normal(size=(8, 3))), params,
                          replace(cfg, k_local=3, k_graph=3))
    assert np.array_equal(out, np.tile([1.0, 2.0, 3.0], (8, 1)))


def test_classify_permutation_invariance(rng):
    cfg = small()
    params = randomize(init_model(cfg), scale=0.3)
    x = rng.normal(size=(48, 3))
    perm = rng.permutation(48)
    a = forward_classify(PointCloud(x), params, cfg)
    b = forward_classify(PointCloud(x[perm]), params, cfg)
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_segment_permutation_equivariance(rng):
    cfg = small(task="segmentation", part_counts=(2, 3))
    params = randomize(init_model(cfg), scale=0.3)
    x = rng.normal(size=(40, 3))
    perm = rng.permutation(40)
    a = forward_segment(PointCloud(x), params, cfg, category=1)
    b = forward_segment(PointCloud(x[perm]), params, cfg, category=1)
    np.testing.assert_allclose(b, a[perm], atol=1e-8)


def test_segment_invalid_category(rng):
    cfg = small(task="segmentation", part_counts=(2,))
    with pytest.raises(ConfigError):
        forward_segment(PointCloud(rng.normal(size=(10, 3))), init_model(cfg), cfg, category=1)


def test_deterministic_logits(rng):
    cfg = ModelConfig(n_classes=4)
    x = rng.normal(size=(64, 3))
    a = forward_classify(PointCloud(x), init_model(cfg), cfg)
    b = forward_classify(PointCloud(x), init_model(cfg), cfg)
    assert a.tobytes() == b.tobytes()


def test_too_few_points(rng):
    cfg = ModelConfig(n_classes=4)
    with pytest.raises(InvalidInputError):
        forward_classify(PointCloud(rng.normal(size=(20, 3))), init_model(cfg), cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(use_self_attention=True)
    with pytest.raises(ConfigError):
        ModelConfig(local_width=0)
    with pytest.raises(ConfigError):
        ModelConfig(m=20).validate(30)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    cfg = small(m=5)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_count_params_examples():
    assert count_params({"w": T.Parameter(np.zeros((3, 4)), "w"), "b": T.Parameter(np.zeros(4), "b")}) == 16
    assert count_params({}) == 0
    assert count_params(init_model(ModelConfig())) <= 1_500_000


def test_batch_norm_variant_runs(rng):
    cfg = small(batch_norm=True)
    params = init_model(cfg)
    x = rng.normal(size=(2, 20, 3))
    train_out = classify_logits(params, cfg, x, training=True).data
    eval_out = classify_logits(params, cfg, x).data
    assert train_out.shape == eval_out.shape == (2, 3)
    assert not np.allclose(params["local1.bn.running_mean"].data, 0)


def test_variants_forward(rng):
    x = rng.normal(size=(2, 24, 3))
    for kw in ({"use_knn_local": False}, {"use_sharp": False}, {"use_gentle": False},
               {"use_sharp": False, "use_gentle": False, "use_self_attention": True},
               {"use_sharp": False, "use_gentle": False}, {"dynamic_adjacency": False}, {"row_softmax": True}):
        cfg = small(**kw)
        out = classify_logits(init_model(cfg), cfg, x).data
        assert out.shape == (2, 3) and np.all(np.isfinite(out)), kw


def test_trace_records_splits(rng):
    cfg = small()
    trace = []
    trunk(init_model(cfg), cfg, rng.normal(size=(1, 24, 3)), trace=trace)
    assert [t["block"] for t in trace] == ["block1", "block2"]
    assert trace[0]["split"].sharp_idx.shape == (1, 6)
    assert trace[0]["attention"].w_sharp.shape == (1, 24, 6)


def test_full_forward_gradients(rng):
    cfg = small()
    params = randomize(init_model(cfg), seed=3, scale=0.4)
    x = rng.normal(size=(2, 24, 3))
    labels = np.array([0, 2])

    def value():
        with T.no_grad():
            return float(T.cross_entropy(classify_logits(params, cfg, x), labels).data)

    for t in T_params(params):
        t.grad = None
    T.cross_entropy(classify_logits(params, cfg, x), labels).backward()
    for i, (name, t) in enumerate(params.items()):
        entries = sample_entries(t.data.size, 6, seed=i)
        num = numeric_grad(value, t.data, entries=entries)
        err = rel_error(t.grad.reshape(-1)[entries], num.reshape(-1)[entries])
        assert err <= 1e-4, (name, err)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(n_classes=4, batch_norm=True, dtype="float32")
    params = init_model(cfg)
    save_checkpoint(params, cfg, tmp_path / "m.gdan")
    back, cfg2 = load_checkpoint(tmp_path / "m.gdan")
    assert cfg2 == cfg
    assert set(back) == set(params)
    for k in params:
        assert back[k].data.dtype == params[k].data.dtype
        assert back[k].data.tobytes() == params[k].data.tobytes()
        assert isinstance(back[k], T.Parameter) == isinstance(params[k], T.Parameter)


def test_checkpoint_truncated(tmp_path):
    cfg = small()
    save_checkpoint(init_model(cfg), cfg, tmp_path / "m.gdan")
    data = (tmp_path / "m.gdan").read_bytes()
    (tmp_path / "cut.gdan").write_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.gdan")


def test_checkpoint_version_bump(tmp_path):
    cfg = small()
    save_checkpoint(init_model(cfg), cfg, tmp_path / "m.gdan")
    data = bytearray((tmp_path / "m.gdan").read_bytes())
    data[4:8] = struct.pack("<I", 2)
    (tmp_path / "v.gdan").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.gdan")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.gdan").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.gdan")


def test_checkpoint_shape_disagreement(tmp_path):
    cfg = small()
    params = init_model(cfg)
    params["head.b1"] = T.Parameter(np.zeros(5), "head.b1")
    save_checkpoint(params, cfg, tmp_path / "m.gdan")
    with pytest.raises(CheckpointError, match="head.b1"):
        load_checkpoint(tmp_path / "m.gdan")
