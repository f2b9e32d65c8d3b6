import numpy as np
import pytest
from gradcheck import numeric_grad, rel_error
from hypothesis import given
from hypothesis import strategies as st

from gdanet import tensor as T
from gdanet.errors import InvalidInputError, ShapeError

TOL = 1e-4


def check_op(build, *shapes, seed=0, positive=False):
    """Compare autodiff with finite differences for ``sum(build(*inputs) * w)``."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    probe = None

    def loss_value():
        nonlocal probe
        with T.no_grad():
            out = build(*[T.Tensor(x) for x in xs]).data
        if probe is None:
            probe = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float(np.sum(out * probe))

    loss_value()
    ts = [T.Tensor(x, requires_grad=True) for x in xs]
    out = build(*ts)
    T.sum(T.mul(out, T.Tensor(probe))).backward()
    for x, t in zip(xs, ts):
        err = rel_error(t.grad, numeric_grad(loss_value, x))
        assert err <= TOL, err


def test_matmul_identity():
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor(np.eye(2)))
    assert out.data.tolist() == [[1, 2], [3, 4]]


def test_square_derivative():
    x = T.Tensor([3.0], requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    assert x.grad.tolist() == [6.0]


def test_gradient_accumulates_over_reuse():
    x = T.Tensor([2.0, -1.0], requires_grad=True)
    T.sum(T.add(T.mul(x, x), T.scale(x, 3.0))).backward()
    np.testing.assert_allclose(x.grad, [7.0, 1.0])


def test_interior_grads_released_leaves_kept():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.relu(x)
    T.sum(y).backward()
    assert y.grad is None and x.grad is not None


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert y._backward is None and not y.requires_grad


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        T.relu(T.Tensor(np.ones(3), requires_grad=True)).backward()


def test_matmul_shape_error_names_both():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_cross_entropy_label_range():
    with pytest.raises(InvalidInputError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    labels = np.array([0, 2])
    ref = -np.mean(np.log(np.exp(logits) / np.exp(logits).sum(1, keepdims=True))[[0, 1], labels])
    assert abs(float(T.cross_entropy(T.Tensor(logits), labels).data) - ref) < 1e-12


def test_softmax_stable_for_large_logits():
    out = T.softmax(T.Tensor([[1000.0, 1000.0]]), axis=-1).data
    np.testing.assert_allclose(out, [[0.5, 0.5]])


def test_max_routes_to_first_argmax():
    x = T.Tensor([[1.0, 3.0, 3.0, 0.0]], requires_grad=True)
    T.sum(T.max(x, axis=-1)).backward()
    assert x.grad.tolist() == [[0, 1, 0, 0]]


def test_gather_max_routes_to_first_slot():
    x = T.Tensor([[1.0], [5.0], [5.0]], requires_grad=True)
    T.sum(T.gather_max(x, np.array([[2, 1, 0]]))).backward()
    assert x.grad.ravel().tolist() == [0, 0, 1]


def test_gather_rows_out_of_range():
    with pytest.raises(InvalidInputError):
        T.gather_rows(T.Tensor(np.ones((3, 2))), np.array([3]))


OP_CASES = [
    ("add_broadcast", lambda a, b: T.add(a, b), [(2, 3, 4), (4,)]),
    ("sub_broadcast", lambda a, b: T.sub(a, b), [(3, 4), (1, 4)]),
    ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    ("scale", lambda a: T.scale(a, -2.5), [(5,)]),
    ("relu", lambda a: T.relu(a), [(4, 6)]),
    ("matmul_2d", lambda a, b: T.matmul(a, b), [(3, 4), (4, 5)]),
    ("matmul_batched_weight", lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("matmul_batched_both", lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    ("transpose", lambda a: T.transpose(a), [(2, 3, 4)]),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    ("concat", lambda a, b: T.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    ("sum_axis", lambda a: T.sum(a, axis=1, keepdims=True), [(3, 4)]),
    ("mean", lambda a: T.mean(a, axis=0), [(3, 4)]),
    ("max_axis", lambda a: T.max(a, axis=1), [(2, 5, 3)]),
    ("max_last", lambda a: T.max(a, axis=-1), [(4, 7)]),
    ("softmax", lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    ("log_softmax", lambda a: T.log_softmax(a, axis=-1), [(3, 5)]),
    ("gather_rows", lambda a: T.gather_rows(a, np.array([[0, 2, 2], [1, 0, 3]])), [(2, 4, 3)]),
    ("gather_rows_2d", lambda a: T.gather_rows(a, np.array([3, 0, 3, 1])), [(4, 2)]),
    ("gather_max", lambda a: T.gather_max(a, np.array([[[1, 2], [0, 3]], [[3, 3], [2, 1]]])), [(2, 4, 3)]),
]


@pytest.mark.parametrize("name,build,shapes", OP_CASES)
def test_op_gradients(name, build, shapes):
    check_op(build, *shapes)


def test_cross_entropy_gradient():
    labels = np.array([1, 0, 3])
    check_op(lambda z: T.cross_entropy(z, labels), (3, 4))


def test_batch_norm_gradient():
    state = {"mean": np.zeros(3), "var": np.ones(3)}

    def build(x, g, b):
        return T.batch_norm(x, g, b, dict(state), training=True)

    check_op(build, (2, 5, 3), (3,), (3,))


def test_batch_norm_eval_uses_running_stats():
    state = {"mean": np.array([1.0]), "var": np.array([4.0])}
    out = T.batch_norm(T.Tensor([[3.0]]), T.Tensor([1.0]), T.Tensor([0.0]), state, training=False, eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0]])


def test_mlp_three_layers_gradients():
    params = {}
    T.init_mlp(params, "mlp", 4, [6, 5, 3], seed=3)
    x = np.random.default_rng(0).normal(size=(7, 4))
    probe = np.random.default_rng(1).normal(size=(7, 3))

    def value():
        with T.no_grad():
            return float(np.sum(T.mlp_forward(params, T.Tensor(x), "mlp").data * probe))

    T.sum(T.mul(T.mlp_forward(params, T.Tensor(x), "mlp"), T.Tensor(probe))).backward()
    for name, p in params.items():
        err = rel_error(p.grad, numeric_grad(value, p.data))
        assert err <= TOL, (name, err)


def test_mlp_width_mismatch():
    params = {}
    T.init_mlp(params, "mlp", 4, [3], seed=0)
    with pytest.raises(ShapeError):
        T.mlp_forward(params, T.Tensor(np.ones((2, 5))), "mlp")


def test_init_is_seeded():
    a = T.init_params((4, 3), seed=9)
    b = T.init_params((4, 3), seed=9)
    assert a.tobytes() == b.tobytes()
    assert np.abs(a).max() <= np.sqrt(6 / 4)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, c, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(n, c))
    out = T.softmax(T.Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.log_softmax(T.Tensor(x)).data, np.log(out), atol=1e-9)


@given(st.integers(2, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_gather_max_equals_gather_then_max(n, m, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, n, 3))
    idx = rng.integers(0, n, size=(2, m, k))
    fused = T.gather_max(T.Tensor(x), idx).data
    ref = T.max(T.gather_rows(T.Tensor(x), idx), axis=-2).data
    assert np.array_equal(fused, ref)


@given(st.integers(0, 2**31 - 1))
def test_gradients_finite(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(scale=50, size=(4, 5)), requires_grad=True)
    loss = T.cross_entropy(T.relu(x), rng.integers(0, 5, size=4))
    loss.backward()
    assert np.all(np.isfinite(x.grad))


def test_mlp_zero_weights_give_zero():
    params = {}
    T.init_mlp(params, "mlp", 4, [5, 3], seed=0)
    for p in params.values():
        p.data[...] = 0
    assert not T.mlp_forward(params, T.Tensor(np.ones((2, 4))), "mlp").data.any()


def test_mlp_identity_layer():
    params = {}
    T.init_mlp(params, "mlp", 4, [4], seed=0)
    params["mlp.w0"].data = np.eye(4)
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(T.mlp_forward(params, T.Tensor(x), "mlp").data, x)


def test_mlp_two_layer_oracle():
    params = {}
    T.init_mlp(params, "mlp", 4, [6, 3], seed=5)
    for p in params.values():
        p.data = np.random.default_rng(1).normal(size=p.shape)
    x = np.random.default_rng(2).normal(size=(8, 4))
    w0, b0, w1, b1 = (params[f"mlp.{n}"].data for n in ("w0", "b0", "w1", "b1"))
    hidden = np.maximum(x @ w0 + b0, 0)
    np.testing.assert_allclose(T.mlp_forward(params, T.Tensor(x), "mlp").data, hidden @ w1 + b1, atol=1e-10)


def test_zero_init_scheme():
    assert not T.init_params((3, 4), "zeros").any()


def test_kaiming_sample_statistics():
    v = T.init_params((6, 10_000), seed=4)
    assert np.abs(v).max() <= 1.0
    assert abs(v.mean()) <= 0.02


def test_log_softmax_extreme_logits():
    out = T.log_softmax(T.Tensor(np.array([[1e4, 0.0, -1e4]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.0, -1e4, -2e4]], atol=1e-9)
