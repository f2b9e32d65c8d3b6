"""Dense tensors with tape-free reverse-mode automatic differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that pushes the output gradient back to its inputs.
``Tensor.backward`` walks the recorded graph in reverse topological order.

Data is a plain ``numpy.ndarray``; the dtype of the inputs is preserved, so
float64 tensors give the gradient-check precision and float32 the training
throughput.
"""

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are consumed; only leaves keep theirs
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named, trainable tensor."""

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


as_tensor = _as_tensor


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _push(t, g):
    if t.requires_grad:
        t._accumulate(g)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def scale(a, c):
    c = float(c)
    data = a.data * a.data.dtype.type(c)

    def backward(g):
        _push(a, g * g.dtype.type(c))

    return _make(data, (a,), backward)


def mul(a, b):
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, b)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _push(a, _unbroadcast(g * b.data, a.shape))
        _push(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def relu(a):
    mask = a.data > 0
    data = np.where(mask, a.data, a.data.dtype.type(0))

    def backward(g):
        _push(a, g * mask)

    return _make(data, (a,), backward)


# ------------------------------------------------------------------- linear


def matmul(a, b):
    """Matrix product with broadcasting over leading dimensions."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # shared weight: fold every leading dim into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _push(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _push(b, a2.T @ g2)

        return _make(data, (a, b), backward)

    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _push(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), backward)


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
    data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        _push(a, np.swapaxes(g, -1, -2))

    return _make(data, (a,), backward)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        _push(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _push(t, piece)

    return _make(data, tuple(tensors), backward)


def gather_rows(x, idx):
    """Select rows of ``x`` along its second-to-last axis.

    ``x`` is ``(N, C)`` or ``(B, N, C)``.  For a batched ``x``, ``idx`` has
    leading dimension ``B`` and indexes within each cloud.  The result has
    shape ``idx.shape + (C,)``.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidInputError(f"gather indices must be integers, got {idx.dtype}")
    n, c = x.shape[-2], x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidInputError(f"gather index out of range for {n} rows")
    if x.ndim == 2:
        flat = idx.reshape(-1)
    elif x.ndim == 3:
        b = x.shape[0]
        if idx.shape[0] != b:
            raise ShapeError(f"batched gather: index batch {idx.shape[0]} != data batch {b}")
        offsets = (np.arange(b) * n).reshape((b,) + (1,) * (idx.ndim - 1))
        flat = (idx + offsets).reshape(-1)
    else:
        raise ShapeError(f"gather_rows expects rank 2 or 3 data, got shape {x.shape}")
    src = x.data.reshape(-1, c)
    data = src[flat].reshape(idx.shape + (c,))

    def backward(g):
        g2 = g.reshape(-1, c)
        scatter = sp.csr_matrix(
            (np.ones(flat.size, dtype=g2.dtype), (flat, np.arange(flat.size))),
            shape=(src.shape[0], flat.size),
        )
        _push(x, np.asarray(scatter @ g2).reshape(x.shape))

    return _make(data, (x,), backward)


def gather_max(x, idx):
    """``out[..., i, :] = max_j x[..., idx[i, j], :]`` without materializing the gather.

    ``x`` is ``(N, C)`` or ``(B, N, C)`` and ``idx`` is ``(M, k)`` or
    ``(B, M, k)``. The gradient goes to the first maximizing slot ``j``.
    """
    idx = np.asarray(idx)
    if idx.ndim != x.ndim or idx.shape[-1] < 1:
        raise ShapeError(f"gather_max needs rank-{x.ndim} indices with a neighbor axis, got {idx.shape}")
    n, c = x.shape[-2], x.shape[-1]
    if idx.min() < 0 or idx.max() >= n:
        raise InvalidInputError(f"gather index out of range for {n} rows")
    if x.ndim == 3:
        b = x.shape[0]
        if idx.shape[0] != b:
            raise ShapeError(f"batched gather: index batch {idx.shape[0]} != data batch {b}")
        idx = idx + (np.arange(b) * n)[:, None, None]
    src = x.data.reshape(-1, c)
    flat = idx.reshape(-1, idx.shape[-1])
    data = src[flat[:, 0]]
    for j in range(1, flat.shape[1]):
        np.maximum(data, src[flat[:, j]], out=data)
    out_shape = idx.shape[:-1] + (c,)

    def backward(g):
        # recover the first maximizing slot per (row, channel)
        slot = np.zeros(data.shape, dtype=np.intp)
        for j in range(flat.shape[1] - 1, -1, -1):
            np.copyto(slot, j, where=src[flat[:, j]] == data)
        rows = np.take_along_axis(flat, slot, axis=1)
        lin = (rows * c + np.arange(c)).ravel()
        full = np.bincount(lin, weights=g.reshape(-1), minlength=src.size).astype(src.dtype, copy=False)
        _push(x, full.reshape(x.shape))

    return _make(data.reshape(out_shape), (x,), backward)


# --------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push(a, np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis):  # noqa: A001
    """Maximum along one axis; the gradient routes to the first argmax."""
    axis = axis % a.ndim
    moved = np.moveaxis(a.data, axis, 0)
    if moved.shape[0] <= 64:
        # slab sweep: contiguous elementwise compares beat a strided argmax
        data = moved[0].copy()
        arg = np.zeros(data.shape, dtype=np.intp)
        for j in range(1, moved.shape[0]):
            better = moved[j] > data
            np.copyto(data, moved[j], where=better)
            arg[better] = j
    else:
        arg = np.argmax(a.data, axis=axis)
        data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _push(a, full)

    return _make(data, (a,), backward)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _push(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), backward)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        _push(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` has shape ``labels.shape + (K,)``.
    """
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"label out of range for {k} classes")
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp.data, labels[..., None], axis=-1)[..., 0]
    count = labels.size
    data = np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward(g):
        full = np.zeros_like(logp.data)
        np.put_along_axis(full, labels[..., None], -g / count, axis=-1)
        _push(logp, full)

    return _make(data, (logp,), backward)


def batch_norm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over every axis but the last.

    ``state`` is a dict holding ``mean`` and ``var`` running buffers; it is
    updated in place when ``training`` is true.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state["mean"] = (1 - momentum) * state["mean"] + momentum * mu
        state["var"] = (1 - momentum) * state["var"] + momentum * var
    else:
        mu, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    data = xhat * gamma.data + beta.data
    count = x.data.size // x.shape[-1]

    def backward(g):
        _push(gamma, (g * xhat).sum(axis=axes))
        _push(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                gx = (gx - gx.sum(axis=axes) / count - xhat * (gx * xhat).sum(axis=axes) / count)
            _push(x, (gx * inv).astype(x.dtype))

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------- initialization


def init_params(shape, scheme="kaiming_uniform", seed=0, dtype=np.float64):
    """Draw an initial parameter array.

    ``kaiming_uniform`` samples U(-b, b) with ``b = sqrt(6 / fan_in)``, where
    ``fan_in`` is the first dimension of ``shape``.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "kaiming_uniform":
        fan_in = shape[0] if shape else 1
        bound = np.sqrt(6.0 / fan_in)
        rng = np.random.default_rng(seed)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    raise InvalidInputError(f"unknown init scheme {scheme!r}")


def init_mlp(params, prefix, in_dim, widths, seed, dtype=np.float64, zero_last=False):
    """Register ``w{i}``/``b{i}`` parameters for an MLP under ``prefix``."""
    if not widths:
        raise ShapeError(f"MLP {prefix!r} needs at least one layer width")
    seeds = np.random.SeedSequence(seed).generate_state(len(widths))
    fan_in = in_dim
    for i, width in enumerate(widths):
        last = i == len(widths) - 1
        scheme = "zeros" if (zero_last and last) else "kaiming_uniform"
        w = init_params((fan_in, width), scheme, int(seeds[i]), dtype)
        params[f"{prefix}.w{i}"] = Parameter(w, f"{prefix}.w{i}")
        params[f"{prefix}.b{i}"] = Parameter(np.zeros(width, dtype=dtype), f"{prefix}.b{i}")
        fan_in = width
    return params


def mlp_forward(params, x, prefix, n_layers=None):
    """Pointwise MLP: affine + ReLU per hidden layer, final layer affine only.

    Weights are shared across every leading axis of ``x``.
    """
    if n_layers is None:
        n_layers = 0
        while f"{prefix}.w{n_layers}" in params:
            n_layers += 1
    if n_layers == 0:
        raise ShapeError(f"no MLP registered under {prefix!r}")
    h = x
    for i in range(n_layers):
        w = params[f"{prefix}.w{i}"]
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"{prefix}.w{i}: input width {h.shape[-1]} != weight rows {w.shape[0]}")
        h = add(matmul(h, w), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = relu(h)
    return h
