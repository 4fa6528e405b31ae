"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array, float32 by default; inside :func:`float64_mode`
new tensors are float64, which the gradient checks rely on. Every differentiable
op records its parents and a closure that maps the output gradient to the
parent gradients; :meth:`Tensor.backward` walks that tape in reverse
topological order.

Shapes must match exactly. The one broadcast allowed is adding a bias
vector along the last axis (:func:`add_bias`).
"""

from contextlib import contextmanager

import numpy as np

DTYPE = np.float32

_grad_enabled = True
_default_dtype = DTYPE


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar; all of these route through the checked ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@contextmanager
def float64_mode():
    """Create new tensors (and parameters) in float64; for gradient checks."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype():
    return _default_dtype


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(data, parents, backward_fn):
    """Wrap an op result; record it on the tape when any parent needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _toposort(root):
    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients add to whatever is already stored, so two calls without
    zeroing sum their contributions. Interior gradients are not retained.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"internal: grad shape {pg.shape} for tensor {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return make_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def add_bias(x, b):
    """x[..., :] + b with b of shape (x.shape[-1],)."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = x.data.ndim - 1

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0) if lead else g

    return make_op(x.data + b.data, (x, b), bw)


def relu(x):
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def elu_plus_one(x):
    """elu(x) + 1: x + 1 for x >= 0, exp(x) for x < 0. Strictly positive."""
    xd = x.data
    neg = xd < 0
    out = np.where(neg, np.exp(np.minimum(xd, 0)), xd + 1).astype(xd.dtype, copy=False)
    deriv = np.where(neg, out, 1).astype(xd.dtype, copy=False)
    return make_op(out, (x,), lambda g: (g * deriv,))


def tanh(x):
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1 - out * out),))


def square(x):
    xd = x.data
    return make_op(xd * xd, (x,), lambda g: (2 * g * xd,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_all(x):
    shape = x.shape
    return make_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean_all(x):
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    out = x.data.reshape(shape)
    if int(np.prod(out.shape)) != int(np.prod(old)):
        raise ShapeError(f"reshape: cannot view {old} as {shape}")
    return make_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x):
    """Swap the last two axes."""
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return make_op(out, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),))


def slice_last(x, start, stop):
    shape = x.shape
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return make_op(out, (x,), bw)


def slice_first(x, start, stop):
    """x[start:stop] along the leading axis."""
    shape = x.shape
    out = np.ascontiguousarray(x.data[start:stop])

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return make_op(out, (x,), bw)


def concat_last(parts):
    """Concatenate along the last axis; leading shapes must agree."""
    for p in parts[1:]:
        if p.shape[:-1] != parts[0].shape[:-1]:
            raise ShapeError(f"concat_last: {p.shape} incompatible with {parts[0].shape}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)

    def bw(g):
        return tuple(np.ascontiguousarray(g[..., bounds[i]:bounds[i + 1]])
                     for i in range(len(parts)))

    return make_op(out, tuple(parts), bw)


def concat_rows(parts):
    """Concatenate along the second-to-last axis."""
    sizes = [p.shape[-2] for p in parts]
    for p in parts[1:]:
        if p.shape[:-2] != parts[0].shape[:-2] or p.shape[-1] != parts[0].shape[-1]:
            raise ShapeError(f"concat_rows: {p.shape} incompatible with {parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=-2)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.ascontiguousarray(g[..., bounds[i]:bounds[i + 1], :])
                     for i in range(len(parts)))

    return make_op(out, tuple(parts), bw)


def gather_rows(x, idx, weights=None):
    """out[k] = sum_j weights[k, j] * x[idx[k, j]] for a 2-D x.

    ``idx`` is an integer array of shape (K,) or (K, J); with no weights the
    rows are copied.
    """
    from . import kernels

    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[:, None]
    if weights is None:
        weights = np.ones(idx.shape, dtype=x.dtype)
    weights = np.ascontiguousarray(weights, dtype=x.dtype)
    if weights.shape != idx.shape:
        raise ShapeError(f"gather_rows: weights {weights.shape} vs idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    n_rows = x.shape[0]
    out = kernels.gather_rows(x.data, idx, weights)
    return make_op(out, (x,), lambda g: (kernels.scatter_rows(np.ascontiguousarray(g), idx,
                                                              weights, n_rows),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Accepts (m, k) @ (k, n), or batched (B, m, k) @ (B, k, n) with equal
    batch sizes. Backward: dA = dC B^T, dB = A^T dC.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """Apply a (d_in, d_out) weight to the last axis of x, plus optional bias."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, lead + (w.shape[1],))


# ---------------------------------------------------------------------------
# fused normalizations
# ---------------------------------------------------------------------------


def softmax_rows(x):
    """Softmax along the last axis, stabilized by subtracting the row max."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    out = (xhat * gd + bd).astype(xd.dtype, copy=False)
    return make_op(out, (x, gamma, beta), bw)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy over rows whose target is >= 0.

    ``logits`` has shape (..., C); ``targets`` is an integer array of the
    leading shape, with -1 marking ignored rows.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    t = targets.reshape(-1)
    valid = t >= 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: no valid targets")
    if t.max() >= c:
        raise IndexError(f"cross_entropy: target {t.max()} outside {c} classes")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.nonzero(valid)[0]
    picked = shifted[rows, t[rows]]
    loss = (lse[rows] - picked).sum() / n
    shape = logits.shape

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[~valid] = 0
        p[rows, t[rows]] -= 1
        return ((p * (g / n)).astype(flat.dtype).reshape(shape),)

    return make_op(np.asarray(loss, dtype=flat.dtype), (logits,), bw)
