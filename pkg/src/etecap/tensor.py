"""Dense tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every operation records its parents and a
closure computing parent gradients from the output gradient.  ``backward``
walks the graph once in reverse topological order and *adds* into the ``grad``
accumulator of every tensor that requires gradients, so repeated backward
calls accumulate (which the gradient-accumulation training loop relies on).

Broadcasting is deliberately restricted: two shapes are compatible only when
they are equal or one is a trailing suffix of the other (leading-batch
broadcast).  Anything fancier raises ``DimensionError``.
"""

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(name):
    """Switch the default precision ("float64" default, "float32" opt-in)."""
    global _DEFAULT_DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported dtype {name!r}")
    _DEFAULT_DTYPE = np.float32 if name == "float32" else np.float64


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array node in the autodiff graph.

    ``grad`` starts absent (None) and is created on the first backward pass;
    its shape always matches ``data``.  Leaves are created by the caller;
    interior nodes are created by the ops below and carry parent links plus
    a backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything funnels into the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return mul(tensor_sum(self, axis=axis), 1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data, parents, backward_fn):
    """Create an op result; graph links are dropped when no parent needs grad."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _broadcast_shapes(sa, sb):
    """Allow equal shapes or one shape being a trailing suffix of the other."""
    if sa == sb:
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(
        f"shapes {sa} and {sb} are not leading-batch broadcastable"
    )


def _reduce_to(grad, shape):
    """Sum an output gradient over the leading axes broadcast added."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a.shape, b.shape)
    out_data = a.data + b.data

    def backward_fn(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape)))

    return _make(out_data, (a, b), backward_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a.shape, b.shape)
    out_data = a.data * b.data

    def backward_fn(g):
        return (
            (a, _reduce_to(g * b.data, a.shape)),
            (b, _reduce_to(g * a.data, b.shape)),
        )

    return _make(out_data, (a, b), backward_fn)


def neg(a):
    a = _as_tensor(a)

    def backward_fn(g):
        return ((a, -g),)

    return _make(-a.data, (a,), backward_fn)


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        return ((a, g * (1.0 - out_data * out_data)),)

    return _make(out_data, (a,), backward_fn)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    # two-branch form avoids exp overflow for large |x|
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_fn(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    return _make(out_data, (a,), backward_fn)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        return ((a, g * (a.data > 0)),)

    return _make(out_data, (a,), backward_fn)


def log(a, floor=None):
    """Natural log; with ``floor`` the input is clamped from below first.

    Clamped coordinates behave as constants (zero gradient), matching the
    central-difference view of the clamp.
    """
    a = _as_tensor(a)
    if floor is None:
        out_data = np.log(a.data)

        def backward_fn(g):
            return ((a, g / a.data),)
    else:
        clamped = np.maximum(a.data, floor)
        out_data = np.log(clamped)
        live = a.data >= floor

        def backward_fn(g):
            return ((a, g * live / clamped),)

    return _make(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim == 2 and b.ndim == 2:
        if sa[1] != sb[0]:
            raise DimensionError(f"matmul: inner extents differ for {sa} x {sb}")
        out_data = a.data @ b.data

        def backward_fn(g):
            return ((a, g @ b.data.T), (b, a.data.T @ g))
    elif a.ndim == 2 and b.ndim == 1:
        if sa[1] != sb[0]:
            raise DimensionError(f"matmul: inner extents differ for {sa} x {sb}")
        out_data = a.data @ b.data

        def backward_fn(g):
            return ((a, np.outer(g, b.data)), (b, a.data.T @ g))
    elif a.ndim == 1 and b.ndim == 2:
        if sa[0] != sb[0]:
            raise DimensionError(f"matmul: inner extents differ for {sa} x {sb}")
        out_data = a.data @ b.data

        def backward_fn(g):
            return ((a, b.data @ g), (b, np.outer(a.data, g)))
    else:
        raise DimensionError(f"matmul: unsupported ranks {sa} x {sb}")

    return _make(out_data, (a, b), backward_fn)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def backward_fn(g):
        return ((a, g.T),)

    return _make(a.data.T, (a,), backward_fn)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    in_shape = a.shape

    def backward_fn(g):
        return ((a, g.reshape(in_shape)),)

    return _make(out_data, (a,), backward_fn)


def concat(a, b):
    """Concatenate along the last axis; all leading extents must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 1:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading extents differ {a.shape} vs {b.shape}")
    p = a.shape[-1]
    out_data = np.concatenate([a.data, b.data], axis=-1)

    def backward_fn(g):
        return ((a, g[..., :p]), (b, g[..., p:]))

    return _make(out_data, (a, b), backward_fn)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack of zero tensors")
    shape0 = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape0:
            raise DimensionError(f"stack: shapes differ {shape0} vs {t.shape}")
    out_data = np.stack([t.data for t in ts], axis=0)

    def backward_fn(g):
        return tuple((t, g[i]) for i, t in enumerate(ts))

    return _make(out_data, tuple(ts), backward_fn)


def tensor_sum(a, axis=None):
    a = _as_tensor(a)
    if axis is None:
        out_data = np.asarray(a.data.sum())

        def backward_fn(g):
            return ((a, np.broadcast_to(g, a.shape).copy()),)
    else:
        out_data = a.data.sum(axis=axis)
        ax = axis if axis >= 0 else a.ndim + axis

        def backward_fn(g):
            return ((a, np.repeat(np.expand_dims(g, ax), a.shape[ax], axis=ax)),)

    return _make(out_data, (a,), backward_fn)


def take(a, index):
    """Select one entry of a vector as a scalar tensor."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise DimensionError(f"take expects a vector, got shape {a.shape}")
    index = int(index)
    out_data = np.asarray(a.data[index])

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return ((a, ga),)

    return _make(out_data, (a,), backward_fn)


def take_row(a, index):
    """Select one row of a matrix (embedding lookup)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_row expects a matrix, got shape {a.shape}")
    index = int(index)
    out_data = a.data[index].copy()

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return ((a, ga),)

    return _make(out_data, (a,), backward_fn)


def narrow(a, start, length):
    """Contiguous slice of a vector."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise DimensionError(f"narrow expects a vector, got shape {a.shape}")

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[start:start + length] = g
        return ((a, ga),)

    return _make(a.data[start:start + length].copy(), (a,), backward_fn)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, out_data * (g - dot)),)

    return _make(out_data, (a,), backward_fn)


def conv2d(x, w, b, stride=1):
    """2D valid convolution: x (C_in,H,W), w (C_out,C_in,kh,kw), b (C_out,).

    Implemented as an im2col matrix product; the backward pass scatters the
    patch gradient back with one strided add per kernel offset.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks x{x.shape} w{w.shape}")
    c_in, h, wid = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise DimensionError(f"conv2d: channel mismatch x{x.shape} w{w.shape}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {b.shape}, expected ({c_out},)")
    if kh > h or kw > wid:
        raise DimensionError(
            f"conv2d: input {h}x{wid} smaller than kernel {kh}x{kw}"
        )
    h_out = (h - kh) // stride + 1
    w_out = (wid - kw) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]            # (C_in, h_out, w_out, kh, kw)
    patches = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * kh * kw)
    w_mat = w.data.reshape(c_out, -1)
    out_mat = patches @ w_mat.T + b.data                # (h_out*w_out, C_out)
    out_data = out_mat.T.reshape(c_out, h_out, w_out)

    def backward_fn(g):
        g_mat = g.reshape(c_out, h_out * w_out).T       # (h_out*w_out, C_out)
        gb = g_mat.sum(axis=0)
        gw = (g_mat.T @ patches).reshape(w.shape)
        gp = (g_mat @ w_mat).reshape(h_out, w_out, c_in, kh, kw)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                    gp[:, :, :, i, j].transpose(2, 0, 1)
                )
        return ((x, gx), (w, gw), (b, gb))

    return _make(out_data, (x, w, b), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def _topo_order(root):
    """Iterative post-order over parent links (graphs can be deep)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(node) into every requires_grad tensor's ``grad``.

    Each call adds one full gradient; calling twice doubles the accumulators.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def finite_difference_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure Tensor -> scalar Tensor function.  ``x.grad`` is
    reset as a side effect.  The relative error per coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    for a_val, n_val in zip(analytic.reshape(-1), numeric):
        denom = max(abs(a_val), abs(n_val), 1e-8)
        worst = max(worst, abs(a_val - n_val) / denom)
    if math.isnan(worst):
        raise NumericError("finite_difference_check produced NaN")
    return worst
