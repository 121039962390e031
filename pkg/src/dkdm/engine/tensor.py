"""Dense tensors with eager reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions. Calling
:meth:`Tensor.backward` walks the recorded graph once in reverse topological
order.

Broadcasting is deliberately narrow: the result of a binary elementwise op has
the shape of one of its operands, and the other operand is either identical,
a suffix of it (a shared leading batch extent), or of equal rank with size-1
axes (per-sample or per-channel coefficients).
"""

from contextlib import contextmanager

import numpy as np

from dkdm.errors import NumericError, ShapeError, StateError

_GRAD_ENABLED = True
_BATCH_INVARIANT = False
_DEFAULT_DTYPE = np.float32


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def batch_invariant():
    """Route matrix products through a row-independent kernel.

    BLAS gemm may change its accumulation order with the number of rows, so a
    batch evaluated at once can differ in the last bit from the same rows
    evaluated one at a time. Inside this block products use ``np.einsum``,
    whose per-row result does not depend on the batch extent. Slower; meant for
    verification.
    """
    global _BATCH_INVARIANT
    prev = _BATCH_INVARIANT
    _BATCH_INVARIANT = True
    try:
        yield
    finally:
        _BATCH_INVARIANT = prev


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used when wrapping python scalars/lists."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def grad_enabled():
    return _GRAD_ENABLED


def _as_array(data, dtype=None):
    if isinstance(data, np.ndarray):
        if dtype is not None and data.dtype != dtype:
            return data.astype(dtype)
        if data.dtype not in (np.float32, np.float64):
            return data.astype(_DEFAULT_DTYPE)
        return data
    return np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)


class Tensor:
    """A node in the computation graph.

    ``data`` is a float32 or float64 ndarray. Leaves created with
    ``requires_grad=True`` receive their gradient in ``.grad`` after
    :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "stop")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.stop = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ---------------------------------------------------------------- backward
    def record(self):
        """Nodes reachable from this tensor in topological order (parents first)."""
        order = []
        seen = set()
        stack = [(self, False)]
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

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        The graph is released afterwards; a second call raises StateError.
        """
        if not self.requires_grad:
            raise StateError("backward called on a tensor that does not require grad")
        if self._backward is None and self._parents == () and self.op == "released":
            raise StateError("backward called twice on the same graph")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("implicit output gradient needs a scalar output")
            g = np.ones_like(self.data)
        else:
            g = _as_array(grad.data if isinstance(grad, Tensor) else grad, self.data.dtype)
            if g.shape != self.data.shape:
                raise ShapeError(f"output grad shape {g.shape} != output shape {self.data.shape}")
        order = self.record()
        grads = {id(self): g}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                contribs = node._backward(g)
                for parent, pg in zip(node._parents, contribs):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            if node is not self:
                node._backward = None
                node._parents = ()
        self._backward = None
        self._parents = ()
        self.op = "released"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_finite(out, op):
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by node '{op}'")
    return out


def _make(out, parents, backward, op):
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    t.stop = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _broadcast_target(a, b, op):
    """Return the result shape for a binary elementwise op, enforcing the narrow rule."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    for big, small in ((sa, sb), (sb, sa)):
        if len(small) < len(big) and big[len(big) - len(small):] == small:
            return big
        if len(small) == len(big) and all(s == 1 or s == g for s, g in zip(small, big)):
            return big
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------- ops
def add(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_target(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_target(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_target(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def affine(a, scale=1.0, shift=0.0):
    """``scale * a + shift`` for python scalars."""
    a = _wrap(a)
    s = a.data.dtype.type(scale)
    out = a.data * s
    if shift != 0.0:
        out = out + a.data.dtype.type(shift)

    def backward(g):
        return (g * s,)

    return _make(out, (a,), backward, "affine")


def _mm(x, y):
    if _BATCH_INVARIANT:
        return np.einsum("ik,kj->ij", x, y)
    return x @ y


def matmul(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _mm(g, bd.T) if a.requires_grad else None
        gb = _mm(ad.T, g) if b.requires_grad else None
        return ga, gb

    return _make(_mm(ad, bd), (a, b), backward, "matmul")


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


def _sigmoid(x):
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def silu(a):
    a = _wrap(a)
    sig = _sigmoid(a.data)
    x = a.data

    def backward(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(x * sig, (a,), backward, "silu")


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


def exp(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def tsum(a, axis=None):
    a = _wrap(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=False)
    out = np.asarray(out, dtype=a.data.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None):
    a = _wrap(a)
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[i] for i in axes]))
    out = np.asarray(np.mean(a.data, axis=axis), dtype=a.data.dtype)
    inv = a.data.dtype.type(1.0 / n)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _make(out, (a,), backward, "mean")


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (a,), backward, "reshape")


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def stop_gradient(a):
    """Same values, but no gradient flows back through this edge."""
    a = _wrap(a)
    t = Tensor(a.data)
    t.op = "stop_gradient"
    t.stop = True
    return t


def _im2col(xp, k, h, w):
    # xp: (B, H+k-1, W+k-1, C) channels-last -> (B*H*W, k*k*C)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    b, c = xp.shape[0], xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def conv2d(x, weight, bias=None):
    """Stride-1, zero-padded ('same') 2-D convolution.

    x: (B, C, H, W); weight: (Cout, C, k, k) with odd k; bias: (Cout,) or None.
    Internally channels-last im2col followed by a single matrix product.
    """
    x = _wrap(x)
    weight = _wrap(weight, x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    pad = k // 2
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.data.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xp, k, h, w)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k * c, cout)
    out = _mm(cols, wmat)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias, x)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias {bias.shape} != ({cout},)")
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(b, h, w, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * w, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = _mm(cols.T, gm).reshape(k, k, c, cout).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            # input gradient = 'same' correlation of g with the flipped, transposed kernel
            gp = np.zeros((b, h + 2 * pad, w + 2 * pad, cout), dtype=g.dtype)
            gp[:, pad:pad + h, pad:pad + w, :] = g.transpose(0, 2, 3, 1)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
            wflip = np.ascontiguousarray(wflip).reshape(k * k * cout, c)
            gx = _mm(_im2col(gp, k, h, w), wflip).reshape(b, h, w, c)
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, tuple(parents), backward, "conv2d")


def square(a):
    return mul(a, a)


def grad(output, inputs, output_grad=None):
    """Gradients of ``output`` with respect to a name -> Tensor mapping.

    Leaves keep any previously accumulated ``.grad``; this helper resets them
    first so the returned arrays are exactly this backward pass.
    """
    for t in inputs.values():
        t.grad = None
    output.backward(output_grad)
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in inputs.items()}
