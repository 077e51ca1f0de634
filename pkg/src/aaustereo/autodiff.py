"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in execution order, which is a topological order of the
computation graph.  ``tape.backward(loss)`` walks the record once in reverse.
Outside a tape every operation is a plain numpy evaluation.
"""

import threading

import numpy as np

from . import _kernels
from .errors import NumericError, ShapeError

_state = threading.local()

# Fault injection registry consulted by the self-test harness.
FAULTS = set()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.data.shape[0]

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Named trainable tensor whose gradient buffer always exists."""

    __slots__ = ("trainable", "group")

    def __init__(self, data, name="", trainable=True, group="default"):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.group = group
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        self.grad += g

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.nodes = []
        self.visits = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss, seed=None):
        """Propagate d(loss) to every leaf that requires a gradient.

        Intermediate gradients are released as soon as their node is processed.
        """
        loss = astensor(loss)
        if seed is None:
            if loss.size != 1:
                raise ShapeError("non-scalar-objective", f"loss has shape {loss.shape}")
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=np.float64) if loss.grad is None else loss.grad + seed
        for node in reversed(self.nodes):
            self.visits += 1
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent._accumulate(pg)
            if node.out is not loss:
                node.out.grad = None
        self.nodes = []


def no_tape():
    """Context manager that suspends recording (used inside inference helpers)."""
    return _NoTape()


class _NoTape:
    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape.nodes.append(Node(out, parents, backward))
                break
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = astensor(a), astensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = astensor(a), astensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), back)


def neg(a):
    a = astensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = astensor(a)
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = astensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = astensor(a)
    e = np.exp(-np.abs(a.data))  # never overflows; keeps relative precision for negative inputs
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = astensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = astensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), back)


def clip(a, lo=None, hi=None):
    """Clamp; gradient passes only where the value was not clamped."""
    a = astensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x >= lo
    if hi is not None:
        keep &= x <= hi
    return _result(out, (a,), lambda g: (g * keep,))


def smooth_l1(e):
    """Elementwise 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise."""
    e = astensor(e)
    x = e.data
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return _result(out, (e,), lambda g: (g * np.clip(x, -1.0, 1.0),))


def where(cond, a, b):
    """Select from ``a`` where ``cond`` (a constant boolean array) holds, else ``b``."""
    a, b = astensor(a), astensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# linear algebra, reductions


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("shape-mismatch", "matmul operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("shape-mismatch", f"matmul {ad.shape} @ {bd.shape}")
    counter = getattr(_state, "mac_counter", None)
    if counter is not None:
        batch = np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
        counter.add(int(np.prod(batch, dtype=np.int64)) * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])
    out = ad @ bd

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), back)


class MacCounter:
    """Counts multiply-accumulates of every matmul executed inside the block."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += n

    def __enter__(self):
        self._prev = getattr(_state, "mac_counter", None)
        _state.mac_counter = self
        return self

    def __exit__(self, *exc):
        _state.mac_counter = self._prev
        return False


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = astensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (e / s),)

    return _result(out, (a,), back)


def softmax_lastdim(a):
    """Softmax over the last axis with max subtraction."""
    a = astensor(a)
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("empty-reduction", "softmax over an empty axis")
    if "softmax-sign" in FAULTS:
        x = -x
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    y2 = _kernels.softmax_forward(x2)
    sign = -1.0 if "softmax-sign" in FAULTS else 1.0
    return _result(
        y2.reshape(shape),
        (a,),
        lambda g: (sign * _kernels.softmax_backward(g.reshape(y2.shape), y2).reshape(shape),),
    )


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("shape-mismatch", f"layer_norm gamma/beta {gamma.shape}/{beta.shape} vs last dim {d}")
    if eps <= 0:
        raise ShapeError("bad-eps", "eps must be positive")
    shape = x.shape
    y2, xhat, rstd = _kernels.layer_norm_forward(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def back(g):
        dx, dg, db = _kernels.layer_norm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _result(y2.reshape(shape), (x, gamma, beta), back)


def conv2d(x, kernel, bias, stride=1, padding=0, groups=1):
    """Cross-correlation over (Cin, H, W) or (N, Cin, H, W) inputs; kernel is (Cout, Cin/groups, kh, kw)."""
    x, kernel, bias = astensor(x), astensor(kernel), astensor(bias)
    xd = x.data
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    cout, cin_g, kh, kw = kernel.shape
    if xd.shape[1] != cin_g * groups or cout % groups:
        raise ShapeError("shape-mismatch", f"conv2d input channels {xd.shape[1]} vs kernel {kernel.shape} groups={groups}")
    if bias.shape != (cout,):
        raise ShapeError("shape-mismatch", f"conv2d bias {bias.shape} vs Cout {cout}")
    if stride < 1 or padding < 0:
        raise ShapeError("shape-mismatch", "stride must be >= 1 and padding >= 0")
    if xd.shape[2] + 2 * padding < kh or xd.shape[3] + 2 * padding < kw:
        raise ShapeError("shape-mismatch", "kernel larger than padded input")
    out = _kernels.conv2d_forward(xd, kernel.data, bias.data, stride, padding, groups)
    kd = kernel.data

    def back(g):
        g4 = g[None] if squeeze else g
        dx, dw, db = _kernels.conv2d_backward(g4, xd, kd, stride, padding, groups)
        return (dx[0] if squeeze else dx), dw, db

    return _result(out[0] if squeeze else out, (x, kernel, bias), back)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = astensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    axes = list(range(astensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = astensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def back(g):
        z = np.zeros(shape)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), back)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    n = len(tensors)
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def pad(a, pad_width):
    """Zero padding; ``pad_width`` as for :func:`numpy.pad`."""
    a = astensor(a)
    pw = [tuple(p) for p in pad_width]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return _result(np.pad(a.data, pw), (a,), lambda g: (g[sl],))


def roll(a, shift, axis):
    a = astensor(a)
    inv = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _result(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, inv, axis=axis),))


def masked_fill(a, mask, value):
    """Replace entries where the constant boolean ``mask`` holds with ``value``."""
    a = astensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)
    return _result(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),))


def relative_skew(a):
    """Map (..., n, 2n-1) offset-indexed scores to (..., n, n) with out[i, j] = a[i, j - i + n - 1].

    Implemented with reshapes and slices only, so the backward pass is dense.
    """
    a = astensor(a)
    n = a.shape[-2]
    if a.shape[-1] != 2 * n - 1:
        raise ShapeError("offset-range", f"expected last dim {2 * n - 1}, got {a.shape[-1]}")
    if n == 1:
        return a
    lead = a.shape[:-2]
    flat = reshape(a, lead + (n * (2 * n - 1),))
    flat = getitem(flat, (Ellipsis, slice(n - 1, n - 1 + n * (2 * n - 2))))
    return getitem(reshape(flat, lead + (n, 2 * n - 2)), (Ellipsis, slice(0, n)))
