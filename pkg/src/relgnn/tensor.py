"""Reverse-mode automatic differentiation on float64 numpy arrays.

The engine is deliberately small: a Tensor wraps an ndarray together with an
optional gradient and a backward closure, operations are plain module-level
functions, and `backward` walks the recorded graph once in reverse
topological order. Broadcasting is restricted to the two cases the models
actually need (exact shape match, or a rank-1 bias added along the last
axis); anything else raises DimensionError instead of silently following
numpy semantics.

Segment operations (segment_sum / segment_mean / segment_softmax) reduce
contiguous row blocks of a matrix and are the workhorses for edge-to-node
aggregation: callers sort edges by destination once and describe the blocks
with an offsets vector.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError

# recording is toggled per thread so concurrent runs cannot interfere
_state = threading.local()


def _recording():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block. Useful for evaluation."""
    prev = _recording()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    `op` names the producing operation ("leaf" for inputs), `_parents` holds
    the direct inputs that require gradients, and `_backward` is a closure
    that takes the output gradient and accumulates into the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data):
    """A leaf tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _result(data, op, parents, backward):
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    out.op = op
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss, free_graph=False):
    """Run reverse mode from a scalar tensor.

    Gradients accumulate into `.grad` of every tensor reachable from `loss`
    that requires one. With `free_graph=True` each interior node is stripped
    of its closure, parents, and gradient right after use, which bounds peak
    memory during training; the graph cannot be replayed afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with no recorded graph")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if free_graph and node._parents:
            node._parents = ()
            node._backward = None
            node.grad = None


# ---------------------------------------------------------------------------
# shape plumbing

def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _bias_mode(sa, sb):
    """Classify the allowed broadcast: 'same', 'b_bias', or 'a_bias'."""
    if sa == sb:
        return "same"
    if len(sb) == 1 and len(sa) > 1 and sa[-1] == sb[0]:
        return "b_bias"
    if len(sa) == 1 and len(sb) > 1 and sb[-1] == sa[0]:
        return "a_bias"
    raise DimensionError(f"shapes {sa} and {sb} are neither equal nor a rank-1 bias match")


def _reduce_to_bias(g, n):
    return g.reshape(-1, n).sum(axis=0)


# ---------------------------------------------------------------------------
# arithmetic

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs [m,k] @ [k,n], got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return _result(ad @ bd, "matmul", (a, b), bw)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _bias_mode(a.shape, b.shape)

    def bw(g):
        if mode == "b_bias":
            _accumulate(a, g)
            _accumulate(b, _reduce_to_bias(g, b.shape[0]))
        elif mode == "a_bias":
            _accumulate(a, _reduce_to_bias(g, a.shape[0]))
            _accumulate(b, g)
        else:
            _accumulate(a, g)
            _accumulate(b, g)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _bias_mode(a.shape, b.shape)

    def bw(g):
        if mode == "b_bias":
            _accumulate(a, g)
            _accumulate(b, -_reduce_to_bias(g, b.shape[0]))
        elif mode == "a_bias":
            _accumulate(a, _reduce_to_bias(g, a.shape[0]))
            _accumulate(b, -g)
        else:
            _accumulate(a, g)
            _accumulate(b, -g)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _bias_mode(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if mode == "b_bias":
            _accumulate(a, g * bd)
            _accumulate(b, _reduce_to_bias(g * ad, b.shape[0]))
        elif mode == "a_bias":
            _accumulate(a, _reduce_to_bias(g * bd, a.shape[0]))
            _accumulate(b, g * ad)
        else:
            _accumulate(a, g * bd)
            _accumulate(b, g * ad)

    return _result(ad * bd, "mul", (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"div needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        _accumulate(a, g / bd)
        _accumulate(b, -g * ad / (bd * bd))

    return _result(ad / bd, "div", (a, b), bw)


def one_minus(a):
    a = _as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _result(1.0 - a.data, "one_minus", (a,), bw)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, c * g)

    return _result(c * a.data, "scale", (a,), bw)


def scale_rows(a, v):
    """Multiply row i of a matrix by constant v[i]. v carries no gradient."""
    a = _as_tensor(a)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim != 2 or v.ndim != 1 or v.shape[0] != a.shape[0]:
        raise DimensionError(f"scale_rows needs [n,c] and [n], got {a.shape} and {v.shape}")
    col = v[:, None]

    def bw(g):
        _accumulate(a, g * col)

    return _result(a.data * col, "scale_rows", (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities

def sigmoid(a):
    a = _as_tensor(a)
    y = expit(a.data)

    def bw(g):
        _accumulate(a, g * y * (1.0 - y))

    return _result(y, "sigmoid", (a,), bw)


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _result(y, "tanh", (a,), bw)


def relu(a):
    a = _as_tensor(a)
    pos = a.data > 0

    def bw(g):
        _accumulate(a, g * pos)

    return _result(np.maximum(a.data, 0.0), "relu", (a,), bw)


def celu(a):
    """celu(x) = max(0, x) + min(0, exp(x) - 1), the alpha=1 form."""
    a = _as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.minimum(np.expm1(x), 0.0)
    deriv = np.where(x >= 0, 1.0, np.exp(x))

    def bw(g):
        _accumulate(a, g * deriv)

    return _result(y, "celu", (a,), bw)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (y * g).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _result(y, "softmax", (a,), bw)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "celu": celu,
    "one_minus": one_minus,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(kind, *args):
    """Dispatch an elementwise op by name. Unknown names raise ContractError."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ContractError(f"unknown elementwise op {kind!r}; known: {sorted(_ELEMENTWISE)}")
    return fn(*args)


# ---------------------------------------------------------------------------
# structure ops

def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    nd = parts[0].ndim
    ax = axis % nd
    base = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        other = list(p.shape)
        if [s for i, s in enumerate(other) if i != ax] != [s for i, s in enumerate(base) if i != ax]:
            raise DimensionError(f"concat off-axis mismatch: {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=ax)):
            _accumulate(p, piece)

    return _result(np.concatenate([p.data for p in parts], axis=ax), "concat", tuple(parts), bw)


def split(a, sizes, axis=-1):
    a = _as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {sizes} do not cover axis of length {a.shape[ax]}")
    cuts = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, cuts, axis=ax)
    outs = []
    start = 0
    for piece, n in zip(pieces, sizes):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + n)
        sl = tuple(sl)

        def bw(g, sl=sl):
            buf = np.zeros_like(a.data)
            buf[sl] = g
            _accumulate(a, buf)

        outs.append(_result(piece.copy(), "split", (a,), bw))
        start += n
    return outs


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape

    def bw(g):
        _accumulate(a, g.reshape(old))

    return _result(a.data.reshape(shape).copy(), "reshape", (a,), bw)


def repeat_cols(a, k):
    """Repeat each column k times in place: [.., c] -> [.., c*k].

    Column j of the input occupies columns j*k .. j*k+k-1 of the output,
    which is exactly the per-head block layout used by attention.
    """
    a = _as_tensor(a)
    k = int(k)
    if k < 1:
        raise DimensionError(f"repeat_cols needs k >= 1, got {k}")

    def bw(g):
        _accumulate(a, g.reshape(*a.shape, k).sum(axis=-1))

    return _result(np.repeat(a.data, k, axis=-1), "repeat_cols", (a,), bw)


def block_colsum(a, nblocks):
    """Sum groups of adjacent columns: [.., c] -> [.., nblocks], c % nblocks == 0."""
    a = _as_tensor(a)
    c = a.shape[-1]
    if c % nblocks != 0:
        raise DimensionError(f"block_colsum: {c} columns not divisible into {nblocks} blocks")
    width = c // nblocks
    lead = a.shape[:-1]

    def bw(g):
        _accumulate(a, np.repeat(g, width, axis=-1))

    return _result(a.data.reshape(*lead, nblocks, width).sum(axis=-1), "block_colsum", (a,), bw)


class ScatterPlan:
    """Precomputed recipe to scatter-add rows back to their source.

    Built once from an index vector, then every backward pass through a
    gather with the same indices is a permutation plus one reduceat instead
    of a slow np.add.at.
    """

    def __init__(self, indices, num_rows):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.num_rows = int(num_rows)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= num_rows):
            raise DimensionError("gather indices out of range")
        self.perm = np.argsort(self.indices, kind="stable")
        laid = self.indices[self.perm]
        if laid.size:
            firsts = np.empty(laid.size, dtype=bool)
            firsts[0] = True
            np.not_equal(laid[1:], laid[:-1], out=firsts[1:])
            self.starts = np.flatnonzero(firsts)
            self.rows = laid[self.starts]
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.rows = np.zeros(0, dtype=np.int64)

    def scatter_add(self, g, row_shape):
        out = np.zeros((self.num_rows,) + tuple(row_shape), dtype=np.float64)
        if self.indices.size:
            out[self.rows] = np.add.reduceat(g[self.perm], self.starts, axis=0)
        return out


def gather_rows(a, indices, plan=None):
    """Select rows a[indices]; repeated indices accumulate on backward."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows needs a flat index vector, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather index out of range for {a.shape[0]} rows")
    if plan is not None and (plan.num_rows != a.shape[0] or plan.indices.shape != idx.shape):
        raise ContractError("scatter plan does not match the gather indices")

    def bw(g):
        if plan is not None:
            _accumulate(a, plan.scatter_add(g, a.shape[1:]))
        else:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accumulate(a, buf)

    return _result(a.data[idx], "gather_rows", (a,), bw)


def scatter_rows(a, indices, num_rows):
    """Place row i of a at position indices[i] of a zero matrix. Indices unique."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] != a.shape[0]:
        raise DimensionError("scatter_rows needs one index per row")
    if idx.size != np.unique(idx).size:
        raise ContractError("scatter_rows indices must be unique")
    out = np.zeros((num_rows,) + a.shape[1:], dtype=np.float64)
    out[idx] = a.data

    def bw(g):
        _accumulate(a, g[idx])

    return _result(out, "scatter_rows", (a,), bw)


def _check_offsets(a, offsets):
    off = np.asarray(offsets, dtype=np.int64)
    if off.ndim != 1 or off.size < 2 or off[0] != 0 or off[-1] != a.shape[0]:
        raise DimensionError(f"offsets must run 0..{a.shape[0]}, got {off.tolist()[:8]}...")
    counts = np.diff(off)
    if (counts <= 0).any():
        raise ContractError("segment ops need every segment non-empty")
    return off, counts


def segment_sum(a, offsets):
    """Sum contiguous row blocks: [e, c] with S segments -> [S, c]."""
    a = _as_tensor(a)
    off, counts = _check_offsets(a, offsets)

    def bw(g):
        _accumulate(a, np.repeat(g, counts, axis=0))

    return _result(np.add.reduceat(a.data, off[:-1], axis=0), "segment_sum", (a,), bw)


def segment_mean(a, offsets):
    a = _as_tensor(a)
    off, counts = _check_offsets(a, offsets)
    inv = 1.0 / counts[:, None]

    def bw(g):
        _accumulate(a, np.repeat(g * inv, counts, axis=0))

    return _result(np.add.reduceat(a.data, off[:-1], axis=0) * inv, "segment_mean", (a,), bw)


def segment_softmax(a, offsets):
    """Columnwise softmax within each contiguous row block (max-shifted)."""
    a = _as_tensor(a)
    off, counts = _check_offsets(a, offsets)
    mx = np.maximum.reduceat(a.data, off[:-1], axis=0)
    e = np.exp(a.data - np.repeat(mx, counts, axis=0))
    denom = np.add.reduceat(e, off[:-1], axis=0)
    y = e / np.repeat(denom, counts, axis=0)

    def bw(g):
        dot = np.add.reduceat(y * g, off[:-1], axis=0)
        _accumulate(a, y * (g - np.repeat(dot, counts, axis=0)))

    return _result(y, "segment_softmax", (a,), bw)


# ---------------------------------------------------------------------------
# reductions and loss

def sum_all(a):
    a = _as_tensor(a)

    def bw(g):
        _accumulate(a, np.full(a.shape, float(g)))

    return _result(a.data.sum(), "sum_all", (a,), bw)


def mean_all(a):
    a = _as_tensor(a)
    n = a.size

    def bw(g):
        _accumulate(a, np.full(a.shape, float(g) / n))

    return _result(a.data.mean(), "mean_all", (a,), bw)


def cross_entropy(logits, targets, smoothing=0.0):
    """Label-smoothed cross entropy, averaged over rows.

    With smoothing s and C classes the target distribution puts
    (1 - s) + s/C on the labeled class and s/C everywhere else. s in [0, 1).
    Gradient is (softmax - target) / batch.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs [batch, classes], got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    b, c = logits.shape
    if t.shape != (b,):
        raise DimensionError(f"targets shape {t.shape} does not match batch {b}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target class out of range for {c} classes")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full((b, c), smoothing / c)
    q[np.arange(b), t] += 1.0 - smoothing
    loss = -(q * logp).sum() / b
    p = np.exp(logp)

    def bw(g):
        _accumulate(logits, (p - q) * (float(g) / b))

    return _result(loss, "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# dropout

def make_dropout_mask(shape, rate, rng):
    """Inverted-scale dropout mask: entries are 0 or 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(a, rate, training, rng=None, mask=None):
    """Standard inverted dropout. Identity when not training or rate is 0.

    Pass `mask` to reuse one mask across several applications (the
    variational scheme); otherwise a fresh mask is drawn from `rng`.
    """
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if mask is None:
        if rng is None:
            raise ContractError("dropout in training mode needs an rng or a mask")
        mask = make_dropout_mask(a.shape, rate, rng)
    if mask.shape != a.shape:
        raise DimensionError(f"dropout mask shape {mask.shape} does not match {a.shape}")

    def bw(g):
        _accumulate(a, g * mask)

    return _result(a.data * mask, "dropout", (a,), bw)
