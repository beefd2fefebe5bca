"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation that touches a gradient-requiring tensor
records itself as a node (output tensor holding references to its inputs
and a gradient function).  ``backward`` replays the recorded graph once,
in reverse topological order.  The graph is rebuilt on every forward pass;
a single graph must stay on one thread, but disjoint graphs (separate
model copies, separate losses) may run on separate threads freely.

All data is float64.  Desk-scale problem sizes make the extra precision
cheaper than debugging drift, and it keeps finite-difference checks tight.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the recorded graph: double backward, detached or non-scalar loss."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / decoding)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "grad_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(op={self.op!r}, shape={self.data.shape}{flag})"

    # small operator sugar so model code stays readable
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, grad_fn=grad_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor the loss depends on.

    The loss must be a scalar attached to the recorded graph.  Running
    backward twice on the same loss is an error; rebuild the graph (rerun
    the forward pass) instead.
    """
    if loss.data.shape != ():
        raise TapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is detached from the recorded graph (requires_grad=False)")
    if loss._backward_ran:
        raise TapeError("backward already ran for this loss; rebuild the graph first")
    loss._backward_ran = True

    # Iterative post-order DFS: each node lands after all of its inputs, so
    # the reversed list visits every recorded operation exactly once with
    # consumers before producers.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node.grad_fn is None:
            continue
        for parent, g in zip(node.parents, node.grad_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                # own the buffer: grad_fns may hand out views into shared arrays
                parent.grad = np.array(g)
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node("add", out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node("mul", out, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree ({a.shape} vs {b.shape})")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) \
            if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) \
            if b.requires_grad else None
        return ga, gb

    return _node("matmul", out, (a, b), grad_fn)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return _node("relu", out, (a,), grad_fn)


LAYER_NORM_EPS = 1e-12


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps sits inside the square root, so zero-variance inputs are legal and
    map to the bias.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({h},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _node("layer_norm", out, (x, gain, bias), grad_fn)


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _node("softmax", out, (x,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node("log_softmax", out, (x,), grad_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: ids out of range [0, {table.shape[0]}) (min {idx.min()}, max {idx.max()})")
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node("embedding_lookup", out, (table,), grad_fn)


def gather(x: Tensor, ids) -> Tensor:
    """Pick entries along the last axis: out[..., k] = x[..., ids[..., k]]."""
    x = as_tensor(x)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match input {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ShapeError(f"gather: ids out of range [0, {x.shape[-1]})")
    out = np.take_along_axis(x.data, idx, axis=-1)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        flat_g = g.reshape(-1, idx.shape[-1])
        flat_idx = idx.reshape(-1, idx.shape[-1])
        rows = np.arange(flat_idx.shape[0])[:, None]
        gview = gx.reshape(-1, x.shape[-1])
        np.add.at(gview, (rows, flat_idx), flat_g)
        return (gview.reshape(x.shape),)

    return _node("gather", out, (x,), grad_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}") from None
    sizes = [t.shape[axis] for t in ts]

    def grad_fn(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node("concat", out, tuple(ts), grad_fn)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter-back."""
    x = as_tensor(x)
    out = x.data[key]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _node("slice", np.ascontiguousarray(out), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _node("transpose", out, (x,), lambda g: (g.transpose(inv),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _node("mean", out, (x,), grad_fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node("sum", out, (x,), grad_fn)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)), safe for -inf entries.

    -inf operands carry zero gradient; the CTC recursion relies on this to
    mask forbidden transitions.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.logaddexp(a.data, b.data)
    except ValueError:
        raise ShapeError(f"logaddexp: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(a.data), 0.0, np.exp(a.data - out))
            wb = np.where(np.isneginf(b.data), 0.0, np.exp(b.data - out))
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _node("logaddexp", out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# composite operations
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; mask is additive."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"scaled_dot_attention: query dim {d} != key dim {k.shape[-1]}")
    scores = mul(matmul(q, _swap_last(k)), Tensor(1.0 / np.sqrt(d)))
    if mask is not None:
        scores = add(scores, as_tensor(mask))
    return matmul(softmax(scores), v)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets along the last axis."""
    logits = as_tensor(logits)
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: target shape {idx.shape} does not match logits {logits.shape}")
    lp = log_softmax(logits)
    picked = gather(lp, idx[..., None])
    return neg(mean(picked))


# The operation set, by name, for callers that dispatch dynamically.
OPS = {
    "matmul": matmul,
    "add": add,
    "layer_norm": layer_norm,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "embedding_lookup": embedding_lookup,
    "scaled_dot_attention": scaled_dot_attention,
    "cross_entropy": cross_entropy,
    "concat": concat,
    "slice": slice_,
    "mean": mean,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply one of the named operations (dispatch form of the API above)."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown operation {op!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


def finite_difference_gradient(fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued ``fn`` w.r.t. one tensor.

    The probe mutates ``tensor.data`` in place and restores it; ``fn`` must
    rebuild its graph on every call.
    """
    flat = tensor.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn().data)
        flat[i] = orig - h
        f_minus = float(fn().data)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tensor.data.shape)
