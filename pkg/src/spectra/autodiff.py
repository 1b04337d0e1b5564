"""Reverse-mode autodiff over dense numpy arrays.

Builds a DAG of :class:`Tensor` nodes during the forward pass and walks it
once, in topological order, during :func:`backward`. Only the operations the
layers in this project need are provided; masking uses a true ``-inf``
sentinel so masked softmax positions come out exactly zero.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

NEG_INF = -np.inf
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not match the operation's contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    """Multiply-accumulate tally for the ops executed while it is active.

    Counts depend only on operand shapes, never on values, so tallies are
    deterministic for a fixed configuration.
    """

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += n


@contextmanager
def count_macs():
    """Context manager yielding a :class:`MacCounter` for the enclosed ops."""
    stack = getattr(_state, "mac_stack", None)
    if stack is None:
        stack = _state.mac_stack = []
    counter = MacCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _tally(n: int) -> None:
    for counter in getattr(_state, "mac_stack", ()):
        counter.add(n)


class Tensor:
    """A node in the autodiff graph: a value, its gradient, and its parents."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward_done")

    def __init__(self, value, requires_grad: bool = False, parents=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents or ()
        self._backward_done = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable node.

        Each node is visited exactly once. Re-running backward from the same
        root without rebuilding the graph is an error.
        """
        if self.value.size != 1:
            raise ValueError("backward requires a scalar root")
        if self._backward_done:
            raise RuntimeError("backward already run for this graph; rebuild it first")
        self._backward_done = True

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.value)
                node.grad += g
            for parent, pull in node._parents:
                contrib = pull(g)
                if contrib is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=requires_grad)


def parameter(value) -> Tensor:
    return Tensor(np.asarray(value), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(value, parents) -> Tensor:
    if _grad_enabled() and any(p.requires_grad or p._parents for p, _ in parents):
        return Tensor(value, requires_grad=False, parents=tuple(parents))
    return Tensor(value)


def _broadcast_kind(a_shape, b_shape) -> str:
    """'same' for equal shapes, 'trailing' when b matches a's trailing dims."""
    if a_shape == b_shape:
        return "same"
    nb = len(b_shape)
    if nb == 0 or (nb <= len(a_shape) and a_shape[len(a_shape) - nb:] == b_shape):
        return "trailing"
    raise ShapeError(f"operands not aligned: {a_shape} vs {b_shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out = a.value + b.value
    return _make(out, [(a, lambda g: g), (b, lambda g: _reduce_to(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out = a.value - b.value
    return _make(out, [(a, lambda g: g), (b, lambda g: -_reduce_to(g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out = a.value * b.value
    return _make(out, [
        (a, lambda g: g * b.value),
        (b, lambda g: _reduce_to(g * a.value, b.shape)),
    ])


def scale(a: Tensor, c: float) -> Tensor:
    out = a.value * c
    return _make(out, [(a, lambda g: g * c)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``a`` is ``(..., q)`` and ``b`` is ``(q, r)``.

    Leading axes of ``a`` are treated as a stack of row vectors.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.value @ b.value
    _tally(a.value.size // a.shape[-1] * b.shape[0] * b.shape[1])

    def da(g):
        return g @ b.value.T

    def db(g):
        a2 = a.value.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        return a2.T @ g2

    return _make(out, [(a, da), (b, db)])


def bdot(keys: Tensor, query: Tensor) -> Tensor:
    """Per-batch dot products: ``(B, n, d) x (B, d) -> (B, n)``."""
    if keys.value.ndim != 3 or query.value.ndim != 2 or keys.shape[::2] != query.shape:
        raise ShapeError(f"bdot: {keys.shape} x {query.shape}")
    out = np.einsum("bnd,bd->bn", keys.value, query.value)
    _tally(keys.value.size)
    return _make(out, [
        (keys, lambda g: g[:, :, None] * query.value[:, None, :]),
        (query, lambda g: np.einsum("bn,bnd->bd", g, keys.value)),
    ])


def bweight(weights: Tensor, values: Tensor) -> Tensor:
    """Per-batch weighted sum of rows: ``(B, n) x (B, n, d) -> (B, d)``."""
    if weights.value.ndim != 2 or values.value.ndim != 3 or weights.shape != values.shape[:2]:
        raise ShapeError(f"bweight: {weights.shape} x {values.shape}")
    out = np.einsum("bn,bnd->bd", weights.value, values.value)
    _tally(values.value.size)
    return _make(out, [
        (weights, lambda g: np.einsum("bd,bnd->bn", g, values.value)),
        (values, lambda g: weights.value[:, :, None] * g[:, None, :]),
    ])


def pairwise(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs dot products per batch: ``(B, m, d) x (B, m, d) -> (B, m, m)``."""
    if a.value.ndim != 3 or a.shape != b.shape:
        raise ShapeError(f"pairwise: {a.shape} x {b.shape}")
    out = np.einsum("bid,bjd->bij", a.value, b.value)
    _tally(a.shape[0] * a.shape[1] * a.shape[1] * a.shape[2])
    return _make(out, [
        (a, lambda g: np.einsum("bij,bjd->bid", g, b.value)),
        (b, lambda g: np.einsum("bij,bid->bjd", g, a.value)),
    ])


def mh_scores(keys: Tensor, query: Tensor) -> Tensor:
    """Head-blocked query scores: ``(B, N, H, d) x (B, H, d) -> (B, H, N)``."""
    if keys.value.ndim != 4 or query.value.ndim != 3 \
            or (keys.shape[0], keys.shape[2], keys.shape[3]) != query.shape:
        raise ShapeError(f"mh_scores: {keys.shape} x {query.shape}")
    out = (keys.value.transpose(0, 2, 1, 3) @ query.value[:, :, :, None])[..., 0]
    _tally(keys.value.size)
    return _make(out, [
        (keys, lambda g: np.einsum("bhn,bhd->bnhd", g, query.value)),
        (query, lambda g: np.einsum("bhn,bnhd->bhd", g, keys.value)),
    ])


def mh_weight(weights: Tensor, values: Tensor) -> Tensor:
    """Head-blocked readout: ``(B, H, N) x (B, N, H, d) -> (B, H, d)``."""
    if weights.value.ndim != 3 or values.value.ndim != 4 \
            or weights.shape != (values.shape[0], values.shape[2], values.shape[1]):
        raise ShapeError(f"mh_weight: {weights.shape} x {values.shape}")
    out = (weights.value[:, :, None, :] @ values.value.transpose(0, 2, 1, 3))[:, :, 0, :]
    _tally(values.value.size)
    return _make(out, [
        (weights, lambda g: np.einsum("bhd,bnhd->bhn", g, values.value)),
        (values, lambda g: np.einsum("bhn,bhd->bnhd", weights.value, g)),
    ])


def mh_scores_full(queries: Tensor, keys: Tensor) -> Tensor:
    """All-pairs head scores: ``(B, N, H, d) x (B, N, H, d) -> (B, H, N, N)``."""
    if queries.value.ndim != 4 or queries.shape != keys.shape:
        raise ShapeError(f"mh_scores_full: {queries.shape} x {keys.shape}")
    out = queries.value.transpose(0, 2, 1, 3) @ keys.value.transpose(0, 2, 3, 1)
    _tally(queries.shape[0] * queries.shape[2] * queries.shape[1] ** 2 * queries.shape[3])
    return _make(out, [
        (queries, lambda g: np.einsum("bhnm,bmhd->bnhd", g, keys.value)),
        (keys, lambda g: np.einsum("bhnm,bnhd->bmhd", g, queries.value)),
    ])


def mh_weight_full(weights: Tensor, values: Tensor) -> Tensor:
    """All-pairs head readout: ``(B, H, N, N) x (B, N, H, d) -> (B, N, H, d)``."""
    if weights.value.ndim != 4 or values.value.ndim != 4 \
            or weights.shape != (values.shape[0], values.shape[2],
                                 values.shape[1], values.shape[1]):
        raise ShapeError(f"mh_weight_full: {weights.shape} x {values.shape}")
    out = (weights.value @ values.value.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3)
    _tally(weights.shape[0] * weights.shape[1] * weights.shape[2] ** 2 * values.shape[3])
    return _make(out, [
        (weights, lambda g: np.einsum("bnhd,bmhd->bhnm", g, values.value)),
        (values, lambda g: np.einsum("bhnm,bnhd->bmhd", weights.value, g)),
    ])


def slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous slice along the last axis."""
    if not 0 <= lo < hi <= x.shape[-1]:
        raise ShapeError(f"slice_last: [{lo}:{hi}] of {x.shape}")
    out = x.value[..., lo:hi]

    def dx(g):
        full = np.zeros_like(x.value)
        full[..., lo:hi] = g
        return full

    return _make(out, [(x, dx)])


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: ``(B, n, m) x (B, m, d) -> (B, n, d)``."""
    if a.value.ndim != 3 or b.value.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: {a.shape} x {b.shape}")
    out = np.einsum("bnm,bmd->bnd", a.value, b.value)
    _tally(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return _make(out, [
        (a, lambda g: np.einsum("bnd,bmd->bnm", g, b.value)),
        (b, lambda g: np.einsum("bnm,bnd->bmd", a.value, g)),
    ])


def vecmat(q: Tensor, w: Tensor) -> Tensor:
    """Per-batch row-vector x matrix: ``(B, m) x (B, m, r) -> (B, r)``."""
    if q.value.ndim != 2 or w.value.ndim != 3 or q.shape != w.shape[:2]:
        raise ShapeError(f"vecmat: {q.shape} x {w.shape}")
    out = np.einsum("bm,bmr->br", q.value, w.value)
    _tally(w.value.size)
    return _make(out, [
        (q, lambda g: np.einsum("br,bmr->bm", g, w.value)),
        (w, lambda g: q.value[:, :, None] * g[:, None, :]),
    ])


def sum_along(x: Tensor, axis: int = -1) -> Tensor:
    out = x.value.sum(axis=axis)

    def dx(g):
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return _make(out, [(x, dx)])


def mean_along(x: Tensor, axis: int = -1) -> Tensor:
    n = x.shape[axis]
    out = x.value.mean(axis=axis)

    def dx(g):
        return np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy()

    return _make(out, [(x, dx)])


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.value.sum())
    return _make(out, [(x, lambda g: np.broadcast_to(g, x.shape).copy())])


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.value.reshape(shape)
    return _make(out, [(x, lambda g: g.reshape(x.shape))])


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def pull_for(i):
        def pull(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return pull

    return _make(out, [(p, pull_for(i)) for i, p in enumerate(parts)])


def gather(x: Tensor, idx) -> Tensor:
    """Pick one entry per row: ``(B, k)[b, idx[b]] -> (B,)``."""
    idx = np.asarray(idx)
    if x.value.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather: {x.shape} with index {idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.value[rows, idx]

    def dx(g):
        full = np.zeros_like(x.value)
        full[rows, idx] = g
        return full

    return _make(out, [(x, dx)])


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.value, 0.0)
    return _make(out, [(x, lambda g: g * (x.value > 0))])


def abs_(x: Tensor) -> Tensor:
    out = np.abs(x.value)
    # sign(0) == 0: the subgradient at zero is pinned to zero
    return _make(out, [(x, lambda g: g * np.sign(x.value))])


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.value))
    return _make(out, [(x, lambda g: g * out * (1.0 - out))])


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return _make(out, [(x, lambda g: g * (1.0 - out * out))])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``-inf`` entries are masked out exactly.

    Masked positions output exactly 0. A fully masked slice is an error.
    """
    v = x.value
    if np.isnan(v).any():
        raise ValueError("softmax input contains NaN")
    hi = np.max(v, axis=axis, keepdims=True)
    if not np.isfinite(hi).all():
        raise ValueError("fully masked softmax")
    e = np.exp(v - hi)
    out = e / e.sum(axis=axis, keepdims=True)

    def dx(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _make(out, [(x, dx)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    y = xc * inv
    out = y * gain.value + bias.value

    def dx(g):
        gy = g * gain.value
        return inv * (gy - gy.mean(axis=-1, keepdims=True)
                      - y * (gy * y).mean(axis=-1, keepdims=True))

    def dgain(g):
        return _reduce_to(g * y, gain.shape)

    def dbias(g):
        return _reduce_to(g, bias.shape)

    return _make(out, [(x, dx), (gain, dgain), (bias, dbias)])
