"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model in this package is expressed through the primitives here: a
``Tensor`` wraps a numpy array and, when gradient tracking is on, remembers
the operation and parents that produced it. ``backward`` replays that tape
in reverse topological order and returns one gradient per tracked leaf.

All in-memory math is 64-bit so finite-difference checks are meaningful;
32-bit conversion happens only at file boundaries.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradCheckError(RuntimeError):
    """A gradient check could not run (non-finite values in the graph)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation/decoding path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-d array of float64 values, optionally recorded on an autograd tape.

    ``requires_grad=True`` on a leaf marks it as a trainable parameter;
    intermediate results inherit tracking from their parents. ``grad`` is
    populated by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents, bw) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, "matmul", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    def bw(g):
        return (g * (x.data > 0),)

    return _node(np.maximum(x.data, 0.0), "relu", (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _node(s, "sigmoid", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), "reshape", (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _node(x.data.transpose(axes), "transpose", (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), bw)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.full(x.shape, float(g) / n),)

    return _node(x.data.mean(), "mean", (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (vocab x d) at integer ``ids``; scatter-add backward."""
    ids = np.asarray(ids)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _node(table.data[ids], "embedding", (table,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    Slices that are entirely -inf (fully masked attention rows) produce an
    all-zero slice instead of NaN.
    """
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(d - safe_m)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, "softmax", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then affine."""
    d = x.data
    if d.shape[-1] != gain.data.shape[-1] or d.shape[-1] != bias.data.shape[-1]:
        raise ShapeError(f"layer_norm feature extents differ: x {d.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data
    n = d.shape[-1]

    def bw(g):
        gxn = g * gain.data
        gx = inv * (gxn - gxn.mean(axis=-1, keepdims=True) - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xn).sum(axis=reduce_axes) if reduce_axes else g * xn
        gbias = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        return gx, _unbroadcast(ggain, gain.shape), _unbroadcast(gbias, bias.shape)

    return _node(out, "layer_norm", (x, gain, bias), bw)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` has vocabulary on the last axis; ``targets`` matches its
    leading shape. Positions whose target equals ``pad_id`` contribute
    nothing to the value or the gradient.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    mask = targets != pad_id
    n = int(mask.sum())
    if n == 0:
        raise ValueError("degenerate batch: every position is padding")
    if targets[mask].min() < 0 or targets[mask].max() >= vocab:
        raise ValueError(f"target id out of range for vocabulary of size {vocab}")

    d = logits.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    lse = m.squeeze(-1) + np.log(e.sum(axis=-1))
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(d, safe_t[..., None], axis=-1).squeeze(-1)
    loss = float(((lse - picked) * mask).sum() / n)

    def bw(g):
        soft = e / e.sum(axis=-1, keepdims=True)
        grad = soft.copy()
        np.put_along_axis(grad, safe_t[..., None], np.take_along_axis(grad, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        grad *= mask[..., None]
        return (grad * (float(g) / n),)

    return _node(np.float64(loss), "cross_entropy", (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of logistic(logits) against 0/1 targets."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    z = logits.data
    # max(z,0) - z*y + log1p(exp(-|z|)) is the overflow-safe form
    loss = float((np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))).mean())
    n = z.size

    def bw(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((s - targets) * (float(g) / n),)

    return _node(np.float64(loss), "bce", (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Run the reverse pass from a scalar ``loss``.

    Returns a mapping of every reachable grad-tracked leaf to its gradient
    array, and mirrors each gradient onto ``leaf.grad``. Deterministic: the
    same graph yields bitwise-identical gradients on every call.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bw is None:
            leaves[node] = g
            node.grad = g
            continue
        for p, pg in zip(node._parents, node._bw(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return leaves


def grad_check(f, inputs, eps: float = 1e-6) -> float:
    """Compare analytic gradients of scalar-valued ``f(*inputs)`` to central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator;
    returns the maximum over all elements of all inputs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        _raise_nonfinite(out)
    analytic = backward(out)
    worst = 0.0
    for x in inputs:
        ga = analytic.get(x)
        if ga is None:
            ga = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data)
            flat[i] = orig - eps
            lo = float(f(*inputs).data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = float(ga.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def _raise_nonfinite(out: Tensor):
    """Walk the graph for the innermost op that emitted non-finite values.

    Called only when the final output is non-finite; -inf from additive
    masks feeding a softmax never reaches a scalar output, so any culprit
    found here is a genuine numerical failure.
    """
    culprit = out.op
    stack = [out]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        for p in node._parents:
            if p.op != "leaf" and not np.isfinite(p.data).all():
                culprit = p.op
                stack.append(p)
    raise GradCheckError(f"non-finite values produced by op '{culprit}'")
