"""Dense tensors with taped reverse-mode gradients.

Small enough to read in one sitting, large enough to train the
encoder-decoder models in this package: matmul, broadcast elementwise
ops, softmax, layer norm, inverted dropout, embedding lookup and
label-smoothed cross entropy. Forward values live in numpy arrays;
every differentiable op pushes a closure onto the active Tape and
``backward`` replays the closures in reverse order.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, TapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "active_tape",
    "backward",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "softmax",
    "layer_norm",
    "dropout",
    "embedding",
    "cross_entropy_smoothed",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array plus a gradient slot."""

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, needs_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter:
    """A tensor registered for optimization, tagged with a group id.

    ``group_id`` names the ownership bucket ("base", "la:fr",
    "da:medical") used for freezing, counting and checkpointing.
    A frozen parameter never accumulates gradient.
    """

    __slots__ = ("value", "group_id", "_trainable")

    def __init__(self, data, group_id: str = "base", trainable: bool = True, dtype=None):
        self.value = Tensor(data, needs_grad=trainable, dtype=dtype)
        self.group_id = group_id
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.value.needs_grad = self._trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr) -> None:
        self.value.data = np.asarray(arr, dtype=self.value.data.dtype)

    @property
    def grad(self):
        return self.value.grad

    def clear_grad(self) -> None:
        self.value.grad = None

    @property
    def shape(self) -> tuple:
        return self.value.data.shape

    def __repr__(self):
        return (
            f"Parameter(shape={self.value.data.shape}, group={self.group_id!r}, "
            f"trainable={self._trainable})"
        )


_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of one forward pass, replayed backwards once."""

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


def _as_tensor(x):
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, inputs: tuple, backward_fn) -> None:
    """Attach a backward closure if a tape is active and grads are wanted."""
    tape = active_tape()
    if tape is None:
        return
    if not any(t.needs_grad for t in inputs):
        return
    out.needs_grad = True
    tape._nodes.append((out, inputs, backward_fn))


def _accumulate(t: Tensor, g) -> None:
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.data.dtype).copy()
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill .grad on every tensor that the loss depends on.

    The tape is consumed: calling backward twice without reset raises.
    """
    if tape._consumed:
        raise TapeError("backward already ran on this tape; call reset() first")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is not None:
                _accumulate(t, g)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        ga = gb = None
        if a.needs_grad:
            ga = _reduce_to(g @ b_data.swapaxes(-1, -2), a_data.shape)
        if b.needs_grad:
            gb = _reduce_to(a_data.swapaxes(-1, -2) @ g, b_data.shape)
        return ga, gb

    _record(out, (a, b), backward_fn)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        ga = _reduce_to(g, a.data.shape) if a.needs_grad else None
        gb = _reduce_to(g, b.data.shape) if b.needs_grad else None
        return ga, gb

    _record(out, (a, b), backward_fn)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        ga = _reduce_to(g * b_data, a_data.shape) if a.needs_grad else None
        gb = _reduce_to(g * a_data, b_data.shape) if b.needs_grad else None
        return ga, gb

    _record(out, (a, b), backward_fn)
    return out


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data * c)
    _record(out, (x,), lambda g: (g * c,))
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    _record(out, (x,), backward_fn)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    _record(out, (x,), backward_fn)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))

    def backward_fn(g):
        gx = ggain = gbias = None
        if gain.needs_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.needs_grad:
            gbias = g.sum(axis=lead)
        if x.needs_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    _record(out, (x, gain, bias), backward_fn)
    return out


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout. Identity (same tensor) when eval or p == 0."""
    if not training or p <= 0.0:
        return _as_tensor(x)
    if not 0.0 < p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    keep = rng.random(x.data.shape) >= p
    factor = 1.0 / (1.0 - p)
    out = Tensor(x.data * keep * factor)

    def backward_fn(g):
        return (g * keep * factor,)

    _record(out, (x,), backward_fn)
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = Tensor(table.data[ids])

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    _record(out, (table,), backward_fn)
    return out


def cross_entropy_smoothed(logits, targets, smoothing: float = 0.0, mask=None) -> Tensor:
    """Label-smoothed cross entropy, averaged over unmasked positions.

    Per position: (1 - smoothing) * NLL(target) + smoothing * mean-over-vocab NLL.
    Reductions run in float64 regardless of storage dtype.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross entropy expects [positions, vocab] logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} positions")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of vocab range [0, {v})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross entropy needs at least one unmasked position")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logzsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logzsum
    nll_target = -logp[np.arange(n), targets]
    nll_uniform = -logp.mean(axis=1)
    per_pos = (1.0 - smoothing) * nll_target + smoothing * nll_uniform
    loss_val = float((per_pos * w).sum() / count)
    out = Tensor(np.asarray(loss_val, dtype=logits.dtype))

    def backward_fn(g):
        probs = np.exp(logp)
        q = np.full((n, v), smoothing / v)
        q[np.arange(n), targets] += 1.0 - smoothing
        d = (probs - q) * (w / count)[:, None]
        return (float(g) * d.astype(logits.dtype),)

    _record(out, (logits,), backward_fn)
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def backward_fn(g):
        return (g.reshape(old),)

    _record(out, (x,), backward_fn)
    return out


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    _record(out, (x,), backward_fn)
    return out


def tsum(x) -> Tensor:
    """Sum of all entries, reduced in float64."""
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))

    def backward_fn(g):
        return (np.full(x.data.shape, float(g), dtype=x.dtype),)

    _record(out, (x,), backward_fn)
    return out


def tmean(x) -> Tensor:
    """Mean of all entries, reduced in float64."""
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype))
    size = x.data.size

    def backward_fn(g):
        return (np.full(x.data.shape, float(g) / size, dtype=x.dtype),)

    _record(out, (x,), backward_fn)
    return out
