"""A small reverse-mode differentiation engine over dense numpy arrays.

Operations performed while a :class:`Tape` is active are recorded together
with a closure that propagates the output gradient to the inputs;
:func:`backward` replays them in reverse. Outside a tape the same functions
are plain forward computations.

Storage is float32 by default. Passing ``dtype=np.float64`` when creating
leaves replays the same graph in double precision, which is what the
finite-difference checks use.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DisconnectedLoss, InvalidSegment, ShapeMismatch

DEFAULT_DTYPE = np.float32

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.array(arr, dtype=dtype, order="C", copy=None)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive operations; use as a context manager."""

    nodes: list[_Node] = field(default_factory=list)
    training: bool = True
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def record(self, op: str, inputs, output: Tensor, fn) -> Tensor:
        if any(t.requires_grad for t in inputs):
            output.requires_grad = True
            self.nodes.append(_Node(tuple(inputs), output, fn, op))
        return output


def current_tape() -> Tape | None:
    return _active_tape.get()


def is_training() -> bool:
    tape = current_tape()
    return tape is not None and tape.training


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(op: str, inputs, out: np.ndarray, fn) -> Tensor:
    t = Tensor(out, dtype=out.dtype)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, t, fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _common_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


# -- elementwise and linear algebra -------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _result("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _result("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _result(
        "mul", (a, b), out, lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    return _result("scale", (a,), out, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _result("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeMismatch("concat of nothing")
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
            t.shape[k] != ts[0].shape[k] for k in range(t.data.ndim) if k != ax
        ):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return [np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(ts))]

    return _result("concat", tuple(ts), out, back)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}") from exc
    return _result("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.astype(np.float64).mean(axis=axis).astype(a.dtype)
    return _result("mean_axis", (a,), out, lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.astype(np.float64).sum(axis=axis).astype(a.dtype)
    return _result("sum_axis", (a,), out, lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype)

    def back(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _result("gelu", (a,), out, back)


def dropout(a: Tensor, rate: float, key: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    """Inverted dropout, active only while a training tape is recording.

    The mask comes from a counter-based generator keyed by ``(seed, epoch,
    layer)``, so it does not depend on how many draws happened before.
    """
    if rate <= 0.0 or not is_training():
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be below 1")
    seed, epoch, layer = (int(k) for k in key)
    gen = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, (epoch << 32) | (layer & 0xFFFFFFFF)]))
    keep = gen.random(a.shape) >= rate
    factor = a.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(a.dtype) * factor
    return _result("dropout", (a,), a.data * mask, lambda g: (g * mask,))


# -- graph primitives ---------------------------------------------------------------


def _check_segments(seg, n_segments: int, length: int) -> np.ndarray:
    seg = np.asarray(seg)
    if seg.ndim != 1 or seg.shape[0] != length:
        raise InvalidSegment(f"segment ids must be a vector of length {length}")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise InvalidSegment(f"segment ids outside [0, {n_segments})")
    return seg.astype(np.intp)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise InvalidSegment("row index out of range")
    out = a.data[idx]

    def back(g):
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full.astype(a.dtype),)

    return _result("gather_rows", (a,), out, back)


def segment_sum(a: Tensor, seg, n_segments: int) -> Tensor:
    seg = _check_segments(seg, n_segments, a.shape[0])
    acc = np.zeros((n_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(acc, seg, a.data)
    return _result("segment_sum", (a,), acc.astype(a.dtype), lambda g: (g[seg],))


def segment_softmax(a: Tensor, seg, n_segments: int) -> Tensor:
    """Softmax of the entries of ``a`` (rows, optionally with trailing head axis) within each segment."""
    seg = _check_segments(seg, n_segments, a.shape[0])
    x = a.data.astype(np.float64)
    mx = np.full((n_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    den = np.zeros_like(mx)
    np.add.at(den, seg, e)
    y = e / den[seg]

    def back(g):
        gy = g.astype(np.float64) * y
        s = np.zeros_like(mx)
        np.add.at(s, seg, gy)
        return ((gy - y * s[seg]).astype(a.dtype),)

    return _result("segment_softmax", (a,), y.astype(a.dtype), back)


def segment_weighted_sum(values: Tensor, weights: Tensor, seg, n_segments: int) -> Tensor:
    """out[s] = sum over rows r in segment s of weights[r] * values[r].

    ``values`` is (E, H, d) with ``weights`` (E, H), or (E, d) with weights (E,).
    """
    values, weights = as_tensor(values), as_tensor(weights)
    if values.shape[: weights.data.ndim] != weights.shape or values.data.ndim != weights.data.ndim + 1:
        raise ShapeMismatch(f"segment_weighted_sum: values {values.shape} vs weights {weights.shape}")
    seg = _check_segments(seg, n_segments, values.shape[0])
    v = values.data.astype(np.float64)
    w = weights.data.astype(np.float64)[..., None]
    acc = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(acc, seg, v * w)
    dt = _common_dtype(values, weights)

    def back(g):
        gs = g.astype(np.float64)[seg]
        return (gs * w).astype(values.dtype), (gs * v).sum(axis=-1).astype(weights.dtype)

    return _result("segment_weighted_sum", (values, weights), acc.astype(dt), back)


# -- losses -------------------------------------------------------------------------


def mse(pred, target, mask=None) -> Tensor:
    """Mean squared error over the entries selected by ``mask`` (all entries by default)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    if mask is None:
        m = np.ones(diff.shape)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
    count = m.sum()
    if count == 0:
        out = np.zeros((), dtype=pred.dtype)
        return _result("mse", (pred, target), out, lambda g: (np.zeros(pred.shape, pred.dtype), np.zeros(target.shape, target.dtype)))
    val = float((m * diff * diff).sum() / count)

    def back(g):
        gd = 2.0 * float(g) * m * diff / count
        return gd.astype(pred.dtype), (-gd).astype(target.dtype)

    return _result("mse", (pred, target), np.asarray(val, dtype=pred.dtype), back)


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """sum_k c_k * t_k for scalar tensors, used to build the joint loss."""
    out = None
    for c, t in terms:
        s = scale(t, c)
        out = s if out is None else add(out, s)
    if out is None:
        raise ShapeMismatch("empty weighted sum")
    return out


# -- backward -----------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor] | None = None, seed_grad: float = 1.0) -> dict[int, np.ndarray]:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every leaf that requires grad.

    Returns a map from ``id(leaf)`` to its gradient. Raises DisconnectedLoss
    if the loss is not scalar-valued or was not produced by this tape.
    """
    if loss.data.size != 1:
        raise DisconnectedLoss(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise DisconnectedLoss("loss was not recorded on this tape (no parameter reaches it)")
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed_grad, dtype=np.float64)}
    outputs = produced
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            grads[k] = grads[k] + gi if k in grads else np.asarray(gi, dtype=np.float64)
    out: dict[int, np.ndarray] = {}
    targets = leaves
    if targets is None:
        targets = [t for n in tape.nodes for t in n.inputs if t.requires_grad and id(t) not in outputs]
    for leaf in targets:
        k = id(leaf)
        if k in out:
            continue
        g = grads.get(k)
        g = np.zeros(leaf.shape, dtype=np.float64) if g is None else g
        out[k] = g
        gl = g.astype(leaf.dtype)
        leaf.grad = gl if leaf.grad is None else leaf.grad + gl
    return out


# -- optimiser ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape, np.float64) for p in params], [np.zeros(p.shape, np.float64) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam update with bias correction and decoupled weight decay, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("adam_step: parameter, gradient and state lists differ in length")
    state.step += 1
    b1c = 1.0 - beta1**state.step
    b2c = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: gradient {g.shape} for parameter {p.shape}")
        g = np.asarray(g, dtype=np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        upd = lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
        new = p.data.astype(np.float64) * (1.0 - lr * weight_decay) - upd
        p.data[...] = new.astype(p.dtype)
    return state
