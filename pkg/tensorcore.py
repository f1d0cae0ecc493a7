#!/usr/bin/env python3
"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

Values live in numpy arrays. Operations executed inside an active ``Tape``
record a node (inputs, output, gradient rule) whenever one of their inputs
requires a gradient; ``backward`` replays the tape in reverse and accumulates
gradients into the leaves.

Shape rule: elementwise binary operations accept identical shapes, a scalar
operand, or an operand whose shape is a suffix of the other (leading-batch
alignment). Anything else needs an explicit ``reshape``/``expand``.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
ARCCOS_BOUND = 1.0 - 1e-7

Number = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, message: str, node: int = -1, op: str = ""):
        super().__init__(f"{message} (node {node}, op '{op}')" if op else message)
        self.node = node
        self.op = op


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""

    def __init__(self, message: str, node: int = -1, op: str = ""):
        super().__init__(f"{message} (node {node}, op '{op}')")
        self.node = node
        self.op = op


# ============================================================================
# Tensor and tape
# ============================================================================

class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: int):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    """One executed operation on a tape."""

    index: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations.

    A tape is activated with ``with tape:``. Tapes are bound to the thread that
    activates them and must not be shared across concurrent executions.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: List[Node] = []
        self.check_finite = check_finite

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output: Tensor) -> Dict[Tensor, np.ndarray]:
        return backward(self, output)


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on the current thread."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _next_index() -> int:
    tape = _active_tape()
    return len(tape.nodes) if tape is not None else -1


def record_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
              vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
              allow_nonfinite: bool = False) -> Tensor:
    """Wrap a computed array as an operation output and record it on the tape.

    Args:
        op: Operation name, used in error messages.
        out_data: Result of the forward computation.
        inputs: Operand tensors, in the order ``vjp`` returns their gradients.
        vjp: Maps the output gradient to one gradient (or None) per input.
        allow_nonfinite: Skip the finite check for this node.

    Returns:
        Output tensor; it requires a gradient iff a tape is active and any
        input requires one.
    """
    tape = _active_tape()
    index = len(tape.nodes) if tape is not None else -1
    check = tape.check_finite if tape is not None else True
    if check and not allow_nonfinite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("non-finite value produced", node=index, op=op)
    dtype = out_data.dtype if out_data.dtype.kind == "f" else inputs[0].dtype
    out = Tensor(out_data, dtype=dtype)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(index, op, tuple(inputs), out, vjp))
    return out


def forward_eval(tape: Tape, fn: Callable[..., Tensor], *args, **kwargs) -> Tensor:
    """Evaluate ``fn`` with ``tape`` active and return its output."""
    with tape:
        return fn(*args, **kwargs)


def backward(tape: Tape, output: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagate d(output)/d(leaf) through the tape.

    Every leaf (a gradient-requiring tensor consumed by the tape but not
    produced by it) receives an accumulated ``grad``; leaves the output does not
    depend on receive zeros. The tape itself is left unchanged.

    Returns:
        Mapping from leaf tensor to the gradient computed by this call.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}", op="backward")

    produced = {id(node.output) for node in tape.nodes}
    leaves: Dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t

    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            if gi.shape != t.shape:
                raise ShapeError(f"gradient shape {gi.shape} does not match input shape {t.shape}",
                                 node=node.index, op=node.op)
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    result: Dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ============================================================================
# Shape helpers
# ============================================================================

def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _aligned_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b or len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if len(a) > len(b) and a[-len(b):] == b:
        return a
    if len(b) > len(a) and b[-len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} are not aligned", node=_next_index(), op=op)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _restore_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _reduced_count(shape: Tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


# ============================================================================
# Elementwise arithmetic
# ============================================================================

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _aligned_shape("add", a.shape, b.shape)
    return record_op("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _aligned_shape("sub", a.shape, b.shape)
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _aligned_shape("mul", a.shape, b.shape)
    return record_op("mul", a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _aligned_shape("div", a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return record_op("div", a.data / b.data, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return record_op("neg", -x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: int) -> Tensor:
    """Plain integer power ``x ** n``."""
    n = int(exponent)
    return record_op("power", x.data ** n, (x,), lambda g: (g * n * x.data ** (n - 1),))


def signed_pow(x: Tensor, exponent) -> Tensor:
    """sign(x) * |x| ** p, differentiable in ``x`` and, if a tensor, in ``p``.

    Well defined for negative bases and fractional exponents.
    """
    p_tensor = exponent if isinstance(exponent, Tensor) else None
    p = float(p_tensor.data) if p_tensor is not None else float(exponent)
    absx = np.abs(x.data)
    sgn = np.sign(x.data)
    powed = absx ** p
    out = sgn * powed

    def vjp(g):
        nonzero = absx > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(nonzero, p * absx ** (p - 1.0), 1.0 if p == 1.0 else 0.0)
            gx = g * slope
            if p_tensor is None:
                return (gx,)
            logs = np.where(nonzero, np.log(np.where(nonzero, absx, 1.0)), 0.0)
            gp = np.sum(g * out * logs)
        return gx, np.asarray(gp).reshape(p_tensor.shape)

    inputs = (x,) if p_tensor is None else (x, p_tensor)
    return record_op("signed_pow", out.astype(x.dtype), inputs, vjp)


def tabs(x: Tensor) -> Tensor:
    return record_op("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sign(x: Tensor) -> Tensor:
    return record_op("sign", np.sign(x.data), (x,), lambda g: (None,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return record_op("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return record_op("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record_op("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    return record_op("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def softplus(x: Tensor) -> Tensor:
    out = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return record_op("softplus", out, (x,), lambda g: (g * sig,))


def clamp(x: Tensor, lo: Optional[Number] = None, hi: Optional[Number] = None) -> Tensor:
    """Clip into [lo, hi]; the gradient passes only where x lies inside."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return record_op("clamp", out, (x,), lambda g: (g * inside,))


def arccos(x: Tensor) -> Tensor:
    """arccos with its input clamped to [-1+1e-7, 1-1e-7]."""
    xc = np.clip(x.data, -ARCCOS_BOUND, ARCCOS_BOUND)
    inside = (x.data >= -ARCCOS_BOUND) & (x.data <= ARCCOS_BOUND)

    def vjp(g):
        return (g * inside * (-1.0 / np.sqrt(1.0 - xc * xc)),)

    return record_op("arccos", np.arccos(xc), (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = np.sqrt(2.0 / np.pi)
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return record_op("gelu", out, (x,), vjp)


# ============================================================================
# Linear algebra and reductions
# ============================================================================

def matmul(a, b) -> Tensor:
    """Matrix product; ``b`` is 2-D or shares ``a``'s leading batch dims."""
    a, b = _pair(a, b)
    if (a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2])):
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}", node=_next_index(), op="matmul")

    def vjp(g):
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record_op("matmul", np.matmul(a.data, b.data), (a, b), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return record_op("sum", np.asarray(out), (x,),
                     lambda g: (_restore_reduced(g, x.shape, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = _reduced_count(x.shape, axis)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return record_op("mean", np.asarray(out), (x,),
                     lambda g: (_restore_reduced(g, x.shape, axis, keepdims) / n,))


def tmax(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; tied maxima share the gradient equally."""
    out = np.max(x.data, axis=axis)

    def vjp(g):
        hit = (x.data == np.expand_dims(out, axis)).astype(x.dtype)
        hit /= hit.sum(axis=axis, keepdims=True)
        return (hit * np.expand_dims(g, axis),)

    return record_op("max", out, (x,), vjp)


def norm(x: Tensor, axis: Optional[int] = -1) -> Tensor:
    """Euclidean norm along ``axis`` (all entries when None)."""
    out = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def vjp(g):
        n = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(n > 0, gg * x.data / n, 0.0),)

    return record_op("norm", np.asarray(out), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return record_op("softmax", out, (x,),
                     lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return record_op("log_softmax", out, (x,),
                     lambda g: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),))


def label_log_prob(logits: Tensor, labels, allowed: Optional[np.ndarray] = None) -> Tensor:
    """log softmax(logits)[label] per row, restricted to ``allowed`` classes.

    Classes outside ``allowed`` behave as if their logit were -inf: they take
    no probability mass and receive exactly zero gradient.

    Args:
        logits: [C] or [B, C].
        labels: int or int array [B].
        allowed: optional boolean mask [C].
    """
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = z.shape[-1]
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}",
                         node=_next_index(), op="label_log_prob")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ShapeError("label out of range", node=_next_index(), op="label_log_prob")
    mask = np.ones(n_classes, dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool)
    if not np.all(mask[y]):
        raise ShapeError("label falls outside the allowed classes", node=_next_index(), op="label_log_prob")

    masked = np.where(mask, z, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    lse = top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    out = z[rows, y] - lse[:, 0]
    probs = np.exp(masked - lse)

    def vjp(g):
        g = np.asarray(g).reshape(-1)
        gz = -probs * g[:, None]
        gz[rows, y] += g
        return (gz.reshape(logits.shape),)

    return record_op("label_log_prob", out.reshape(()) if single else out, (logits,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm params {gamma.shape} do not fit input {x.shape}",
                         node=_next_index(), op="layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return record_op("layer_norm", out, (x, gamma, beta), vjp)


# ============================================================================
# Structural operations
# ============================================================================

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc), node=_next_index(), op="reshape") from None
    return record_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy broadcasting rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc), node=_next_index(), op="expand") from None

    def vjp(g):
        lead = len(shape) - x.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return record_op("expand", np.array(out), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors", node=_next_index(), op="concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc), node=_next_index(), op="concat") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record_op("getitem", out, (x,), vjp)


def gather(x: Tensor, indices) -> Tensor:
    """Rows of ``x`` along the leading axis; ``indices`` may be any int array."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather index out of range for leading extent {x.shape[0]}",
                         node=_next_index(), op="gather")
    out = np.take(x.data, idx, axis=0)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return record_op("gather", out, (x,), vjp)


# ============================================================================
# Gradient checking
# ============================================================================

@dataclass
class LeafCheck:
    name: str
    max_abs_error: float
    relative_error: float
    passed: bool


@dataclass
class GradientCheckReport:
    """Per-leaf comparison of backward against central finite differences."""

    step: float
    tolerance: float
    leaves: List[LeafCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(leaf.passed for leaf in self.leaves)

    @property
    def failures(self) -> List[str]:
        return [leaf.name for leaf in self.leaves if not leaf.passed]

    @property
    def max_relative_error(self) -> float:
        return max((leaf.relative_error for leaf in self.leaves), default=0.0)

    def summary(self) -> str:
        lines = []
        for leaf in self.leaves:
            mark = "✓" if leaf.passed else "✗"
            lines.append(f"{mark} {leaf.name}: rel. err {leaf.relative_error:.3e}")
        return "\n".join(lines)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    step: float = 1e-5, tolerance: float = 1e-5) -> GradientCheckReport:
    """Compare analytic gradients with central finite differences.

    ``fn`` rebuilds the scalar output from the current leaf values each time it
    is called. The relative error of a leaf is the max-norm of the difference
    divided by the larger max-norm of the two gradients.

    Args:
        fn: Zero-argument callable returning a scalar tensor.
        leaves: Tensors to check; their data is perturbed in place and restored.
        step: Finite-difference step (> 0).
        tolerance: Maximum accepted relative error.

    Returns:
        GradientCheckReport with one entry per leaf.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    for leaf in leaves:
        if not np.all(np.isfinite(leaf.data)):
            raise NonFiniteError("leaf holds non-finite values", op="check_gradients")
        leaf.grad = None

    tape = Tape()
    output = forward_eval(tape, fn)
    analytic = backward(tape, output)

    report = GradientCheckReport(step=step, tolerance=tolerance)
    for i, leaf in enumerate(leaves):
        grad = analytic.get(leaf, np.zeros_like(leaf.data))
        numeric = np.zeros(leaf.size, dtype=np.float64)
        flat = leaf.data.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            with no_grad():
                plus = float(fn().data)
            flat[j] = original - step
            with no_grad():
                minus = float(fn().data)
            flat[j] = original
            numeric[j] = (plus - minus) / (2.0 * step)
        analytic_flat = grad.reshape(-1).astype(np.float64)
        diff = float(np.max(np.abs(analytic_flat - numeric))) if flat.size else 0.0
        scale = max(float(np.max(np.abs(analytic_flat), initial=0.0)),
                    float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
        rel = diff / scale if diff > 0 else 0.0
        name = leaf.name or f"leaf[{i}]"
        report.leaves.append(LeafCheck(name, diff, rel, rel < tolerance))
        if rel >= tolerance:
            logger.warning("gradient check failed for %s: rel. err %.3e", name, rel)
    return report
