"""Dense tensors with tape-based reverse-mode differentiation.

The engine is define-by-run: every primitive whose inputs include a tensor
with ``requires_grad=True`` appends a node (inputs, output, local-gradient
closure) to the active tape. :func:`backward` replays that tape exactly once
in reverse order, which is a valid reverse topological order because nodes
are recorded in execution order.

Tapes are per-thread. A consumed tape (one that has been walked by
``backward``) is replaced automatically by the next recorded op, so each
forward pass effectively builds a fresh tape. All storage is row-major
float64 numpy; there is no sparsity and no broadcasting beyond numpy rules.
"""

from __future__ import annotations

import string
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "reset_tape",
    "sigmoid",
    "relu",
    "tanh",
    "absolute",
    "softmax",
    "add",
    "sub",
    "mul",
    "scale",
    "crop",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "reduce_mean",
    "reduce_sum",
    "rsqrt_or_zero",
    "einsum",
    "contract",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class _Node:
    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs, output, grad_fn):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of the primitive ops of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        # every requires_grad tensor that appeared on this tape, by identity
        self.watched: dict[int, "Tensor"] = {}
        self.consumed = False


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> Tape:
    """Discard the active tape and start a fresh one."""
    tape = Tape()
    _state.tape = tape
    return tape


@contextmanager
def no_grad():
    """Disable taping inside the block (inference / evaluation passes)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense multi-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; python scalars take the cheap `scale`/constant paths
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _from_op(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape = _tape()
        tape.nodes.append(_Node(inputs, out, grad_fn))
        for t in inputs:
            if t.requires_grad:
                tape.watched[id(t)] = t
        tape.watched[id(out)] = out
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast axes back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor of the active tape.

    d(loss)/d(loss) is seeded to 1. Watched tensors unreachable from the
    loss receive zero gradients. Calling backward twice without recording a
    new forward pass is an error.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor with requires_grad=True")
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        raise RuntimeError("backward called twice without a new forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    loss.grad = grads[id(loss)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue  # not reachable from the loss
        node.output.grad = g
        for t, ig in zip(node.inputs, node.grad_fn(g)):
            if ig is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = ig if prev is None else prev + ig

    # leaves keep their accumulated grads; anything watched but unreached
    # (e.g. a branch cropped out of the loss) gets exact zeros
    for t in tape.watched.values():
        g = grads.get(id(t))
        if g is not None:
            t.grad = g
        elif t is not loss and (t.grad is None or not tape.nodes or id(t) not in grads):
            if t.grad is None or t.grad.shape == t.data.shape:
                pass
            t.grad = t.grad if False else (t.grad if g is not None else np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# elementwise primitives


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ex = np.exp(v[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _from_op(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _from_op(out, (x,), grad_fn)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _from_op(out, (x,), grad_fn)


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at ties (sign(0) == 0)
    x = _as_tensor(x)
    out = np.abs(x.data)
    sign = np.sign(x.data)

    def grad_fn(g):
        return (g * sign,)

    return _from_op(out, (x,), grad_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, (x,), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _from_op(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _from_op(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape))

    return _from_op(out, (a, b), grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out = x.data * s

    def grad_fn(g):
        return (g * s,)

    return _from_op(out, (x,), grad_fn)


def rsqrt_or_zero(x: Tensor) -> Tensor:
    """1/sqrt(x) where x > 0, 0 elsewhere (degree normalization of graphs)."""
    x = _as_tensor(x)
    pos = x.data > 0
    out = np.zeros_like(x.data)
    out[pos] = x.data[pos] ** -0.5

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[pos] = -0.5 * x.data[pos] ** -1.5 * g[pos]
        return (gx,)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape primitives


def crop(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop)`` along one axis; gradient scatters back as zeros."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"crop axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"crop [{start}:{stop}) invalid for extent {extent} on axis {axis}")
    slicer = tuple(slice(start, stop) if i == axis else slice(None) for i in range(x.ndim))
    out = x.data[slicer]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[slicer] = g
        return (full,)

    return _from_op(out, (x,), grad_fn)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    shapes = [t.shape for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    ax = axis % tensors[0].ndim
    offsets = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _from_op(out, tensors, grad_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack requires equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad_fn(g):
        return tuple(np.squeeze(p, axis=ax) for p in np.split(g, len(tensors), axis=ax))

    return _from_op(out, tensors, grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    in_shape = x.shape

    def grad_fn(g):
        return (g.reshape(in_shape),)

    return _from_op(out, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _reduce_axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % x.ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _reduce_axes(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    in_shape = x.shape

    def grad_fn(g):
        if not keepdims:
            expand = list(g.shape)
            for a in sorted(axes):
                expand.insert(a, 1)
            g = g.reshape(expand)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _from_op(out, (x,), grad_fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _reduce_axes(x, axis)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    in_shape = x.shape

    def grad_fn(g):
        if not keepdims:
            expand = list(g.shape)
            for a in sorted(axes):
                expand.insert(a, 1)
            g = g.reshape(expand)
        return (np.broadcast_to(g, in_shape).copy() / count,)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# contractions


def _parse_einsum(spec: str, a: Tensor, b: Tensor) -> tuple[str, str, str]:
    spec = spec.replace(" ", "")
    if "->" not in spec or spec.count(",") != 1:
        raise ShapeError(f"einsum spec must be 'ab,bc->ac' shaped, got {spec!r}")
    lhs, out_sub = spec.split("->")
    a_sub, b_sub = lhs.split(",")
    if "." in spec:
        raise ShapeError("einsum ellipsis is not supported")
    for name, sub, t in (("first", a_sub, a), ("second", b_sub, b)):
        if len(sub) != t.ndim:
            raise ShapeError(f"einsum {name} operand has {t.ndim} axes, spec {sub!r}")
        if len(set(sub)) != len(sub):
            raise ShapeError(f"einsum repeated index within one operand: {sub!r}")
    # every input index must be recoverable from (output, other operand),
    # which is what makes the swap rule below a complete gradient
    for sub, other in ((a_sub, b_sub), (b_sub, a_sub)):
        missing = set(sub) - set(out_sub) - set(other)
        if missing:
            raise ShapeError(f"einsum index {sorted(missing)} reduced within a single operand")
    if set(out_sub) - set(a_sub) - set(b_sub):
        raise ShapeError(f"einsum output indices {out_sub!r} not drawn from inputs")
    dims: dict[str, int] = {}
    for sub, t in ((a_sub, a), (b_sub, b)):
        for ch, extent in zip(sub, t.shape):
            if dims.setdefault(ch, extent) != extent:
                raise ShapeError(
                    f"einsum index {ch!r} bound to extents {dims[ch]} and {extent} "
                    f"(shapes {a.shape} vs {b.shape})"
                )
    return a_sub, b_sub, out_sub


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with reverse-mode gradients for both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    a_sub, b_sub, out_sub = _parse_einsum(spec, a, b)
    out = np.einsum(f"{a_sub},{b_sub}->{out_sub}", a.data, b.data, optimize=True)
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b_data, optimize=True)
        if b.requires_grad:
            gb = np.einsum(f"{a_sub},{out_sub}->{b_sub}", a_data, g, optimize=True)
        return (ga, gb)

    return _from_op(out, (a, b), grad_fn)


def contract(a: Tensor, b: Tensor, axes: tuple) -> Tensor:
    """Batched tensor contraction over paired axes (tensordot convention).

    ``axes`` is ``(axes_a, axes_b)``; output axes are the free axes of ``a``
    followed by the free axes of ``b``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    axes_a, axes_b = axes
    if isinstance(axes_a, int):
        axes_a = (axes_a,)
    if isinstance(axes_b, int):
        axes_b = (axes_b,)
    axes_a = tuple(ax % a.ndim for ax in axes_a)
    axes_b = tuple(ax % b.ndim for ax in axes_b)
    if len(axes_a) != len(axes_b):
        raise ShapeError(f"contract pairs {len(axes_a)} axes with {len(axes_b)}")
    for ax_a, ax_b in zip(axes_a, axes_b):
        if a.shape[ax_a] != b.shape[ax_b]:
            raise ShapeError(
                f"contract paired axes have extents {a.shape[ax_a]} != {b.shape[ax_b]} "
                f"(axis {ax_a} of {a.shape} with axis {ax_b} of {b.shape})"
            )
    letters = iter(string.ascii_letters)
    a_sub = [next(letters) for _ in range(a.ndim)]
    b_sub = [""] * b.ndim
    for ax_a, ax_b in zip(axes_a, axes_b):
        b_sub[ax_b] = a_sub[ax_a]
    for i in range(b.ndim):
        if not b_sub[i]:
            b_sub[i] = next(letters)
    out_sub = [a_sub[i] for i in range(a.ndim) if i not in axes_a]
    out_sub += [b_sub[i] for i in range(b.ndim) if i not in axes_b]
    return einsum(f"{''.join(a_sub)},{''.join(b_sub)}->{''.join(out_sub)}", a, b)
