"""Dense float64 tensors with reverse-mode automatic differentiation.

The surface is deliberately small: elementwise arithmetic, matrix products,
reductions, a stabilized row-wise log-softmax and a few indexing helpers,
which together express every layer and loss in this package. Any result that
depends on a gradient-requiring input is recorded on a per-step tape;
``backward`` sweeps the tape once in reverse and then drops it.

A tape is single-threaded: one training step builds and consumes exactly one
tape. Tensors that are not part of an active tape are plain immutable values
and safe to share.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "backward",
    "no_grad",
    "record_op",
    "matmul",
    "concat",
    "log_softmax",
    "take_per_row",
    "add_rowvec",
    "clip01",
]


class TensorError(ValueError):
    """Shape mismatch, domain violation or tape misuse."""


class Tape:
    """Execution-ordered record of differentiable operations.

    Every node's inputs were recorded before the node itself, so a single
    reverse sweep propagates all gradients and visits each node once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_active_tape: Tape | None = None
_grad_enabled: bool = True

_SCALARS = (int, float, np.integer, np.floating)


def active_tape() -> Tape | None:
    return _active_tape


@contextmanager
def no_grad():
    """Disable tape recording (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Stored values are always finite; any operation producing NaN/Inf raises
    instead of propagating it. Forward operations never mutate their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

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
            raise TensorError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- elementwise -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _same_shape("add", self, other)
            return record_op(
                self.data + other.data,
                (self, other),
                lambda g, a=self, b=other: (_accum(a, g), _accum(b, g)),
                op="add",
            )
        if isinstance(other, _SCALARS):
            s = float(other)
            return record_op(
                self.data + s,
                (self,),
                lambda g, a=self: _accum(a, g),
                op="add",
            )
        return NotImplemented

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _same_shape("sub", self, other)
            return record_op(
                self.data - other.data,
                (self, other),
                lambda g, a=self, b=other: (_accum(a, g), _accum(b, -g)),
                op="sub",
            )
        if isinstance(other, _SCALARS):
            return self + (-float(other))
        return NotImplemented

    def __rsub__(self, other):
        if isinstance(other, _SCALARS):
            return (-self) + float(other)
        return NotImplemented

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _same_shape("mul", self, other)
            return record_op(
                self.data * other.data,
                (self, other),
                lambda g, a=self, b=other: (
                    _accum(a, g * b.data),
                    _accum(b, g * a.data),
                ),
                op="mul",
            )
        if isinstance(other, _SCALARS):
            s = float(other)
            return record_op(
                self.data * s,
                (self,),
                lambda g, a=self, s=s: _accum(a, g * s),
                op="scalar-mul",
            )
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, _SCALARS):
            if float(other) == 0.0:
                raise TensorError("division by zero scalar")
            return self * (1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return record_op(
            -self.data,
            (self,),
            lambda g, a=self: _accum(a, -g),
            op="neg",
        )

    def __matmul__(self, other):
        if isinstance(other, Tensor):
            return matmul(self, other)
        return NotImplemented

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return record_op(
            out,
            (self,),
            lambda g, a=self, o=out: _accum(a, g * o),
            op="exp",
        )

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise TensorError("log: input must be strictly positive")
        return record_op(
            np.log(self.data),
            (self,),
            lambda g, a=self: _accum(a, g / a.data),
            op="log",
        )

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0.0):
            raise TensorError("sqrt: input must be non-negative")
        out = np.sqrt(self.data)

        def bwd(g, a=self, o=out):
            # subgradient 0 at the non-differentiable point sqrt(0)
            safe = np.where(o > 0.0, o, 1.0)
            _accum(a, np.where(o > 0.0, 0.5 * g / safe, 0.0))

        return record_op(out, (self,), bwd, op="sqrt")

    def relu(self) -> "Tensor":
        return record_op(
            np.maximum(self.data, 0.0),
            (self,),
            lambda g, a=self: _accum(a, g * (a.data > 0.0)),
            op="relu",
        )

    def abs(self) -> "Tensor":
        return record_op(
            np.abs(self.data),
            (self,),
            lambda g, a=self: _accum(a, g * np.sign(a.data)),
            op="abs",
        )

    def square(self) -> "Tensor":
        return record_op(
            self.data * self.data,
            (self,),
            lambda g, a=self: _accum(a, g * (2.0 * a.data)),
            op="square",
        )

    # -- shape -------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)
        return record_op(
            np.ascontiguousarray(out),
            (self,),
            lambda g, a=self: _accum(a, g.reshape(a.data.shape)),
            op="reshape",
        )

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise TensorError("transpose: 2-D tensors only")
        return record_op(
            np.ascontiguousarray(self.data.T),
            (self,),
            lambda g, a=self: _accum(a, g.T),
            op="transpose",
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- reductions ----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        _check_axis("sum", self, axis)
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

        return record_op(out, (self,), bwd, op="sum")

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        _check_axis("mean", self, axis)
        count = self.data.size if axis is None else self.data.shape[axis]
        if count == 0:
            raise TensorError("mean over an empty extent")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max_with_index(self, axis: int | None = None):
        """Maximum values plus their (flat or per-axis) argmax indices.

        Gradient routes to the selected positions; ties go to the first
        occurrence, matching the returned indices.
        """
        _check_axis("max", self, axis)
        if self.data.size == 0:
            raise TensorError("max over an empty tensor")
        if axis is None:
            idx = int(np.argmax(self.data))
            out = self.data.reshape(-1)[idx]

            def bwd(g, a=self, idx=idx):
                buf = np.zeros_like(a.data)
                buf.reshape(-1)[idx] = g
                _accum(a, buf)

            return record_op(out, (self,), bwd, op="max"), idx
        idx = np.argmax(self.data, axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        out = np.squeeze(out, axis=axis)

        def bwd(g, a=self, idx=idx, axis=axis):
            buf = np.zeros_like(a.data)
            np.put_along_axis(
                buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
            )
            _accum(a, buf)

        return record_op(out, (self,), bwd, op="max"), idx


# -- free functions ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with dA = g.Bᵀ, dB = Aᵀ.g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError("matmul: both operands must be 2-D")
    if a.data.shape[1] != b.data.shape[0]:
        raise TensorError(
            f"matmul: inner extents differ ({a.data.shape} x {b.data.shape})"
        )

    def bwd(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return record_op(a.data @ b.data, (a, b), bwd, op="matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise TensorError("concat: empty input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tuple(tensors), offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return record_op(out, tuple(tensors), bwd, op="concat")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by subtracting the row maximum."""
    if x.data.ndim != 2:
        raise TensorError("log_softmax: expected an n-by-l tensor")
    if x.data.shape[1] < 2:
        raise TensorError("log_softmax: needs at least 2 columns")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bwd(g, a=x, o=out):
        _accum(a, g - np.exp(o) * g.sum(axis=1, keepdims=True))

    return record_op(out, (x,), bwd, op="log_softmax")


def take_per_row(x: Tensor, indices) -> Tensor:
    """Pick one column per row: out[i] = x[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise TensorError("take_per_row: expected (n,l) tensor and n indices")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise TensorError("take_per_row: index out of range")
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]

    def bwd(g, a=x, rows=rows, idx=idx):
        buf = np.zeros_like(a.data)
        buf[rows, idx] = g
        _accum(a, buf)

    return record_op(out, (x,), bwd, op="take_per_row")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-u vector to every row of an (n,u) tensor."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise TensorError("add_rowvec: expected (n,u) tensor and (u,) vector")

    def bwd(g, a=x, b=v):
        _accum(a, g)
        _accum(b, g.sum(axis=0))

    return record_op(x.data + v.data[None, :], (x, v), bwd, op="add_rowvec")


def clip01(x: Tensor) -> Tensor:
    """Clamp into [0,1]; gradient is identity strictly inside, zero outside."""
    inside = (x.data > 0.0) & (x.data < 1.0)
    return record_op(
        np.clip(x.data, 0.0, 1.0),
        (x,),
        lambda g, a=x, inside=inside: _accum(a, g * inside),
        op="clip01",
    )


def backward(loss: Tensor) -> None:
    """Populate leaf gradients for a scalar loss and consume the tape."""
    global _active_tape
    if loss.data.size != 1:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _active_tape
    if tape is None or loss._tape is not tape:
        raise TensorError("backward: loss is not on the active tape")
    _active_tape = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            # branch never reached the loss: zero-fill so leaves stay populated
            for p in node.parents:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)
            continue
        node.backward_fn(out_grad)
    tape.nodes.clear()


def record_op(out_data, parents, backward_fn, op: str = "op") -> Tensor:
    """Wrap a forward result, recording it when gradients are enabled.

    ``backward_fn(g)`` must accumulate into each gradient-requiring parent
    via ``accumulate_grad``. This is the extension point custom layers use.
    """
    out_arr = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_arr)):
        raise TensorError(f"{op}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.grad = None
    out._tape = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        global _active_tape
        if _active_tape is None:
            _active_tape = Tape()
        out.requires_grad = True
        out._tape = _active_tape
        _active_tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def accumulate_grad(t: Tensor, g) -> None:
    """Add a gradient contribution to ``t`` (no-op for frozen tensors)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


_accum = accumulate_grad


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise TensorError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _check_axis(op: str, t: Tensor, axis: int | None) -> None:
    if axis is not None and not (-t.data.ndim <= axis < t.data.ndim):
        raise TensorError(f"{op}: axis {axis} invalid for shape {t.data.shape}")
