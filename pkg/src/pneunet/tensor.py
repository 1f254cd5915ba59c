"""Dense n-dimensional tensors with reverse-mode autodiff over a recorded tape.

Tensors wrap a C-contiguous numpy array (float32 by default; float64 is
available as a shadow dtype for gradient checking). Operations are pure:
they never mutate their inputs. When a Tape is active on the current
thread, every op whose inputs require gradients records a node carrying a
closure that maps the output gradient to input gradients. ``backward``
walks the tape once, in reverse, and exposes the gradient of *every*
recorded tensor by identity, not only leaf parameters.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# When true, every op output is checked for NaN/Inf. Enabled by the test
# suite; off by default to keep the hot path lean.
CHECK_FINITE = False


class TapeError(RuntimeError):
    """Misuse of a Tape: unfinalized backward, double consumption, etc."""


class Tensor:
    """A shaped block of 32-bit floats, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; the module-level functions are the real ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Single-owner record of operations, replayed in reverse by backward.

    Use as a context manager; ops executed inside the block are recorded.
    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self.finalized = False
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.finalized:
            raise TapeError("tape already finalized")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a non-active tape")
        stack.pop()
        self.finalized = True
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        if self.finalized:
            raise TapeError("cannot record on a finalized tape")
        self._nodes.append(_Node(output, inputs, backward_fn))


class GradientMap:
    """Gradients keyed by tensor identity, produced by one backward pass."""

    def __init__(self, grads: dict):
        self._grads = grads

    def wrt(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError("tensor received no gradient on this tape") from None

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Propagate d(loss)/d(tensor) to every tensor recorded on the tape.

    Requires a scalar loss and a finalized, unconsumed tape. Tensors with
    ``requires_grad`` get their ``.grad`` field set (accumulating across
    calls on different tapes); gradients of intermediate activations are
    retrievable from the returned map by identity.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not tape.finalized:
        raise TapeError("tape must be finalized (exit the context) before backward")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        out_grad = grads.get(id(node.output))
        if out_grad is None:
            continue
        input_grads = node.backward_fn(out_grad)
        for tensor, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            acc = grads.get(id(tensor))
            grads[id(tensor)] = g if acc is None else acc + g

    # Attach .grad to requires_grad tensors seen on the tape.
    seen: dict[int, Tensor] = {}
    for node in tape._nodes:
        for t in node.inputs:
            seen[id(t)] = t
        seen[id(node.output)] = node.output
    for tid, tensor in seen.items():
        if tensor.requires_grad and tid in grads:
            g = grads[tid]
            tensor.grad = g if tensor.grad is None else tensor.grad + g

    return GradientMap(grads)


# ---------------------------------------------------------------------------
# Construction


def tensor_from(shape: Sequence[int], values: Iterable[float],
                requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor from a shape and a flat row-major value list."""
    dtype = dtype or DEFAULT_DTYPE
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape extents must be positive, got {shape}")
    flat = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                      dtype=dtype).reshape(-1)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ValueError(
            f"shape {shape} needs {expected} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise ValueError("tensor_from rejects non-finite values")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def from_array(arr: np.ndarray, requires_grad: bool = False, dtype=None) -> Tensor:
    dtype = dtype or DEFAULT_DTYPE
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE))


def full(shape, value: float, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype or DEFAULT_DTYPE))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# Recording helpers


def _finite(out: Tensor) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("op produced non-finite values")
    return out


def record_op(out_data: np.ndarray, inputs: tuple,
              backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are needed.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, in order. Exposed for the layers module, which builds its ops on
    the same machinery.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(out, inputs, backward_fn)
    return _finite(out)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(no broadcasting; use expand ops)")


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs "
                         "(clamp probabilities first)")
    ad = a.data
    return record_op(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return record_op(out_data, (a,), lambda g: (g * out_data,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**c for a constant exponent c >= 0."""
    c = float(exponent)
    if c < 0:
        raise ValueError("power supports non-negative exponents only")
    ad = a.data
    out_data = ad ** c

    def backward_fn(g):
        if c == 0.0:
            return (np.zeros_like(g),)
        if c == 1.0:
            return (g,)
        return (g * c * ad ** (c - 1.0),)

    return record_op(out_data, (a,), backward_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only where unclamped."""
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: {lo} > {hi}")
    ad = a.data
    out_data = np.clip(ad, lo, hi)
    inside = ((ad > lo) & (ad < hi)).astype(ad.dtype)
    return record_op(out_data, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = a.shape
    out_data = a.data.reshape(shape)
    return record_op(out_data, (a,), lambda g: (g.reshape(in_shape),))


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Replicate a tensor n times along a new leading axis.

    The explicit stand-in for broadcasting: gradient sums over the axis.
    """
    if n < 1:
        raise ValueError(f"expand_leading needs n >= 1, got {n}")
    out_data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return record_op(out_data, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    in_shape = a.shape
    out_data = a.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.full(in_shape, g, dtype=g.dtype),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return record_op(out_data, (a,), backward_fn)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([in_shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axis)
    scale = 1.0 / count

    def backward_fn(g):
        if axis is None:
            return (np.full(in_shape, g * scale, dtype=g.dtype),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, in_shape).astype(g.dtype),)

    return record_op(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return record_op(ad @ bd, (a, b),
                     lambda g: (g @ bd.T, ad.T @ g))
