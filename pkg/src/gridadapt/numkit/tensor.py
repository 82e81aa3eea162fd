"""Dense float tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a Tensor wraps a contiguous numpy array,
differentiable operations (ops.py) push nodes onto the innermost active
Tape, and ``backward`` replays one tape in exact reverse execution order.
There is no implicit global graph: code that wants gradients runs inside
``with Tape() as tape`` and finishes with ``backward(loss, tape)``.
Everything is single-threaded and sequential, so identical inputs produce
bitwise-identical outputs.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense n-d float array plus an optional same-shape gradient buffer.

    ``grad`` is allocated (all zeros) whenever ``requires_grad`` is set, so a
    parameter that never participates in a loss reads back a zero gradient.
    Data is mutated only by the optimizer; ops never write into their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ValueError(f"Tensor dtype must be float32 or float64, got {arr.dtype}")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A constant view of the same values, cut off from any tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops, consumed by one backward pass."""

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(data, inputs, backward_fn):
    """Wrap an op result; register it on the active tape when grads can flow.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in input order. With no active tape the result is a constant.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss, tape):
    """Populate ``grad`` with d(loss)/d(tensor) for every tensor on the tape.

    Gradients accumulate (+=) into existing buffers, mirroring the usual
    backward/step/zero cycle. The tape is marked consumed and cannot be
    replayed.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward expects a scalar loss, got shape {shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    if not loss.requires_grad:
        # Constant loss: nothing on the tape feeds it, all grads stay as-is.
        return
    loss.grad += np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        gout = node.out.grad
        gins = node.backward_fn(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None or not inp.requires_grad:
                continue
            if gin.shape != inp.data.shape:
                gin = _unbroadcast(gin, inp.data.shape)
            inp.grad += gin


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def zero_grads(params):
    for p in params:
        p.zero_grad()


def as_tensor(x, like=None):
    """Coerce scalars/arrays to a constant Tensor (dtype borrowed from `like`)."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)
