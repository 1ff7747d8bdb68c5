"""Dense tensors and the reverse-mode gradient tape.

Ops record themselves on the innermost active :class:`Tape` when at least one
input requires a gradient. Outside a tape nothing is recorded, which is the
inference path.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError, TapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major dense array with an optional gradient slot.

    ``data`` is a contiguous numpy array of float32 or float64. Python
    sequences and scalars are converted to float32 unless ``dtype`` says
    otherwise; float64 arrays keep their precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise ContractError(f"unsupported dtype {dtype}; expected float32 or float64")
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}{flag})"

    # operator sugar; the functions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of op applications for one backward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once.
    """

    entries: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record on a fresh tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> dict:
        """Accumulate gradients of ``loss`` into every leaf on the tape.

        Returns a mapping from leaf tensor to its gradient array. Leaves are
        tensors with ``requires_grad`` that no recorded op produced; their
        ``.grad`` slot is overwritten.
        """
        if self.consumed:
            raise TapeError("tape already consumed; one backward pass per recording")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if self in _tape_stack():
            _tape_stack().remove(self)
        self.consumed = True

        produced = {id(e.output) for e in self.entries}
        leaves = {}
        grads = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    leaves[key] = t
                prev = grads.get(key)
                if prev is None:
                    grads[key] = gi.astype(t.dtype, copy=False).reshape(t.shape)
                else:
                    grads[key] = prev + gi.reshape(t.shape)
        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = np.ascontiguousarray(g, dtype=t.dtype)
            out[t] = t.grad
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            out[loss] = loss.grad
        self.entries = []
        return out


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def apply(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, check finiteness and record it when needed."""
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: produced non-finite values")
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(np.ascontiguousarray(out), requires_grad=needs)
    if needs:
        tape.record(op, tuple(inputs), result, backward_fn)
    return result


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation, an independent route for FLOP counting

class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict = {}

    def add(self, op: str, macs: int) -> None:
        macs = int(macs)
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


def _counters() -> list:
    c = getattr(_state, "counters", None)
    if c is None:
        c = _state.counters = []
    return c


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by ops inside the block."""
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


def report_macs(op: str, macs: int) -> None:
    for c in _counters():
        c.add(op, macs)
