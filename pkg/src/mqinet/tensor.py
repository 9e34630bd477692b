"""Dense tensors, parameters and the reverse-mode tape.

A :class:`Tensor` wraps a contiguous numpy array.  Differentiable kernels live
in :mod:`mqinet.ops`; each one records a backward closure on the active
:class:`Tape` whenever any of its inputs requires a gradient.  Recording order
is creation order, so the tape is topologically sorted by construction and
``Tape.backward`` only has to walk it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator sugar; the kernels themselves live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """A trainable tensor with a zero-initialised gradient and Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, data, name: str = "", dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        """Convert value, gradient and moment buffers in place."""
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered log of differentiable ops executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    records: list = field(default_factory=list)
    _produced: set = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, kind: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        self.records.append(Record(kind, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaves are tensors that require a gradient but were not produced on
        this tape (parameters, or inputs marked ``requires_grad``).  Leaves
        that the loss does not reach keep their gradient untouched.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi
        # loss itself may be a leaf (trivial tape)
        g = grads.get(id(loss))
        if g is not None and loss.requires_grad and id(loss) not in self._produced:
            loss.grad = g if loss.grad is None else loss.grad + g


_TAPES: list = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def emit(kind: str, out_data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap a kernel result and record it on the active tape if needed."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, backward_fn)
    return out
