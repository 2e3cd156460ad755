"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tensor that
lives on it.  Tensors created with ``tape.leaf(...)`` are the variables
gradients are reported for; plain ``Tensor(...)`` objects are constants.

    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0])
    >>> from kpmatch import ops
    >>> grads = tape.backward(output=ops.sum(ops.square(x)))
    >>> grads[x]
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, StateError

MAX_RANK = 4

# op names whose recorded VJPs are perturbed; used as a negative control
_CORRUPTED: set[str] = set()


class Tensor:
    """Row-major double precision array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensors have at most {MAX_RANK} axes, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = "" if self.tape is None else ", tracked"
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; the functions live in ops to keep this module small
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other))

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations for one forward pass.

    A tape is single-use: :meth:`backward` may be called once, and it
    releases the recorded entries when done.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.leaves: list[Tensor] = []
        self._consumed = False

    def leaf(self, data, name: str | None = None) -> Tensor:
        self._check_open()
        t = Tensor(data, tape=self, name=name)
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"leaf {name or ''} holds non-finite values")
        self.leaves.append(t)
        return t

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        self._check_open()
        self.entries.append(TapeEntry(op, tuple(inputs), output, vjp))

    def _check_open(self):
        if self._consumed:
            raise StateError("tape has already been consumed by backward()")

    def backward(self, seed=None, output: Tensor | None = None) -> dict[Tensor, np.ndarray]:
        """Accumulate vector-Jacobian products in reverse recording order.

        ``output`` defaults to the most recently recorded tensor.  ``seed``
        defaults to ones and must match the output shape.  Returns a mapping
        from every leaf to its gradient (zeros for leaves the output does not
        depend on).
        """
        self._check_open()
        if output is None:
            if not self.entries:
                raise StateError("nothing recorded on tape")
            output = self.entries[-1].output
        if output.tape is not self:
            raise StateError("output tensor was not produced on this tape")
        seed = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.vjp(g)
            if entry.op in _CORRUPTED:
                in_grads = [None if gi is None else gi * 1.1 + 1e-3 for gi in in_grads]
            for inp, gi in zip(entry.inputs, in_grads):
                if gi is None or inp.tape is not self:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64)
        # entries and tensors reference each other; dropping the records frees
        # the activations now instead of at the next cyclic collection
        self.entries.clear()
        out = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            out[leaf] = np.zeros(leaf.shape) if g is None else g.reshape(leaf.shape)
        return out


def backward(tape: Tape, seed=None, output: Tensor | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(seed=seed, output=output)


@contextlib.contextmanager
def corrupted_backward(*op_names: str):
    """Deliberately perturb the recorded gradients of the named ops.

    Only meant for negative-control tests of the gradient checker.
    """
    added = set(op_names) - _CORRUPTED
    _CORRUPTED.update(added)
    try:
        yield
    finally:
        _CORRUPTED.difference_update(added)
