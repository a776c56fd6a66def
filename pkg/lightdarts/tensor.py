"""
Reverse-mode automatic differentiation core.

A ``Tensor`` wraps a float64 numpy array. Primitives in ``functional`` record
each application on the active ``Tape``; ``backward`` replays the recorded
adjoints in reverse order and writes gradients into the leaf tensors that
require them.
"""

import contextvars
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "lightdarts_active_tape", default=None
)


class Tensor:
    """
    Dense N-dimensional real array with an optional gradient buffer.

    For leaves, ``grad`` exists iff ``requires_grad`` and always has the shape
    of ``data``. Tensors produced by primitives never carry a buffer; their
    adjoints live only inside ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def values(self) -> List[float]:
        """Values in row-major order."""
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class TapeEntry:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "vjp", "branch")

    def __init__(
        self,
        op: str,
        inputs: Tuple[Tensor, ...],
        output: Tensor,
        vjp: Vjp,
        branch: Optional[np.ndarray] = None,
    ):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        # discrete decision taken by a non-smooth primitive (relu mask, argmax)
        self.branch = branch


class Tape:
    """
    Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the block are
    recorded when at least one of their inputs requires a gradient.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def branch_signature(self) -> bytes:
        """Concatenated discrete decisions of every non-smooth entry."""
        parts = [entry.branch.tobytes() for entry in self.entries if entry.branch is not None]
        return b"".join(parts)

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

        Raises:
            ShapeError: If loss is not a scalar
            ValueError: If loss was not produced on this tape
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        produced = {id(entry.output) for entry in self.entries}
        if id(loss) not in produced:
            raise ValueError("loss is not reachable from the tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}

        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            input_grads = entry.vjp(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key not in produced:
                    leaves[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        for key, leaf in leaves.items():
            grad = grads.get(key)
            if grad is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad = leaf.grad + grad.reshape(leaf.data.shape)


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def record(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    vjp: Vjp,
    branch: Optional[np.ndarray] = None,
) -> Tensor:
    """Wrap ``out`` in a Tensor and record it on the active tape if needed."""
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs_grad
    result.grad = None
    result.name = None
    if needs_grad:
        tape.record(TapeEntry(op, tuple(inputs), result, vjp, branch))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Write gradients of ``loss`` into all requires_grad leaves of ``tape``."""
    tape.backward(loss)
