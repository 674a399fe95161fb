"""Tensor value type, gradient tape and workspace instrumentation."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A tensor would contain NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape."""


_local = threading.local()


def _stack(name: str) -> list:
    s = getattr(_local, name, None)
    if s is None:
        s = []
        setattr(_local, name, s)
    return s


class Workspace:
    """Counts live tensor scalars allocated while it is active.

    Every :class:`Tensor` buffer created inside ``track_workspace()`` is charged
    to the innermost tracker and refunded when the tensor is garbage collected.
    ``peak`` is the high-water mark of simultaneously live scalars.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.allocations = 0
        self.largest = 0

    def _alloc(self, n: int) -> None:
        self.live += n
        self.allocations += 1
        if n > self.largest:
            self.largest = n
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, n: int) -> None:
        self.live -= n


@contextmanager
def track_workspace() -> Iterator[Workspace]:
    ws = Workspace()
    stack = _stack("workspaces")
    stack.append(ws)
    try:
        yield ws
    finally:
        stack.pop()


class Tensor:
    """Immutable dense row-major f64 array with 1 to 4 dimensions.

    Tensors are hashable by identity so they can key gradient dictionaries.
    ``requires_grad`` marks a leaf whose gradient the tape should report.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_ws", "_n", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self._init(arr, requires_grad, name)

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        t._init(arr, False, name)
        return t

    def _init(self, arr: np.ndarray, requires_grad: bool, name: str | None) -> None:
        self._ws = None
        self._n = 0
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensors have 1 to 4 dimensions, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        stack = _stack("workspaces")
        if stack:
            self._ws = stack[-1]
            self._n = arr.size
            self._ws._alloc(arr.size)

    def __del__(self) -> None:
        ws = getattr(self, "_ws", None)
        if ws is not None:
            ws._free(self._n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """A writable copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable ops executed inside ``with Tape() as tape:``.

    ``backward(loss)`` replays the record in exact reverse order and returns
    the gradient of every leaf tensor with ``requires_grad`` that took part.
    A tape is single-use.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.visited: list[int] = []
        self._consumed = False
        self._open = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        self._open = True
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._open = False
        stack = _stack("tapes")
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self._consumed:
            raise TapeError("backward() already ran on this tape; re-run forward on a new tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            self.visited.append(idx)
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            g_in = node.backward(g_out)
            for t, g in zip(node.inputs, g_in):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=np.float64).reshape(t.shape)
                if key not in produced:
                    leaves[key] = t
        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros(t.shape)
            t.grad = g
            out[t] = g
        # free saved activations
        self.nodes = []
        return out


def current_tape() -> Tape | None:
    stack = _stack("tapes")
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Temporarily suspend recording onto any active tape."""
    saved = list(_stack("tapes"))
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)
