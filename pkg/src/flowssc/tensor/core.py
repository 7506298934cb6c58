"""Tensor type, recording tape and reverse-mode backward pass.

Every differentiable primitive appends one :class:`Node` to the thread's
current :class:`Tape`.  ``backward`` walks the tape in exact reverse order of
recording, hands each node the gradient of its output, and accumulates the
returned input gradients.  After a backward pass the tape is cleared and a
fresh one is installed, so a graph can be consumed exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(np.float64 if os.environ.get("FLOWSSC_FLOAT64", "") not in ("", "0") else np.float32)
_uid_counter = itertools.count()


class GraphError(RuntimeError):
    """Raised for misuse of the recording tape (dead graph, non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by '{op}'")
        self.op = op


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Set the global compute precision (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported compute dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Node:
    __slots__ = ("name", "out_uid", "parents", "backward")

    def __init__(self, name: str, out_uid: int, parents: tuple, backward: Callable):
        self.name = name
        self.out_uid = out_uid
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed primitives for one training step."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.alive = True

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        # Dropping the nodes releases every saved activation.
        self.nodes = []
        self.alive = False


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def reset_graph() -> None:
    """Discard the current tape and start recording on a fresh one."""
    _state.tape.clear()
    _state.tape = Tape()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense real-valued array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "_uid", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._tape: Tape | None = None
        self._uid = next(_uid_counter)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator overloads are attached by ``flowssc.tensor.ops``.


def _raise_item(shape):
    raise ValueError(f"item() requires a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(
    name: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    check_finite: bool = True,
) -> Tensor:
    """Wrap a forward result and record it on the tape when any parent needs grads."""
    if check_finite and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._uid = next(_uid_counter)
    out._node = None
    out._tape = None
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        node = Node(name, out._uid, tuple(parents), backward_fn)
        tape = _state.tape
        tape.nodes.append(node)
        out._node = node
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            # loss is itself a leaf
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphError("loss was not produced by a recorded graph")
    tape = loss._tape
    if tape is None or not tape.alive:
        raise GraphError("graph already consumed or cleared; re-run the forward pass")
    grads: dict[int, np.ndarray] = {loss._uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_uid, None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.astype(parent.dtype, copy=True) if parent.grad is None else parent.grad + pg
            else:
                prev = grads.get(parent._uid)
                grads[parent._uid] = pg if prev is None else prev + pg
    tape.clear()
    if _state.tape is tape:
        _state.tape = Tape()
