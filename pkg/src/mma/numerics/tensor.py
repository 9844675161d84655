"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a row-major numpy array. Every differentiable
operation that touches a tensor with ``requires_grad`` records a node holding
its parents and a backward rule; :func:`backward` sorts the recorded graph
into a :class:`Tape` and replays it in reverse, accumulating gradients
additively across fan-out.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "as_tensor",
]


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE: type = np.float32


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. float64 for oracles)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results of ops inside are constants."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        """Build a constant without copying ``data``."""
        out = object.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        return out

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; the rules live in functional.py.
    def __add__(self, other):
        return _F().add(self, other)

    def __radd__(self, other):
        return _F().add(other, self)

    def __sub__(self, other):
        return _F().sub(self, other)

    def __rsub__(self, other):
        return _F().sub(other, self)

    def __mul__(self, other):
        return _F().mul(self, other)

    def __rmul__(self, other):
        return _F().mul(other, self)

    def __truediv__(self, other):
        return _F().div(self, other)

    def __rtruediv__(self, other):
        return _F().div(other, self)

    def __neg__(self):
        return _F().neg(self)

    def __matmul__(self, other):
        return _F().matmul(self, other)

    def __getitem__(self, index):
        return _F().getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _F().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _F().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _F().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _F().transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _F():
    from mma.numerics import functional

    return functional


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Coerce scalars and arrays to constants, matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Create an op output, recording it on the tape when any parent needs grads."""
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Recorded primitive applications reachable from ``root``, in topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf with d root / d leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root was not produced under a recording tape")
    Tape(root).replay(np.ones_like(root.data))
