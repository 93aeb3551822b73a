"""Dense tensor with a reverse-mode gradient tape.

Activations are rank-5 arrays laid out ``[N, T, H, W, C]`` (row-major, channels
fastest). Parameters reuse the same class with whatever rank they need.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError

# dtype used when building verification fixtures; training code passes float32
VERIFY_DTYPE = np.float64
TRAIN_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(VERIFY_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Sequence[Tensor] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``grad`` (default: ones) to every leaf that requires it.

        Interior nodes drop their gradient after use so a long training run
        does not keep every activation gradient alive.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} does not match {parent.data.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g
            node.grad = None
            node._parents = ()
            node._backward = None


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; ``backward(g)`` must return one gradient per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def check_activation(x: Tensor, what: str = "input") -> None:
    if x.data.ndim != 5:
        raise DimensionError(f"{what} must be rank 5 [N,T,H,W,C], got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"{what} has an empty extent: {x.shape}")


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)
