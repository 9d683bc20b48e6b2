"""
Define-by-run tensor with reverse-mode differentiation.

Every op in `ops.py` produces a new Tensor that remembers its parents and a
vector-Jacobian product closure. `backward(loss)` walks the recorded graph once
in reverse topological order and accumulates gradients into leaves.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from src.core.exceptions import ContractError

logger = logging.getLogger(__name__)

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    n-dimensional float64 array participating in a differentiation graph.

    Leaves are created directly (parameters, constants); interior nodes are
    created by ops and carry `_parents` plus a `_vjp` closure.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        *,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Optional[VJP] = None,
        _op: str = "leaf",
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    # Operator sugar; the implementations live in ops.py
    def __add__(self, other):
        from src.infra.numeric import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.infra.numeric import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src.infra.numeric import ops
        return ops.sub(ops.as_tensor(other), self)

    def __mul__(self, other):
        from src.infra.numeric import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from src.infra.numeric import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from src.infra.numeric import ops
        return ops.scale(self, -1.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad}{label})"


def make_node(data: np.ndarray, parents: Sequence[Tensor], vjp: VJP, op: str) -> Tensor:
    """Create an op output; records the graph edge only when a parent needs grad."""
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


@dataclass
class Graph:
    """Topologically ordered view of the nodes reachable from an output."""
    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        visited: set[int] = set()
        # Iterative DFS; recursion depth would track the network depth otherwise
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        leaves = [n for n in order if n.is_leaf]
        return cls(nodes=order, leaves=leaves)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Graph:
    """
    Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Raises:
        ContractError: If loss is not scalar or its graph was already consumed
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("Graph already consumed by an earlier backward(); rebuild the forward pass")
    if not loss.requires_grad:
        raise ContractError("Loss does not depend on any tensor that requires grad")

    graph = graph or Graph.trace(loss)
    if any(node._vjp is None for node in graph.nodes if not node.is_leaf):
        raise ContractError("Graph shares nodes with a consumed backward(); rebuild the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    # Release closures so a second backward cannot silently reuse stale activations
    for node in graph.nodes:
        if not node.is_leaf:
            node._vjp = None
    loss._consumed = True
    logger.debug("backward visited %d nodes, %d leaves", len(graph.nodes), len(graph.leaves))
    return graph
