"""Dense-array tensors with reverse-mode differentiation.

A `Tensor` wraps a float64 numpy array and remembers the operation that made
it. Calling `backward` on a scalar result orders the recorded graph into a
`Trace` (parents before children), seeds the result's gradient with one and
runs every node's local backward rule once, in reverse order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

# Denominator floor for gradients that are zero on both sides.
RELATIVE_ERROR_FLOOR = 1e-8


class Tensor:
    """An n-dimensional array node in the differentiation graph.

    Args:
        data (ArrayLike): Values; stored as a float64 array.
        parents (Tuple[Tensor, ...], optional): Inputs of the producing operation.
        op (str, optional): Name of the producing operation.
        requires_grad (bool, optional): Whether gradients flow into this leaf.
    """

    def __init__(self, data: ArrayLike, parents: Tuple[Tensor, ...] = (), op: str = "", requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad or any(parent.requires_grad for parent in parents)
        self.grad: Optional[np.ndarray] = None
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def accumulate(self, delta: np.ndarray) -> None:
        """Add `delta` to the gradient buffer."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(delta, dtype=np.float64, copy=True)
        else:
            self.grad += delta

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r})"

    def __add__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __sub__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return add(self, -as_tensor(other))

    def sum(self) -> Tensor:
        return total(self)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Parameter(Tensor):
    """A named trainable leaf whose gradient starts at zero and accumulates.

    Args:
        name (str): Unique parameter name.
        data (ArrayLike): Initial values.
    """

    def __init__(self, name: str, data: ArrayLike):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Trace:
    """Executed operations in topological order: every node follows its inputs."""

    def __init__(self, nodes: Iterable[Tensor]):
        self.nodes: List[Tensor] = list(nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> Trace:
        """Order every gradient-carrying ancestor of `output` by depth-first post-order."""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def is_topological(self) -> bool:
        position = {id(node): index for index, node in enumerate(self.nodes)}
        return all(
            position[id(parent)] < position[id(node)]
            for node in self.nodes
            for parent in node.parents
            if id(parent) in position
        )

    def parameters(self) -> List[Parameter]:
        return [node for node in self.nodes if isinstance(node, Parameter)]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, trace: Optional[Trace] = None) -> Trace:
    """Back-propagate from a scalar loss into every reachable leaf.

    Intermediate gradients are rebuilt from scratch; parameter gradients add
    onto whatever they already hold, so callers zero them between steps.

    Args:
        loss (Tensor): Scalar result.
        trace (Trace, optional): Precomputed trace ending in `loss`.

    Returns:
        Trace: The trace that was executed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    trace = trace if trace is not None else Trace.from_output(loss)
    for node in trace:
        if not node.is_leaf:
            node.grad = None
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(trace.nodes):
        if node.grad is not None:
            node._backward()
    return trace


def _unbroadcast(gradient: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while gradient.ndim > len(shape):
        gradient = gradient.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and gradient.shape[axis] != 1:
            gradient = gradient.sum(axis=axis, keepdims=True)
    return gradient


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data, (a, b), "add")
    except ValueError as error:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from error

    def _backward():
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = _backward
    return out


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data, (a, b), "mul")
    except ValueError as error:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from error

    def _backward():
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _backward
    return out


def total(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = Tensor(a.data.sum(), (a,), "sum")

    def _backward():
        a.accumulate(np.broadcast_to(out.grad, a.shape))

    out._backward = _backward
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), (a,), "mean")

    def _backward():
        a.accumulate(np.broadcast_to(out.grad / a.data.size, a.shape))

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,), "relu")

    def _backward():
        a.accumulate(out.grad * mask)

    out._backward = _backward
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = Tensor(a.data.reshape(tuple(shape)), (a,), "reshape")
    except ValueError as error:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from error

    def _backward():
        a.accumulate(out.grad.reshape(a.shape))

    out._backward = _backward
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation of {a.ndim} dimensions")
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), (a,), "transpose")

    def _backward():
        a.accumulate(out.grad.transpose(inverse))

    out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along `axis`."""
    tensors = [as_tensor(tensor) for tensor in tensors]
    try:
        out = Tensor(np.concatenate([tensor.data for tensor in tensors], axis=axis), tuple(tensors), "concat")
    except ValueError as error:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from error
    bounds = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def _backward():
        for tensor, piece in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            tensor.accumulate(piece)

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply matrices {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _backward():
        a.accumulate(out.grad @ b.data.T)
        b.accumulate(a.data.T @ out.grad)

    out._backward = _backward
    return out


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_relative_error: float
    checked: int
    tolerance: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def grad_check(
    function: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    rng_seed: int = 0,
    analytic: Optional[Dict[int, np.ndarray]] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Args:
        function (Callable[[], Tensor]): Rebuilds the graph from `params` and returns a scalar.
        params (Sequence[Tensor]): Leaves to check; their `.data` is perturbed in place and restored.
        h (float, optional): Finite-difference step.
        tolerance (float, optional): Pass threshold on the relative error.
        max_coords (int, optional): Coordinates sampled per parameter; all when None.
        rng_seed (int, optional): Seed for coordinate sampling.
        analytic (Dict[int, np.ndarray], optional): Gradients to test instead of back-propagated
            ones, keyed by position in `params`.

    Returns:
        GradCheckReport: Maximum relative error, with denominators floored at `RELATIVE_ERROR_FLOOR`.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    if analytic is None:
        for param in params:
            param.grad = np.zeros_like(param.data) if isinstance(param, Parameter) else None
        backward(function())
        analytic = {
            index: (param.grad if param.grad is not None else np.zeros_like(param.data)).copy()
            for index, param in enumerate(params)
        }

    rng = np.random.default_rng(rng_seed)
    worst, worst_label, checked = 0.0, "", 0
    for index, param in enumerate(params):
        flat = param.data.flat
        size = param.data.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        gradient = np.asarray(analytic[index]).reshape(-1)
        for coord in coords:
            original = flat[coord]
            flat[coord] = original + h
            upper = function().item()
            flat[coord] = original - h
            lower = function().item()
            flat[coord] = original
            numeric = (upper - lower) / (2 * h)
            error = abs(gradient[coord] - numeric) / max(abs(gradient[coord]), abs(numeric), RELATIVE_ERROR_FLOOR)
            checked += 1
            if error > worst:
                worst = error
                worst_label = f"{getattr(param, 'name', f'param{index}')}[{coord}]"
    report = GradCheckReport(worst, checked, tolerance, worst_label)
    logger.debug("gradient check: %d coordinates, max relative error %.3e at %s", checked, worst, worst_label)
    return report
