"""
Tape-based reverse-mode automatic differentiation.

Every value on a tape is a dense float64 matrix. Ops are small classes with a
forward rule (value + whatever backward needs) and a backward rule (vector-
Jacobian products for each input). A Tape records nodes eagerly in topological
order; `Tape.backward` walks them once in reverse, summing fan-out contributions.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Type

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Op inputs do not conform to the op's shape contract."""
    pass


@dataclass
class Node:
    """One recorded value. `grad` stays None until backward reaches the node."""

    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: Dict[str, Any] = field(default_factory=dict)
    saved: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None
    grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape


class Op(ABC):
    """Forward + backward rule for one primitive."""

    name: str = ""
    arity: int = 1

    @classmethod
    @abstractmethod
    def forward(cls, values: Sequence[np.ndarray], attrs: Dict[str, Any]):
        """Return (output, saved) for the given input values."""
        pass

    @classmethod
    @abstractmethod
    def backward(cls, grad, values, out, saved, attrs) -> Tuple[Optional[np.ndarray], ...]:
        """Return one gradient (or None) per input."""
        pass


OPS: Dict[str, Type[Op]] = {}


def register_op(name: str, arity: int):
    def decorator(cls: Type[Op]) -> Type[Op]:
        cls.name = name
        cls.arity = arity
        OPS[name] = cls
        return cls

    return decorator


def _require(cond: bool, op: str, message: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {message}")


@register_op("matmul", 2)
class MatMul(Op):
    @classmethod
    def forward(cls, values, attrs):
        a, b = values
        _require(
            a.shape[1] == b.shape[0], cls.name, f"inner dims differ: {a.shape} @ {b.shape}"
        )
        return a @ b, {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        a, b = values
        return grad @ b.T, a.T @ grad


@register_op("transpose", 1)
class Transpose(Op):
    @classmethod
    def forward(cls, values, attrs):
        return values[0].T.copy(), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return (grad.T,)


def _broadcast_rows(op: str, a: np.ndarray, b: np.ndarray) -> None:
    ok = a.shape == b.shape or (b.shape[0] == 1 and b.shape[1] == a.shape[1])
    _require(ok, op, f"shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0, keepdims=True)


@register_op("add", 2)
class Add(Op):
    """a + b, where b may be a single row broadcast over a (bias add)."""

    @classmethod
    def forward(cls, values, attrs):
        a, b = values
        _broadcast_rows(cls.name, a, b)
        return a + b, {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return grad, _unbroadcast(grad, values[1].shape)


@register_op("subtract", 2)
class Subtract(Op):
    @classmethod
    def forward(cls, values, attrs):
        a, b = values
        _broadcast_rows(cls.name, a, b)
        return a - b, {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return grad, -_unbroadcast(grad, values[1].shape)


@register_op("multiply", 2)
class Multiply(Op):
    @classmethod
    def forward(cls, values, attrs):
        a, b = values
        _require(a.shape == b.shape, cls.name, f"shapes {a.shape} and {b.shape} differ")
        return a * b, {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        a, b = values
        return grad * b, grad * a


@register_op("scale", 1)
class Scale(Op):
    @classmethod
    def forward(cls, values, attrs):
        return values[0] * attrs["factor"], {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return (grad * attrs["factor"],)


@register_op("row_softmax", 1)
class RowSoftmax(Op):
    @classmethod
    def forward(cls, values, attrs):
        x = values[0]
        _require(x.shape[1] > 0, cls.name, f"empty rows in {x.shape}")
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        inner = (grad * out).sum(axis=1, keepdims=True)
        return (out * (grad - inner),)


@register_op("relu", 1)
class Relu(Op):
    @classmethod
    def forward(cls, values, attrs):
        return np.maximum(values[0], 0.0), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        # subgradient 0 at exactly 0
        return (grad * (values[0] > 0.0),)


@register_op("clamp_min", 1)
class ClampMin(Op):
    @classmethod
    def forward(cls, values, attrs):
        return np.maximum(values[0], attrs["threshold"]), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return (grad * (values[0] > attrs["threshold"]),)


@register_op("power", 2)
class Power(Op):
    """Elementwise x ** p with a 1x1 exponent node; x must be positive where p matters."""

    @classmethod
    def forward(cls, values, attrs):
        x, p = values
        _require(p.shape == (1, 1), cls.name, f"exponent must be 1x1, got {p.shape}")
        return np.power(x, p[0, 0]), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        x, p = values
        exponent = p[0, 0]
        dx = grad * exponent * np.power(x, exponent - 1.0)
        positive = x > 0.0
        log_x = np.log(np.where(positive, x, 1.0))
        dp = np.array([[np.sum(np.where(positive, grad * out * log_x, 0.0))]])
        return dx, dp


@register_op("reciprocal", 1)
class Reciprocal(Op):
    @classmethod
    def forward(cls, values, attrs):
        return 1.0 / values[0], {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return (-grad * out * out,)


@register_op("gather_rows", 1)
class GatherRows(Op):
    @classmethod
    def forward(cls, values, attrs):
        x = values[0]
        index = attrs["index"]
        if index.size:
            _require(
                index.min() >= 0 and index.max() < x.shape[0],
                cls.name,
                f"index out of range for {x.shape[0]} rows",
            )
        return x[index], {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        dx = np.zeros_like(values[0])
        np.add.at(dx, attrs["index"], grad)
        return (dx,)


@register_op("scatter_add_rows", 1)
class ScatterAddRows(Op):
    """Sum rows of v into a zero matrix of `rows` rows at `index`; adjoint of gather_rows."""

    @classmethod
    def forward(cls, values, attrs):
        v = values[0]
        index, rows = attrs["index"], attrs["rows"]
        _require(
            index.shape[0] == v.shape[0],
            cls.name,
            f"{index.shape[0]} indices for {v.shape[0]} rows",
        )
        if index.size:
            _require(
                index.min() >= 0 and index.max() < rows,
                cls.name,
                f"index out of range for {rows} output rows",
            )
        out = np.zeros((rows, v.shape[1]), dtype=v.dtype)
        np.add.at(out, index, v)
        return out, {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return (grad[attrs["index"]],)


@register_op("reduce_mean_rows", 1)
class ReduceMeanRows(Op):
    @classmethod
    def forward(cls, values, attrs):
        x = values[0]
        _require(x.shape[0] > 0, cls.name, "no rows to average")
        return x.mean(axis=0, keepdims=True), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        x = values[0]
        return (np.broadcast_to(grad / x.shape[0], x.shape).copy(),)


@register_op("sum_all", 1)
class SumAll(Op):
    @classmethod
    def forward(cls, values, attrs):
        return np.array([[values[0].sum()]]), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        return (np.full_like(values[0], grad[0, 0]),)


@register_op("row_l2norm", 1)
class RowL2Norm(Op):
    """Euclidean norm of each row as an (N, 1) column; subgradient 0 at the zero row."""

    @classmethod
    def forward(cls, values, attrs):
        return np.sqrt((values[0] ** 2).sum(axis=1, keepdims=True)), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, grad / safe, 0.0) * values[0],)


@register_op("concat_rows", -1)
class ConcatRows(Op):
    @classmethod
    def forward(cls, values, attrs):
        cols = {v.shape[1] for v in values}
        _require(len(cols) == 1, cls.name, f"column counts differ: {sorted(cols)}")
        return np.concatenate(values, axis=0), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        bounds = np.cumsum([0] + [v.shape[0] for v in values])
        return tuple(grad[bounds[i] : bounds[i + 1]] for i in range(len(values)))


@register_op("concat_cols", -1)
class ConcatCols(Op):
    @classmethod
    def forward(cls, values, attrs):
        rows = {v.shape[0] for v in values}
        _require(len(rows) == 1, cls.name, f"row counts differ: {sorted(rows)}")
        return np.concatenate(values, axis=1), {}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        bounds = np.cumsum([0] + [v.shape[1] for v in values])
        return tuple(grad[:, bounds[i] : bounds[i + 1]] for i in range(len(values)))


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer (buffers, not parameters)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@register_op("batch_norm", 3)
class BatchNorm(Op):
    """
    Per-channel normalization over rows, then gamma * x_hat + beta.

    attrs: mode ("train" | "eval"), stats (BatchNormStats). Train mode uses batch
    statistics and updates the running ones in place; eval mode uses running stats.
    """

    @classmethod
    def forward(cls, values, attrs):
        x, gamma, beta = values
        stats: BatchNormStats = attrs["stats"]
        n, c = x.shape
        _require(gamma.shape == (1, c) and beta.shape == (1, c), cls.name,
                 f"affine shapes {gamma.shape}/{beta.shape} for {c} channels")
        if n == 0:
            raise ValueError("batch_norm: no rows to normalize")

        if attrs["mode"] == "train":
            if n == 1:
                raise ValueError("degenerate batch statistics")
            mean = x.mean(axis=0, keepdims=True)
            var = x.var(axis=0, keepdims=True)
            m = stats.momentum
            stats.running_mean[:] = (1.0 - m) * stats.running_mean + m * mean.reshape(-1)
            stats.running_var[:] = (1.0 - m) * stats.running_var + m * var.reshape(-1) * n / (n - 1)
        else:
            mean = stats.running_mean.reshape(1, c)
            var = stats.running_var.reshape(1, c)

        inv_std = 1.0 / np.sqrt(var + stats.eps)
        x_hat = (x - mean) * inv_std
        return gamma * x_hat + beta, {"x_hat": x_hat, "inv_std": inv_std}

    @classmethod
    def backward(cls, grad, values, out, saved, attrs):
        x, gamma, beta = values
        x_hat, inv_std = saved["x_hat"], saved["inv_std"]
        dgamma = (grad * x_hat).sum(axis=0, keepdims=True)
        dbeta = grad.sum(axis=0, keepdims=True)
        dx_hat = grad * gamma
        if attrs["mode"] == "train":
            n = x.shape[0]
            dx = (inv_std / n) * (
                n * dx_hat
                - dx_hat.sum(axis=0, keepdims=True)
                - x_hat * (dx_hat * x_hat).sum(axis=0, keepdims=True)
            )
        else:
            dx = dx_hat * inv_std
        return dx, dgamma, dbeta


def as_matrix(value) -> np.ndarray:
    """Coerce scalars and vectors to the 2-D shape every tape value has."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    return arr.reshape(-1, arr.shape[-1])


class Tape:
    """Append-only record of nodes; node ids are positions in `nodes`."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None, requires_grad: bool = True) -> int:
        """Record an input or parameter matrix."""
        node = Node("leaf", (), as_matrix(value), requires_grad, name=name)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def constant(self, value, name: Optional[str] = None) -> int:
        return self.leaf(value, name=name, requires_grad=False)

    def forward(self, op_kind: str, *inputs: int, **attrs) -> int:
        """
        Evaluate an op eagerly and append its node.

        Raises:
            KeyError: If the op kind is not registered
            ShapeError: If input shapes violate the op's contract
        """
        op = OPS[op_kind]
        if op.arity >= 0 and len(inputs) != op.arity:
            raise ShapeError(f"{op_kind}: expected {op.arity} inputs, got {len(inputs)}")
        values = [self.nodes[i].value for i in inputs]
        out, saved = op.forward(values, attrs)
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op_kind, tuple(inputs), out, requires_grad, attrs, saved))
        return len(self.nodes) - 1

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def backward(self, loss_node: int) -> Dict[int, np.ndarray]:
        """
        Propagate d(loss)/d(node) back through the tape.

        Returns:
            Gradient of every gradient-requiring leaf (zeros if unreachable)

        Raises:
            ValueError: If the loss is not 1x1
        """
        loss = self.nodes[loss_node]
        if loss.value.shape != (1, 1):
            raise ValueError(f"loss must be a 1x1 scalar, got {loss.value.shape}")

        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))

        for node_id in range(loss_node, -1, -1):
            node = self.nodes[node_id]
            if node.grad is None or not node.inputs or not node.requires_grad:
                continue
            op = OPS[node.op]
            values = [self.nodes[i].value for i in node.inputs]
            input_grads = op.backward(node.grad, values, node.value, node.saved, node.attrs)
            for input_id, g in zip(node.inputs, input_grads):
                target = self.nodes[input_id]
                if g is None or not target.requires_grad:
                    continue
                if target.grad is None:
                    target.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    target.grad += g

        return {
            i: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for i, n in enumerate(self.nodes)
            if n.op == "leaf" and n.requires_grad
        }

    # Convenience wrappers, one per primitive.

    def matmul(self, a: int, b: int) -> int:
        return self.forward("matmul", a, b)

    def transpose(self, a: int) -> int:
        return self.forward("transpose", a)

    def add(self, a: int, b: int) -> int:
        return self.forward("add", a, b)

    def subtract(self, a: int, b: int) -> int:
        return self.forward("subtract", a, b)

    def multiply(self, a: int, b: int) -> int:
        return self.forward("multiply", a, b)

    def scale(self, a: int, factor: float) -> int:
        return self.forward("scale", a, factor=float(factor))

    def row_softmax(self, a: int) -> int:
        return self.forward("row_softmax", a)

    def relu(self, a: int) -> int:
        return self.forward("relu", a)

    def clamp_min(self, a: int, threshold: float) -> int:
        return self.forward("clamp_min", a, threshold=float(threshold))

    def power(self, a: int, p: int) -> int:
        return self.forward("power", a, p)

    def reciprocal(self, a: int) -> int:
        return self.forward("reciprocal", a)

    def gather_rows(self, a: int, index) -> int:
        return self.forward("gather_rows", a, index=np.asarray(index, dtype=np.int64))

    def scatter_add_rows(self, a: int, index, rows: int) -> int:
        return self.forward(
            "scatter_add_rows", a, index=np.asarray(index, dtype=np.int64), rows=int(rows)
        )

    def reduce_mean_rows(self, a: int) -> int:
        return self.forward("reduce_mean_rows", a)

    def sum_all(self, a: int) -> int:
        return self.forward("sum_all", a)

    def row_l2norm(self, a: int) -> int:
        return self.forward("row_l2norm", a)

    def concat_rows(self, parts: Iterable[int]) -> int:
        return self.forward("concat_rows", *parts)

    def concat_cols(self, parts: Iterable[int]) -> int:
        return self.forward("concat_cols", *parts)

    def batch_norm(self, x: int, gamma: int, beta: int, stats: BatchNormStats, mode: str) -> int:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown batch-norm mode: {mode}")
        return self.forward("batch_norm", x, gamma, beta, stats=stats, mode=mode)


Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def grad_check(
    f: Objective,
    theta: np.ndarray,
    eps: float = 1e-6,
    components: Optional[Sequence[int]] = None,
) -> float:
    """
    Compare an analytic gradient with central finite differences.

    Args:
        f: Maps a parameter vector to (value, analytic gradient)
        theta: Point to check at
        eps: Finite-difference half step
        components: Optional subset of indices to check (default: all)

    Returns:
        max over checked components of |analytic - numeric| / max(1, |analytic|, |numeric|)

    Raises:
        ValueError: If eps <= 0 or f returns a non-finite value
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1).copy()

    value, analytic = f(theta)
    if not np.isfinite(value):
        raise ValueError(f"objective is not finite at theta: {value}")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    indices = range(theta.size) if components is None else components
    worst = 0.0
    for i in indices:
        original = theta[i]
        theta[i] = original + eps
        plus, _ = f(theta)
        theta[i] = original - eps
        minus, _ = f(theta)
        theta[i] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise ValueError(f"objective is not finite near component {i}")
        numeric = (plus - minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)

    logger.debug(
        "grad_check finished",
        extra={
            "event": "grad_check",
            "metadata": {"components": len(indices), "max_rel_err": worst},
        },
    )
    return worst


def tape_objective(
    build: Callable[[Tape, List[int]], int],
    shapes: Sequence[Tuple[int, ...]],
) -> Objective:
    """
    Turn a tape builder into a flat-vector objective for grad_check.

    `build(tape, leaf_ids)` must return a 1x1 node; theta is split into arrays of the
    given shapes, each recorded as a leaf.
    """
    sizes = [int(np.prod(s)) for s in shapes]
    bounds = np.cumsum([0] + sizes)

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        tape = Tape()
        leaves = [
            tape.leaf(theta[bounds[i] : bounds[i + 1]].reshape(shape))
            for i, shape in enumerate(shapes)
        ]
        loss = build(tape, leaves)
        grads = tape.backward(loss)
        flat = np.concatenate([grads[leaf].reshape(-1) for leaf in leaves])
        return float(tape.value(loss)[0, 0]), flat

    return objective
