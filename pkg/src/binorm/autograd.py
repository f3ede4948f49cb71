"""Define-by-run reverse-mode differentiation over the tensor primitives.

Operations are recorded on a Tape as they execute. Each recorded Node keeps
a closure that maps the upstream gradient to one gradient per input, with the
intermediates it needs captured in the closure. A Variable that is not bound
to a tape (or none of whose inputs require gradients) is computed eagerly and
never recorded, which is how inference runs through the same layer code.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import erf

from binorm import tensor as T
from binorm.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Variable:
    """A value in the graph, optionally tracked on a tape."""

    value: np.ndarray
    requires_grad: bool = False
    node_id: int = -1
    tape: "Tape | None" = field(default=None, repr=False)
    grad: np.ndarray | None = field(default=None, repr=False)
    name: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.node_id >= 0


@dataclass
class Node:
    """One recorded operation."""

    op: str
    inputs: tuple[int, ...]
    backward: Backward | None = None


class Tape:
    """Records operations in execution order for a single backward pass.

    A tape is single-threaded and meant to live for one training step.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.variables: list[Variable] = []
        self._bound: dict[int, Variable] = {}
        self._owners: list[Any] = []

    def _push(self, node: Node, var: Variable) -> Variable:
        var.node_id = len(self.nodes)
        var.tape = self
        self.nodes.append(node)
        self.variables.append(var)
        return var

    def variable(self, value: np.ndarray, requires_grad: bool = True, name: str = "") -> Variable:
        """Register a leaf."""
        var = Variable(np.asarray(value), requires_grad=requires_grad, name=name)
        return self._push(Node("leaf", ()), var)

    def constant(self, value: np.ndarray, name: str = "") -> Variable:
        """A leaf that never receives a gradient but carries the tape to its consumers."""
        return self.variable(value, requires_grad=False, name=name)

    def bind(self, owner: Any) -> Variable:
        """Leaf for an object with `.value` and `.name`, created once per tape.

        Every use of the same owner shares one Variable, so fan-out gradients sum.
        """
        key = id(owner)
        if key not in self._bound:
            self._owners.append(owner)
            self._bound[key] = self.variable(owner.value, requires_grad=True, name=owner.name)
        return self._bound[key]

    def bound(self, owner: Any) -> Variable | None:
        """The Variable created by bind() for owner, if any."""
        return self._bound.get(id(owner))

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Variable], backward: Backward) -> Variable:
        var = Variable(value, requires_grad=True)
        return self._push(Node(op, tuple(v.node_id for v in inputs), backward), var)

    def backward(self, loss: Variable) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar loss.

        Returns:
            Gradient per node id for every Variable that requires gradients.
            Leaves the loss does not reach get zeros. Leaf Variables also get
            their `.grad` attribute set.
        """
        if loss.tape is not self or not loss.tracked:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}

        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            node = self.nodes[node_id]
            if g is None or node.backward is None:
                continue

            for input_id, input_grad in zip(node.inputs, node.backward(g)):
                if input_grad is None or input_id < 0:
                    continue
                if not self.variables[input_id].requires_grad:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        result: dict[int, np.ndarray] = {}
        for var in self.variables:
            if not var.requires_grad:
                continue
            g = grads.get(var.node_id)
            if g is None:
                g = np.zeros_like(var.value)
            result[var.node_id] = g
            if self.nodes[var.node_id].op == "leaf":
                var.grad = g

        logger.debug("backward over %d nodes, %d gradients", loss.node_id + 1, len(result))
        return result


def _tape_of(inputs: Sequence[Variable]) -> "Tape | None":
    for v in inputs:
        if v.tape is not None:
            return v.tape
    return None


def apply(op: str, value: np.ndarray, inputs: Sequence[Variable], backward: Backward) -> Variable:
    """Wrap a computed value, recording it when any input needs a gradient."""
    tape = _tape_of(inputs)
    if tape is None or not any(v.requires_grad and v.tracked for v in inputs):
        return Variable(value, tape=tape)
    return tape.record(op, value, inputs, backward)


def constant(value: np.ndarray) -> Variable:
    """An untracked Variable."""
    return Variable(np.asarray(value))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Variable, b: Variable) -> Variable:
    value = a.value + b.value

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return apply("add", value, (a, b), backward)


def mul(a: Variable, b: Variable) -> Variable:
    value = a.value * b.value

    def backward(g):
        return unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)

    return apply("mul", value, (a, b), backward)


def scale(x: Variable, factor: float) -> Variable:
    value = x.value * np.asarray(factor, dtype=x.value.dtype)

    def backward(g):
        return (g * factor,)

    return apply("scale", value, (x,), backward)


def total(x: Variable) -> Variable:
    """Sum of all elements."""
    value = np.asarray(x.value.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.value.dtype),)

    return apply("sum", value, (x,), backward)


def mean(x: Variable) -> Variable:
    """Mean of all elements."""
    n = x.value.size
    value = np.asarray(x.value.mean())

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.value.dtype),)

    return apply("mean", value, (x,), backward)


def reshape(x: Variable, shape: tuple[int, ...]) -> Variable:
    value = x.value.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return apply("reshape", value, (x,), backward)


def permute(x: Variable, order: tuple[int, ...]) -> Variable:
    value = np.ascontiguousarray(np.transpose(x.value, order))
    inverse = tuple(np.argsort(order))

    def backward(g):
        return (np.transpose(g, inverse),)

    return apply("permute", value, (x,), backward)


def matmul(a: Variable, b: Variable) -> Variable:
    value = T.matmul(a.value, b.value)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return apply("matmul", value, (a, b), backward)


def take_rows(table: Variable, ids: np.ndarray) -> Variable:
    """Gather rows of a 2-d table: out[...] = table[ids[...]]."""
    ids = np.asarray(ids)
    value = table.value[ids]

    def backward(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return apply("take_rows", value, (table,), backward)


def conv2d(x: Variable, kernel: Variable, bias: Variable) -> Variable:
    value = T.conv2d(x.value, kernel.value, bias.value)
    fh, fw, c, nf = kernel.shape

    def backward(g):
        g2 = g.reshape(-1, nf)
        cols = T.im2col(x.value, fh, fw).reshape(g2.shape[0], -1)
        gk = np.matmul(cols.T, g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gcols = np.matmul(g2, kernel.value.reshape(-1, nf).T)
        gx = T.col2im(gcols, x.shape, fh, fw)
        return gx, gk, gb

    return apply("conv2d", value, (x, kernel, bias), backward)


def maxpool2d(x: Variable) -> Variable:
    value = T.maxpool2d(x.value)
    n, h, w, c = x.shape

    def backward(g):
        # window elements in row-major (dy, dx) order; argmax keeps the first maximum
        windows = x.value.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        windows = windows.reshape(n, h // 2, w // 2, c, 4)
        winner = windows.argmax(axis=-1)
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (routed.reshape(x.shape),)

    return apply("maxpool2d", value, (x,), backward)


def global_avg_pool(x: Variable) -> Variable:
    value = T.global_avg_pool(x.value)
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.value.dtype),)

    return apply("global_avg_pool", value, (x,), backward)


def activation(x: Variable, kind: str) -> Variable:
    value = T.activation(x.value, kind)
    if kind == "linear":
        return x

    def backward(g):
        if kind == "relu":
            return (g * (x.value > 0),)
        if kind == "gelu":
            cdf = 0.5 * (1.0 + erf(x.value / np.sqrt(2.0)))
            pdf = np.exp(-0.5 * x.value * x.value) / np.sqrt(2.0 * np.pi)
            return ((g * (cdf + x.value * pdf)).astype(x.value.dtype),)
        # softmax
        dot = (g * value).sum(axis=-1, keepdims=True)
        return (value * (g - dot),)

    return apply(kind, value, (x,), backward)


def normalize_features(
    x: Variable,
    eps: float = T.NORM_EPS,
    axes: tuple[int, ...] | None = None,
) -> Variable:
    axes = T.feature_axes(x.value, axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    centered = x.value - x.value.mean(axis=axes, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered / std

    def backward(g):
        sum_g = g.sum(axis=axes, keepdims=True)
        sum_gx = (g * xhat).sum(axis=axes, keepdims=True)
        return ((n * g - sum_g - xhat * sum_gx) / (n * std),)

    return apply("normalize", xhat, (x,), backward)


def masked_fill(x: Variable, keep: np.ndarray, fill: float) -> Variable:
    """Replace entries where keep is False with fill; broadcast keep over leading axes."""
    keep = np.asarray(keep, dtype=bool)
    value = np.where(keep, x.value, np.asarray(fill, dtype=x.value.dtype))

    def backward(g):
        return (np.where(keep, g, 0).astype(g.dtype),)

    return apply("masked_fill", value, (x,), backward)


def ste_passthrough(x: Variable, quantized_value: np.ndarray) -> Variable:
    """Forward quantized_value; pass the upstream gradient to x unchanged.

    This is x + NoGradient(quantized_value - x), with the forward value taken
    verbatim rather than recomputed by adding and subtracting x.
    """
    quantized_value = np.asarray(quantized_value)
    if quantized_value.shape != x.shape:
        raise DimensionError(
            f"ste_passthrough shape mismatch: {x.shape} vs {quantized_value.shape}"
        )

    def backward(g):
        return (g,)

    return apply("ste", quantized_value, (x,), backward)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Variable], Variable],
    x0: np.ndarray,
    h: float = 1e-5,
    *,
    reference: Callable[[Variable], Variable] | None = None,
    at: np.ndarray | None = None,
) -> float:
    """Compare the autograd gradient of f at x0 with central differences.

    Everything runs at float64. For an STE-wrapped f, pass the same network
    with quantization replaced by identity as `reference`, and the quantized
    point as `at`: the straight-through gradient is the gradient of that
    network there.

    Returns:
        max over coordinates of |numeric - autograd| / (|autograd| + 1e-8).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    reference = reference or f
    point = x0 if at is None else np.asarray(at, dtype=np.float64)

    tape = Tape()
    x = tape.variable(x0.copy())
    loss = f(x)
    analytic = tape.backward(loss)[x.node_id]

    def evaluate(v: np.ndarray) -> float:
        return float(reference(constant(v)).value)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        plus = evaluate((flat + step).reshape(point.shape))
        minus = evaluate((flat - step).reshape(point.shape))
        out[i] = (plus - minus) / (2.0 * h)

    error = np.abs(numeric - analytic) / (np.abs(analytic) + 1e-8)
    return float(error.max()) if error.size else 0.0
