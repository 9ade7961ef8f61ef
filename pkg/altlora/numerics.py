"""Dense float64 tensors with reverse-mode gradient propagation.

Every operation records a Node (op tag, parents, backward rule) on its output when
any input requires a gradient. The graph is rebuilt on each forward pass and
walked once, in reverse topological order, by backward(). Leaf gradients
accumulate until zero_grad() is called.
"""

import contextvars
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from altlora import ContractError, DimensionError, TokenIndexError

_grad_enabled = contextvars.ContextVar("altlora_grad_enabled", default=True)


@contextmanager
def no_grad():
    """Record no graph inside the block (inference, finite differences)"""

    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Node:
    """Compute graph node

    Parameters:
        operation tag (str): op
        input tensors (tuple): parents
        output gradient -> one gradient per parent (Callable): backward
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """Dense row-major float64 array with an optional gradient slot"""

    def __init__(self, values, requires_grad: bool = False, node: Optional[Node] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values) -> Tensor:
    """Leaf tensor taking part in optimization"""

    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, values: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    requires_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
    node = Node(op, parents, backward) if requires_grad else None
    return Tensor(values, requires_grad=requires_grad, node=node)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape"""

    if grad.shape == shape:
        return grad

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


# Elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.values + b.values, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.values - b.values, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record("mul", a.values * b.values, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _record("scale", a.values * c, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(a.values),)

    return _record("abs", np.abs(a.values), (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        return (g * (a.values > 0.0),)

    return _record("relu", np.maximum(a.values, 0.0), (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""

    x = a.values
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))

    def backward(g):
        dt = (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _record("gelu", 0.5 * x * (1.0 + t), (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout, the kept units are scaled by 1/(1-rate)"""

    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a

    keep = rng.random(a.shape) >= rate
    return mul(a, Tensor(keep / (1.0 - rate)))


# Linear algebra and shapes


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast"""

    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", values, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes"""

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose", np.swapaxes(a.values, -1, -2), (a,), backward)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record("permute", np.transpose(a.values, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _record("reshape", a.values.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(
        "concat", np.concatenate([t.values for t in tensors], axis=axis), tensors, backward
    )


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; ids may have any shape"""

    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    outside = ids[(ids < 0) | (ids >= vocab)]
    if outside.size:
        raise TokenIndexError(f"token id {int(outside[0])} outside vocabulary of {vocab}")

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding", table.values[ids], (table,), backward)


# Reductions


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        return (_expand(g, a.shape, axis, keepdims),)

    return _record("sum", a.values.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        return (_expand(g, a.shape, axis, keepdims) / count,)

    return _record("mean", a.values.mean(axis=axis, keepdims=keepdims), (a,), backward)


# Normalization and distributions


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learnable gain and bias"""

    n = x.shape[-1]
    centered = x.values - x.values.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        dxhat = g * gain.values
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        return dx, dgain, dbias

    return _record(
        "layer_norm", xhat * gain.values + bias.values, (x, gain, bias), backward
    )


def _log_softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction"""

    shifted = np.exp(x.values - x.values.max(axis=-1, keepdims=True))
    s = shifted / shifted.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", s, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    out = _log_softmax(x.values)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (x,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over the positions not equal to ignore_index

    All positions ignored gives 0 with a zero gradient.
    """

    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: targets {targets.shape} don't match logits {logits.shape}"
        )

    vocab = logits.shape[-1]
    valid = np.ones(targets.shape, dtype=bool)
    if ignore_index is not None:
        valid = targets != ignore_index

    outside = targets[valid & ((targets < 0) | (targets >= vocab))]
    if outside.size:
        raise TokenIndexError(f"target {int(outside[0])} outside vocabulary of {vocab}")

    count = int(valid.sum())
    if count == 0:

        def backward_empty(g):
            return (np.zeros_like(logits.values),)

        return _record("cross_entropy", np.array(0.0), (logits,), backward_empty)

    safe = np.where(valid, targets, 0)
    logp = _log_softmax(logits.values)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1
        )
        return (grad * valid[..., None] * (g / count),)

    return _record("cross_entropy", np.array(loss), (logits,), backward)


# Gradients


def _topological(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue

        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss

    Gradients accumulate across calls until zero_grad().
    """

    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.values)}
    for tensor in reversed(_topological(loss)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue

        if tensor.node is None:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue

        for parent, pg in zip(tensor.node.parents, tensor.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.values)


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Relative error between backward() and central finite differences

    ||analytic - numeric|| / (||analytic|| + ||numeric||), 0 when both vanish.
    """

    zero_grad(inputs)
    backward(fn())
    analytic = np.concatenate([t.grad.reshape(-1) for t in inputs])

    numeric = []
    with no_grad():
        for t in inputs:
            estimate = np.zeros(t.shape)
            for index in np.ndindex(*t.shape):
                original = t.values[index]
                t.values[index] = original + h
                plus = fn().item()
                t.values[index] = original - h
                minus = fn().item()
                t.values[index] = original
                estimate[index] = (plus - minus) / (2.0 * h)
            numeric.append(estimate.reshape(-1))
    numeric = np.concatenate(numeric)

    scale_ = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale_ == 0.0:
        return 0.0

    return float(np.linalg.norm(analytic - numeric) / scale_)
