"""
Minimal dense tensor with reverse-mode automatic differentiation.

Values are float64 numpy arrays in row-major order. Every differentiable
operation returns a new `Tensor` that remembers its inputs and a rule mapping
the upstream gradient to one gradient per input. `backward` orders those
records into a `ComputationTape` and replays it in reverse.

Gradients accumulate into `Tensor.grad` across calls until `zero_grad` is
called. No operation mutates its inputs.
"""
import contextlib
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from errors import ContractError, DegenerateBatchError, DimensionError, IdRangeError

_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disables tape recording for the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """
    A dense n-dimensional float64 value with an optional gradient record.

    Attributes:
        data (np.ndarray): The values; `product(shape) == data.size`.
        requires_grad (bool): Whether gradients are tracked for this value.
        grad (np.ndarray, optional): Accumulated gradient, same shape as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_propagate", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._inputs = ()
        self._propagate = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data, inputs, propagate, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._inputs = tuple(inputs)
            out._propagate = propagate
        else:
            out.requires_grad = False
            out._inputs = ()
            out._propagate = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple
    propagate: Callable


class ComputationTape:
    """
    Recorded operations in topological order.

    An entry appears after every entry that produced one of its inputs, so
    replaying the list backwards visits each operation exactly once after all
    of its consumers.
    """

    def __init__(self, entries):
        self.entries = list(entries)

    @classmethod
    def from_output(cls, output):
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in visited:
                    stack.append((parent, False))

        return cls(TapeEntry(node, node._inputs, node._propagate) for node in order if node._propagate is not None)

    def __len__(self):
        return len(self.entries)


def _accumulate(tensor, gradient):
    if tensor.grad is None:
        tensor.grad = np.array(gradient, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + gradient


def backward(loss):
    """
    Back-propagates from a scalar `loss` into every tracked ancestor.

    Args:
        loss (Tensor): A single-element tensor produced through recorded operations.

    Raises:
        ContractError: If `loss` is not a scalar.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")

    tape = ComputationTape.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    nodes = {id(loss): loss}

    for entry in reversed(tape.entries):
        upstream = pending.pop(id(entry.output), None)
        if upstream is None:
            continue
        _accumulate(entry.output, upstream)

        for node, gradient in zip(entry.inputs, entry.propagate(upstream)):
            if gradient is None or not node.requires_grad:
                continue
            nodes[id(node)] = node
            if id(node) in pending:
                pending[id(node)] = pending[id(node)] + gradient
            else:
                pending[id(node)] = gradient

    # leaves never own a tape entry, their gradient is still pending here
    for key, gradient in pending.items():
        _accumulate(nodes[key], gradient)


def _unbroadcast(gradient, shape):
    """Sums `gradient` down to `shape`, undoing numpy broadcasting."""
    while gradient.ndim > len(shape):
        gradient = gradient.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and gradient.shape[axis] != 1:
            gradient = gradient.sum(axis=axis, keepdims=True)
    return gradient


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} cannot broadcast shapes {a.shape} and {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def propagate(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), propagate, "add")


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")

    def propagate(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), propagate, "subtract")


def multiply(a, b):
    """Element-wise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")

    def propagate(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), propagate, "multiply")


def scale(a, factor):
    factor = float(factor)

    def propagate(g):
        return (g * factor,)

    return Tensor._result(a.data * factor, (a,), propagate, "scale")


def matmul(a, b):
    """
    Batched matrix product `[.., m, k] @ [.., k, n] -> [.., m, n]`.

    Raises:
        DimensionError: If either operand has rank below 2, inner extents
            differ, or batch extents do not broadcast.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul cannot combine shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents of {a.shape} and {b.shape} do not broadcast")

    def propagate(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor._result(np.matmul(a.data, b.data), (a, b), propagate, "matmul")


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} is out of bounds for shape {x.shape}")


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`."""
    _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)

    def propagate(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), propagate, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """
    Standardizes the last axis of `x`, then applies `gain` and `bias`.

    Raises:
        DimensionError: If `gain` or `bias` do not match the last extent of `x`.
    """
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm gain {gain.shape} / bias {bias.shape} do not match {x.shape}")

    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    out = normalized * gain.data + bias.data

    def propagate(g):
        lead = tuple(range(g.ndim - 1))
        grad_gain = (g * normalized).sum(axis=lead)
        grad_bias = g.sum(axis=lead)
        d_norm = g * gain.data
        grad_x = inv_std * (
            d_norm
            - d_norm.mean(axis=-1, keepdims=True)
            - normalized * (d_norm * normalized).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return Tensor._result(out, (x, gain, bias), propagate, "layer_norm")


def cross_entropy_from_logits(logits, targets, pad_id):
    """
    Mean negative log-likelihood over non-pad target positions.

    Args:
        logits (Tensor): Scores of shape `[B, L, V]`.
        targets (array-like): Token ids of shape `[B, L]`.
        pad_id (int): Id whose positions are excluded from both sum and count.

    Returns:
        Tensor: A scalar loss.

    Raises:
        DimensionError: If `targets` does not match the leading extents of `logits`.
        IdRangeError: If a non-pad target id is outside `[0, V)`.
        DegenerateBatchError: If every target is padding.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross entropy logits {logits.shape} do not match targets {targets.shape}")

    vocab = logits.shape[-1]
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is padding")
    if np.any(targets[keep] < 0) or np.any(targets[keep] >= vocab):
        raise IdRangeError(f"target ids must lie in [0, {vocab})")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    safe_targets = np.where(keep, targets, 0)
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def propagate(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, safe_targets[..., None], np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0, axis=-1)
        grad = grad * keep[..., None] * (float(g) / count)
        return (grad,)

    return Tensor._result(np.array(loss), (logits,), propagate, "cross_entropy")


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")

    def propagate(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), propagate, "reshape")


def transpose_last_two(x):
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {x.shape}")

    def propagate(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._result(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), propagate, "transpose")


def embedding(weight, ids):
    """
    Gathers rows of `weight`; the gradient scatter-adds back into those rows.

    Raises:
        IdRangeError: If an id falls outside the table.
    """
    ids = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IdRangeError(f"embedding ids must lie in [0, {rows})")

    def propagate(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (grad,)

    return Tensor._result(weight.data[ids], (weight,), propagate, "embedding")


def relu(x):
    mask = x.data > 0

    def propagate(g):
        return (g * mask,)

    return Tensor._result(x.data * mask, (x,), propagate, "relu")


def dropout(x, p, rng=None, train=False):
    """
    Inverted dropout: in train mode zeroes entries with probability `p` and
    scales survivors by `1 / (1 - p)`; identity otherwise.
    """
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")

    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def propagate(g):
        return (g * mask,)

    return Tensor._result(x.data * mask, (x,), propagate, "dropout")


def concat_last(tensors):
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat cannot join shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def propagate(g):
        return tuple(np.split(g, bounds, axis=-1))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=-1), tensors, propagate, "concat")


def split_last(x, parts):
    """Splits the last axis into `parts` equal pieces."""
    width = x.shape[-1]
    if parts < 1 or width % parts != 0:
        raise DimensionError(f"cannot split last extent of {x.shape} into {parts} parts")
    step = width // parts

    pieces = []
    for index in range(parts):
        lo, hi = index * step, (index + 1) * step

        def propagate(g, lo=lo, hi=hi):
            grad = np.zeros_like(x.data)
            grad[..., lo:hi] = g
            return (grad,)

        pieces.append(Tensor._result(np.ascontiguousarray(x.data[..., lo:hi]), (x,), propagate, "split"))
    return pieces


def sum_all(x):
    def propagate(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.array(x.data.sum()), (x,), propagate, "sum")
