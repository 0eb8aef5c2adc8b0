"""
Dense tensors with reverse-mode automatic differentiation.

This module is the numeric engine under every other part of contextgate. A ``Tensor`` wraps a
C-ordered float64 numpy array (channels-last, so feature maps are ``H x W x D`` or
``N x H x W x D``). Every primitive below records the closure that maps an upstream gradient
to gradients for its inputs; ``backward`` collects those records into a ``Tape`` ordered by
execution sequence and replays it in exact reverse order, summing gradients wherever a value
fans out.

Primitives accept optional leading batch axes wherever the math is per-position, so the same
functions serve single feature maps and batches.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
BN_EPS = 1e-5

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# Global execution counter. itertools.count.__next__ is atomic under the GIL, so tensors built
# on different threads still get unique, monotonically increasing sequence numbers.
_execution_order = itertools.count()


class Tensor:
    """An N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq = next(_execution_order)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / float(other))


FeatureMap = Tensor
"""Alias for rank-3 (``H x W x D``) or batched rank-4 tensors."""


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_execution_order)
    if any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class ParameterKind(str, Enum):
    WEIGHT = "weight"
    BIAS = "bias"
    NORM = "norm"


@dataclass
class Parameter:
    """A named trainable tensor.

    ``kind`` decides which regularizer applies: weights get the weight penalty and gradient
    centralization, biases get the bias penalty, and normalization affine parameters get
    neither.
    """

    name: str
    tensor: Tensor
    kind: ParameterKind = ParameterKind.WEIGHT

    def __post_init__(self) -> None:
        self.tensor.requires_grad = True
        self.tensor.name = self.name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None

    @classmethod
    def kaiming(
        cls, name: str, shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator
    ) -> "Parameter":
        """Uniform fan-in scaled weight, bound sqrt(6 / fan_in)."""
        bound = np.sqrt(6.0 / max(fan_in, 1))
        return cls(name, Tensor(rng.uniform(-bound, bound, size=shape)), ParameterKind.WEIGHT)

    @classmethod
    def zeros(
        cls, name: str, shape: Tuple[int, ...], kind: ParameterKind = ParameterKind.BIAS
    ) -> "Parameter":
        return cls(name, Tensor(np.zeros(shape)), kind)

    @classmethod
    def ones(
        cls, name: str, shape: Tuple[int, ...], kind: ParameterKind = ParameterKind.NORM
    ) -> "Parameter":
        return cls(name, Tensor(np.ones(shape)), kind)


class TapeEntry(NamedTuple):
    """
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn
    """

    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Executed primitives reachable from a root tensor, in execution order."""

    def __init__(self, entries: List[TapeEntry]):
        self.entries = entries

    @classmethod
    def record_from(cls, root: Tensor) -> "Tape":
        seen = set()
        found: List[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda node: node._seq)
        entries = [TapeEntry(node, node._parents, node._backward) for node in found]
        return cls(entries)  # type: ignore[arg-type]

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        """Run every backward closure in reverse execution order starting from ``seed``."""
        pending: Dict[int, np.ndarray] = {id(root): seed}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            for parent, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = grad.copy() if parent.grad is None else parent.grad + grad
                    continue
                key = id(parent)
                pending[key] = pending[key] + grad if key in pending else grad


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every leaf tensor reachable from a scalar ``loss``.

    Gradients accumulate into existing ``grad`` arrays, so callers zero them between steps.

    Args:
        loss: Single-element tensor produced by recorded primitives

    Returns:
        The tape that was replayed

    Raises:
        ContractError: If ``loss`` holds more than one element
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    tape = Tape.record_from(loss)
    if loss.is_leaf and loss.requires_grad:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return tape
    logger.debug("Replaying tape", extra={"entries": len(tape)})
    tape.replay(loss, seed)
    return tape


def numerical_gradient(
    fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` with respect to ``tensor``.

    ``tensor.data`` is perturbed in place one element at a time and restored afterwards.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


# Elementwise arithmetic ---------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), _backward)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, "broadcast", a.shape, b.shape) from None


def abs(x: Tensor) -> Tensor:  # noqa: A001
    def _backward(g: np.ndarray):
        return (g * np.sign(x.data),)

    return _record(np.abs(x.data), (x,), _backward)


def square(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (2.0 * x.data * g,)

    return _record(x.data * x.data, (x,), _backward)


def log(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (g / x.data,)

    return _record(np.log(x.data), (x,), _backward)


def relu(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (g * (x.data > 0),)

    return _record(np.maximum(x.data, 0.0), (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split on sign so neither branch overflows.
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def _backward(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), _backward)


# Reductions and reshapes --------------------------------------------------------------------


Axis = Union[None, int, Tuple[int, ...]]


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _backward)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def _backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _record(x.data.reshape(shape), (x,), _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax along ``axis`` (max-subtraction).

    Raises:
        DimensionError: If the axis is out of range or has zero length
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError("softmax", f"axis {axis}", f"< {x.ndim}", axis)
    if x.shape[axis] == 0:
        raise DimensionError("softmax", f"axis {axis}", "length >= 1", 0)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g: np.ndarray):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (x,), _backward)


# Linear maps --------------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None, op: str = "linear") -> Tensor:
    """``x[..., :] @ w + b`` over the trailing (channel) axis."""
    if w.ndim != 2:
        raise DimensionError(op, "weight rank", 2, w.ndim)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(op, "input channels", w.shape[0], x.shape[-1])
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(op, "output channels", (w.shape[1],), b.shape)
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    lead = tuple(range(x.ndim - 1))

    def _backward(g: np.ndarray):
        dx = g @ w.data.T
        dw = np.tensordot(x.data, g, axes=(lead, lead))
        db = None if b is None else g.sum(axis=lead)
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, _backward)  # type: ignore[arg-type]


def pointwise_conv(x: FeatureMap, w: Tensor, b: Optional[Tensor] = None) -> FeatureMap:
    """1x1 convolution: a per-position linear map over channels of an ``H x W x C`` map."""
    if x.ndim < 3:
        raise DimensionError("pointwise_conv", "rank", ">= 3 (H, W, C)", x.ndim)
    return linear(x, w, b, op="pointwise_conv")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("dense", "rank", "2 (batch, features)", x.ndim)
    return linear(x, w, b, op="dense")


def conv3x3(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1, same-padded 3x3 convolution of an ``N x H x W x C`` batch.

    ``w`` has shape ``3 x 3 x C_in x C_out``.
    """
    if x.ndim != 4:
        raise DimensionError("conv3x3", "rank", "4 (N, H, W, C)", x.ndim)
    if w.shape[:2] != (3, 3):
        raise DimensionError("conv3x3", "kernel", (3, 3), w.shape[:2])
    if x.shape[-1] != w.shape[2]:
        raise DimensionError("conv3x3", "input channels", w.shape[2], x.shape[-1])
    if b is not None and b.shape != (w.shape[3],):
        raise DimensionError("conv3x3", "output channels", (w.shape[3],), b.shape)
    _, height, width, _ = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # N, H, W, C, 3, 3
    out = np.einsum("nhwcij,ijco->nhwo", windows, w.data, optimize=True)
    if b is not None:
        out = out + b.data

    def _backward(g: np.ndarray):
        dw = np.einsum("nhwcij,nhwo->ijco", windows, g, optimize=True)
        dpad = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                dpad[:, i : i + height, j : j + width, :] += g @ w.data[i, j].T
        dx = dpad[:, 1:-1, 1:-1, :]
        db = None if b is None else g.sum(axis=(0, 1, 2))
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, _backward)  # type: ignore[arg-type]


def avg_pool2(x: Tensor) -> Tensor:
    """2x spatial downsample of ``N x H x W x C`` by 2x2 averaging.

    Odd spatial sizes are zero-padded on the bottom/right first.
    """
    if x.ndim != 4:
        raise DimensionError("avg_pool2", "rank", "4 (N, H, W, C)", x.ndim)
    n, height, width, channels = x.shape
    pad_h, pad_w = height % 2, width % 2
    padded = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    out_h, out_w = padded.shape[1] // 2, padded.shape[2] // 2
    out = padded.reshape(n, out_h, 2, out_w, 2, channels).mean(axis=(2, 4))

    def _backward(g: np.ndarray):
        spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (spread[:, :height, :width, :],)

    return _record(out, (x,), _backward)


# Normalization and regularization ---------------------------------------------------------


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the trailing channel axis, then apply the learnable affine map.

    Zero-variance input normalizes to zeros (``var + eps`` in the denominator).
    """
    channels = x.shape[-1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise DimensionError("layer_norm", "channels", (channels,), (scale.shape, shift.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * scale.data + shift.data
    lead = tuple(range(x.ndim - 1))

    def _backward(g: np.ndarray):
        dxhat = g * scale.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, scale, shift), _backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.99, eps: float = BN_EPS) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(
    x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Normalize every channel over all non-channel axes.

    In training mode batch statistics are used and folded into ``state`` with
    ``running = momentum * running + (1 - momentum) * batch``; in eval mode the running
    statistics are used and ``state`` is untouched.
    """
    channels = x.shape[-1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise DimensionError("batch_norm", "channels", (channels,), (scale.shape, shift.shape))
    lead = tuple(range(x.ndim - 1))

    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv_std

        def _eval_backward(g: np.ndarray):
            return g * scale.data * inv_std, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return _record(xhat * scale.data + shift.data, (x, scale, shift), _eval_backward)

    mu = x.data.mean(axis=lead)
    centered = x.data - mu
    var = (centered * centered).mean(axis=lead)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mu
    state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var

    def _backward(g: np.ndarray):
        dxhat = g * scale.data
        dx = inv_std * (
            dxhat - dxhat.mean(axis=lead) - xhat * (dxhat * xhat).mean(axis=lead)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * scale.data + shift.data, (x, scale, shift), _backward)


def dropout(
    x: Tensor,
    rate: float,
    rng: Optional[np.random.Generator],
    training: bool,
    keep_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` at train time.

    Eval mode (or ``rate == 0``) is the identity and never draws from ``rng``. A caller can
    inject ``keep_mask`` to make a train-mode pass deterministic.
    """
    if not training or rate == 0.0:
        return x
    if keep_mask is None:
        if rng is None:
            raise ContractError("dropout in training mode needs a random generator")
        keep_mask = rng.random(x.shape) >= rate
    elif keep_mask.shape != x.shape:
        raise DimensionError("dropout", "mask", x.shape, keep_mask.shape)
    factor = keep_mask.astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(factor))


# Feature-map helpers ------------------------------------------------------------------------


def broadcast_add_channel(fmap: FeatureMap, vec: Tensor) -> FeatureMap:
    """Add a length-D vector (or ``N x D`` batch of vectors) to every spatial position."""
    if fmap.ndim < 3:
        raise DimensionError("broadcast_add_channel", "rank", ">= 3 (H, W, D)", fmap.ndim)
    if vec.shape[-1] != fmap.shape[-1]:
        raise DimensionError("broadcast_add_channel", "depth", fmap.shape[-1], vec.shape[-1])
    if vec.shape[:-1] != fmap.shape[:-3]:
        raise DimensionError("broadcast_add_channel", "batch", fmap.shape[:-3], vec.shape[:-1])
    expanded = vec.data[..., None, None, :]

    def _backward(g: np.ndarray):
        return g, g.sum(axis=(-3, -2))

    return _record(fmap.data + expanded, (fmap, vec), _backward)


def weighted_spatial_sum(weights: Tensor, fmap: FeatureMap) -> Tensor:
    """Contract an ``H x W x 1`` weight map against an ``H x W x D`` map into a D-vector."""
    if fmap.ndim < 3:
        raise DimensionError("weighted_spatial_sum", "rank", ">= 3 (H, W, D)", fmap.ndim)
    if weights.shape != fmap.shape[:-1] + (1,):
        raise DimensionError(
            "weighted_spatial_sum", "spatial", fmap.shape[:-1] + (1,), weights.shape
        )
    out = (weights.data * fmap.data).sum(axis=(-3, -2))

    def _backward(g: np.ndarray):
        spread = g[..., None, None, :]
        dw = (spread * fmap.data).sum(axis=-1, keepdims=True)
        return dw, weights.data * spread

    return _record(out, (weights, fmap), _backward)


def global_avg_pool(fmap: FeatureMap) -> Tensor:
    """Spatial mean of an ``H x W x D`` map (batched or not)."""
    return mean(fmap, axis=(-3, -2))
