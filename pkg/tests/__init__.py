"""Shared helpers: small model configurations and loop-based reference implementations."""

import math
from typing import Callable, List, Tuple

import numpy as np

from contextgate.attention import GcgConfig, NormOrder
from contextgate.data import Dataset
from contextgate.model import ModelConfig
from contextgate.tensor import Tensor


def tiny_model_config(**overrides) -> ModelConfig:
    """16x16x3 input, D=8 features on a 4x4 grid, head [8, 4], 3 classes, no dropout."""
    values = dict(
        input_size=(16, 16, 3),
        backbone_channels=[4, 8],
        feature_depth=8,
        head_widths=[8, 4],
        dropout_rate=0.0,
        num_classes=3,
        gcg=GcgConfig(reduction=2),
    )
    values.update(overrides)
    return ModelConfig(**values)


def random_dataset(n: int, config: ModelConfig, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % config.num_classes
    images = rng.uniform(0.0, 1.0, size=(n,) + tuple(config.input_size))
    return Dataset(images, labels.astype(np.int64), config.num_classes)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradient_check(loss_fn: Callable[[], Tensor], tensors: List[Tensor], h: float = 1e-5):
    """Yield ``(tensor, analytic, numeric)`` for each tensor after one backward pass."""
    from contextgate.tensor import backward, numerical_gradient

    for tensor in tensors:
        tensor.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for tensor, grad in zip(tensors, analytic):
        yield tensor, grad, numerical_gradient(loss_fn, tensor, h)


# Reference implementations written as explicit loops --------------------------------------


def loop_context_formulation(R: np.ndarray, w_c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    height, width, depth = R.shape
    scores = [
        [sum(R[h, w, d] * w_c[d, 0] for d in range(depth)) for w in range(width)]
        for h in range(height)
    ]
    peak = max(max(row) for row in scores)
    exps = [[math.exp(s - peak) for s in row] for row in scores]
    total = sum(sum(row) for row in exps)
    attention = np.array([[e / total for e in row] for row in exps])
    context = np.array(
        [
            sum(attention[h, w] * R[h, w, d] for h in range(height) for w in range(width))
            for d in range(depth)
        ]
    )
    return attention, context


def _loop_layer_norm(
    x: List[float], scale: np.ndarray, shift: np.ndarray, eps: float
) -> List[float]:
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * scale[i] + shift[i] for i, v in enumerate(x)]


def loop_channel_correlation(
    context: np.ndarray,
    w_t1: np.ndarray,
    w_t2: np.ndarray,
    ln_scale: np.ndarray,
    ln_shift: np.ndarray,
    eps: float,
    norm_order: NormOrder = NormOrder.RELU_THEN_NORM,
) -> np.ndarray:
    depth, k = w_t1.shape
    delta = [sum(context[d] * w_t1[d, j] for d in range(depth)) for j in range(k)]
    if norm_order is NormOrder.RELU_THEN_NORM:
        theta = _loop_layer_norm([max(v, 0.0) for v in delta], ln_scale, ln_shift, eps)
    else:
        theta = [max(v, 0.0) for v in _loop_layer_norm(delta, ln_scale, ln_shift, eps)]
    return np.array([sum(theta[j] * w_t2[j, d] for j in range(k)) for d in range(depth)])


def loop_guide_fuse(R: np.ndarray, transformed: np.ndarray) -> np.ndarray:
    out = np.empty_like(R)
    height, width, depth = R.shape
    for h in range(height):
        for w in range(width):
            for d in range(depth):
                out[h, w, d] = R[h, w, d] + transformed[d]
    return out


def loop_guided_gating(
    R: np.ndarray,
    R_g: np.ndarray,
    w_x: np.ndarray,
    w_g: np.ndarray,
    b_xg: np.ndarray,
    psi: np.ndarray,
    b_psi: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    height, width, depth = R.shape
    inner, gate_out = psi.shape
    gate = np.empty((height, width, gate_out))
    out = np.empty_like(R)
    for h in range(height):
        for w in range(width):
            local = [
                max(
                    sum(R[h, w, d] * w_x[d, j] for d in range(depth))
                    + sum(R_g[h, w, d] * w_g[d, j] for d in range(depth))
                    + b_xg[j],
                    0.0,
                )
                for j in range(inner)
            ]
            for o in range(gate_out):
                z = sum(local[j] * psi[j, o] for j in range(inner)) + b_psi[o]
                gate[h, w, o] = 1.0 / (1.0 + math.exp(-z))
            for d in range(depth):
                out[h, w, d] = gate[h, w, 0 if gate_out == 1 else d] * R[h, w, d]
    return gate, out
