"""
Guided Context Gating and the baseline attention blocks it is compared against.

A GCG block runs three stages over a feature map ``R`` (``H x W x D``, optionally batched):

1. Context formulation: a 1x1 convolution scores every position, a softmax over all ``H*W``
   positions turns the scores into a spatial attention map, and the map pools ``R`` into a
   single context vector.
2. Channel correlation: a bottleneck (1x1 conv to ``k`` channels, ReLU, LayerNorm, 1x1 conv
   back to ``D``) transforms the context vector; the result is added to every position of
   ``R`` to form the guiding signal ``R_g``.
3. Guided gating: an additive attention gate over ``R`` and ``R_g`` yields a sigmoid
   coefficient per position that rescales ``R``.

The baselines are deliberately small representatives of each family (spatial gate,
squeeze-excitation, global context, plain gating) sharing the same building blocks, so a
comparison run varies only the attention mechanism.
"""

import logging
import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import Field

from . import tensor as T
from ._config import ConfigModel
from .errors import ConfigurationError, DimensionError
from .tensor import FeatureMap, Parameter, Tensor

logger = logging.getLogger(__name__)


class AttentionKind(str, Enum):
    NONE = "none"
    SPATIAL = "spatial"
    CHANNEL_SE = "channel_se"
    GLOBAL_CONTEXT = "global_context"
    GATED = "gated"
    GCG = "gcg"

    @classmethod
    def parse(cls, value: Union[str, "AttentionKind"]) -> "AttentionKind":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(kind.value for kind in cls)
            raise ConfigurationError(
                f"Unknown attention kind '{value}', expected one of: {choices}"
            ) from None


BASELINE_KINDS = (
    AttentionKind.NONE,
    AttentionKind.SPATIAL,
    AttentionKind.CHANNEL_SE,
    AttentionKind.GLOBAL_CONTEXT,
    AttentionKind.GATED,
)


class NormOrder(str, Enum):
    RELU_THEN_NORM = "relu_then_norm"
    NORM_THEN_RELU = "norm_then_relu"


class GcgConfig(ConfigModel):
    """Width and ordering choices of the GCG block."""

    reduction: int = Field(4, ge=1, description="Bottleneck width k = ceil(D / reduction)")
    intermediate_channels: Optional[int] = Field(
        None, ge=1, description="Gating width D_int; defaults to D / 2"
    )
    norm_order: NormOrder = Field(
        NormOrder.RELU_THEN_NORM, description="Order of ReLU and LayerNorm in the bottleneck"
    )
    per_channel_gate: bool = Field(
        False, description="One gate coefficient per channel instead of per position"
    )

    def bottleneck_width(self, depth: int) -> int:
        return max(1, math.ceil(depth / self.reduction))

    def gate_width(self, depth: int) -> int:
        return self.intermediate_channels or max(1, depth // 2)


class _ParameterGroup:
    def parameters(self) -> List[Parameter]:
        return [
            getattr(self, f.name)
            for f in fields(self)  # type: ignore[arg-type]
            if isinstance(getattr(self, f.name), Parameter)
        ]


@dataclass
class GatingParams(_ParameterGroup):
    """Additive gate: ``sigmoid(psi . ReLU(W_x r + W_g g + b_xg) + b_psi)``."""

    w_x: Parameter
    w_g: Parameter
    b_xg: Parameter
    psi: Parameter
    b_psi: Parameter

    @property
    def depth(self) -> int:
        return self.w_x.shape[0]


@dataclass
class GlobalContextParams(_ParameterGroup):
    """Context pooling conv plus the channel-correlation bottleneck."""

    w_c: Parameter
    w_t1: Parameter
    w_t2: Parameter
    ln_scale: Parameter
    ln_shift: Parameter
    norm_order: NormOrder = NormOrder.RELU_THEN_NORM
    ln_eps: float = T.LN_EPS

    @property
    def depth(self) -> int:
        return self.w_c.shape[0]


@dataclass
class GcgParams(GlobalContextParams, GatingParams):
    """Every learnable tensor of a Guided Context Gating block."""


@dataclass
class SpatialParams(_ParameterGroup):
    w: Parameter
    b: Parameter


@dataclass
class ChannelSEParams(_ParameterGroup):
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


AttentionParams = Union[
    GcgParams, GlobalContextParams, GatingParams, SpatialParams, ChannelSEParams
]


@dataclass
class AttentionArtifacts:
    """Everything an attention block computed, kept for explainability export.

    For GCG all fields are populated. Baselines fill in what they have: spatial and gated
    blocks carry a ``gate``, the global context block carries ``spatial_map``/``context``.
    """

    kind: AttentionKind
    output: FeatureMap
    gate: Optional[Tensor] = None
    spatial_map: Optional[Tensor] = None
    context: Optional[Tensor] = None
    transformed_context: Optional[Tensor] = None

    def select(self, index: int) -> "AttentionArtifacts":
        """Detached artifacts of one element of a batched forward pass."""

        def pick(value: Optional[Tensor]) -> Optional[Tensor]:
            return None if value is None else Tensor(value.data[index])

        return AttentionArtifacts(
            kind=self.kind,
            output=Tensor(self.output.data[index]),
            gate=pick(self.gate),
            spatial_map=pick(self.spatial_map),
            context=pick(self.context),
            transformed_context=pick(self.transformed_context),
        )


def _check_depth(op: str, fmap: FeatureMap, depth: int) -> None:
    if fmap.ndim < 3:
        raise DimensionError(op, "rank", ">= 3 (H, W, D)", fmap.ndim)
    if fmap.shape[-1] != depth:
        raise DimensionError(op, "depth", depth, fmap.shape[-1])


def context_formulation(R: FeatureMap, p: GlobalContextParams) -> Tuple[Tensor, Tensor]:
    """Global attention pooling.

    Args:
        R: Feature map ``(..., H, W, D)``
        p: Parameters holding the ``D x 1`` scoring convolution ``w_c``

    Returns:
        ``(spatial_map, context)`` with shapes ``(..., H, W)`` and ``(..., D)``; the map is a
        softmax over all ``H*W`` positions

    Raises:
        DimensionError: If the depth of ``R`` does not match ``p``
    """
    _check_depth("context_formulation", R, p.depth)
    *lead, height, width, _ = R.shape
    scores = T.pointwise_conv(R, p.w_c.tensor)
    flat = T.reshape(scores, tuple(lead) + (height * width,))
    weights = T.reshape(T.softmax(flat, axis=-1), tuple(lead) + (height, width, 1))
    context = T.weighted_spatial_sum(weights, R)
    spatial_map = T.reshape(weights, tuple(lead) + (height, width))
    return spatial_map, context


def channel_correlation(context: Tensor, p: GlobalContextParams) -> Tensor:
    """Bottleneck transform of the context vector: ``W_t2^T LN(ReLU(W_t1^T c))``.

    ``p.norm_order`` swaps ReLU and LayerNorm for the variant common in global context blocks.
    """
    if context.shape[-1] != p.depth:
        raise DimensionError("channel_correlation", "depth", p.depth, context.shape[-1])
    delta = T.linear(context, p.w_t1.tensor, op="channel_correlation")
    if p.norm_order is NormOrder.RELU_THEN_NORM:
        theta = T.layer_norm(T.relu(delta), p.ln_scale.tensor, p.ln_shift.tensor, p.ln_eps)
    else:
        theta = T.relu(T.layer_norm(delta, p.ln_scale.tensor, p.ln_shift.tensor, p.ln_eps))
    return T.linear(theta, p.w_t2.tensor, op="channel_correlation")


def guide_fuse(R: FeatureMap, transformed_context: Tensor) -> FeatureMap:
    """``R_g = R + transformed_context`` broadcast over every spatial position."""
    return T.broadcast_add_channel(R, transformed_context)


def guided_gating(R: FeatureMap, R_g: FeatureMap, p: GatingParams) -> Tuple[Tensor, FeatureMap]:
    """Additive attention gate driven by the guiding signal.

    Returns:
        ``(gate, output)``; ``gate`` is ``(..., H, W, 1)`` (or ``(..., H, W, D)`` with a
        per-channel ``psi``) and ``output = gate * R``
    """
    if R.shape != R_g.shape:
        raise DimensionError("guided_gating", "guide", R.shape, R_g.shape)
    _check_depth("guided_gating", R, p.depth)
    local = T.relu(
        T.add(
            T.linear(R, p.w_x.tensor, op="guided_gating"),
            T.linear(R_g, p.w_g.tensor, p.b_xg.tensor, op="guided_gating"),
        )
    )
    gate = T.sigmoid(T.linear(local, p.psi.tensor, p.b_psi.tensor, op="guided_gating"))
    return gate, T.mul(gate, R)


def gcg_forward(R: FeatureMap, p: GcgParams) -> AttentionArtifacts:
    spatial_map, context = context_formulation(R, p)
    transformed = channel_correlation(context, p)
    gate, output = guided_gating(R, guide_fuse(R, transformed), p)
    return AttentionArtifacts(
        kind=AttentionKind.GCG,
        output=output,
        gate=gate,
        spatial_map=spatial_map,
        context=context,
        transformed_context=transformed,
    )


def _spatial_forward(R: FeatureMap, p: SpatialParams) -> AttentionArtifacts:
    _check_depth("spatial", R, p.w.shape[0])
    gate = T.sigmoid(T.pointwise_conv(R, p.w.tensor, p.b.tensor))
    return AttentionArtifacts(AttentionKind.SPATIAL, output=T.mul(gate, R), gate=gate)


def _channel_se_forward(R: FeatureMap, p: ChannelSEParams) -> AttentionArtifacts:
    _check_depth("channel_se", R, p.w1.shape[0])
    squeezed = T.global_avg_pool(R)
    hidden = T.relu(T.linear(squeezed, p.w1.tensor, p.b1.tensor, op="channel_se"))
    scale = T.sigmoid(T.linear(hidden, p.w2.tensor, p.b2.tensor, op="channel_se"))
    scale = T.reshape(scale, scale.shape[:-1] + (1, 1, scale.shape[-1]))
    return AttentionArtifacts(AttentionKind.CHANNEL_SE, output=T.mul(scale, R))


def _global_context_forward(R: FeatureMap, p: GlobalContextParams) -> AttentionArtifacts:
    spatial_map, context = context_formulation(R, p)
    transformed = channel_correlation(context, p)
    return AttentionArtifacts(
        AttentionKind.GLOBAL_CONTEXT,
        output=guide_fuse(R, transformed),
        spatial_map=spatial_map,
        context=context,
        transformed_context=transformed,
    )


def _gated_forward(R: FeatureMap, p: GatingParams) -> AttentionArtifacts:
    gate, output = guided_gating(R, R, p)
    return AttentionArtifacts(AttentionKind.GATED, output=output, gate=gate)


def attend(
    kind: Union[str, AttentionKind], R: FeatureMap, params: Optional[AttentionParams]
) -> AttentionArtifacts:
    """Run the attention block of ``kind`` and return its artifacts.

    Raises:
        ConfigurationError: If ``kind`` is unknown or ``params`` has the wrong type
    """
    kind = AttentionKind.parse(kind)
    if kind is AttentionKind.NONE:
        return AttentionArtifacts(kind, output=R)
    expected = _PARAM_TYPES[kind]
    if type(params) is not expected:
        raise ConfigurationError(
            f"Attention kind '{kind.value}' needs {expected.__name__}, got {type(params).__name__}"
        )
    if kind is AttentionKind.GCG:
        return gcg_forward(R, params)  # type: ignore[arg-type]
    if kind is AttentionKind.SPATIAL:
        return _spatial_forward(R, params)  # type: ignore[arg-type]
    if kind is AttentionKind.CHANNEL_SE:
        return _channel_se_forward(R, params)  # type: ignore[arg-type]
    if kind is AttentionKind.GLOBAL_CONTEXT:
        return _global_context_forward(R, params)  # type: ignore[arg-type]
    return _gated_forward(R, params)  # type: ignore[arg-type]


def baseline_forward(
    R: FeatureMap, kind: Union[str, AttentionKind], params: Optional[AttentionParams] = None
) -> FeatureMap:
    """Apply one of the comparison blocks (``none``, ``spatial``, ``channel_se``,
    ``global_context``, ``gated``) and return the attended map, same shape as ``R``."""
    kind = AttentionKind.parse(kind)
    if kind not in BASELINE_KINDS:
        raise ConfigurationError(f"'{kind.value}' is not a baseline attention kind")
    return attend(kind, R, params).output


_PARAM_TYPES = {
    AttentionKind.GCG: GcgParams,
    AttentionKind.SPATIAL: SpatialParams,
    AttentionKind.CHANNEL_SE: ChannelSEParams,
    AttentionKind.GLOBAL_CONTEXT: GlobalContextParams,
    AttentionKind.GATED: GatingParams,
}


def _context_fields(prefix: str, depth: int, config: GcgConfig, rng: np.random.Generator) -> dict:
    k = config.bottleneck_width(depth)
    return {
        "w_c": Parameter.kaiming(f"{prefix}.w_c", (depth, 1), depth, rng),
        "w_t1": Parameter.kaiming(f"{prefix}.w_t1", (depth, k), depth, rng),
        "w_t2": Parameter.kaiming(f"{prefix}.w_t2", (k, depth), k, rng),
        "ln_scale": Parameter.ones(f"{prefix}.ln_scale", (k,)),
        "ln_shift": Parameter.zeros(f"{prefix}.ln_shift", (k,), T.ParameterKind.NORM),
    }


def _gating_fields(prefix: str, depth: int, config: GcgConfig, rng: np.random.Generator) -> dict:
    width = config.gate_width(depth)
    gate_out = depth if config.per_channel_gate else 1
    return {
        "w_x": Parameter.kaiming(f"{prefix}.w_x", (depth, width), depth, rng),
        "w_g": Parameter.kaiming(f"{prefix}.w_g", (depth, width), depth, rng),
        "b_xg": Parameter.zeros(f"{prefix}.b_xg", (width,)),
        "psi": Parameter.kaiming(f"{prefix}.psi", (width, gate_out), width, rng),
        "b_psi": Parameter.zeros(f"{prefix}.b_psi", (gate_out,)),
    }


def init_attention_params(
    kind: Union[str, AttentionKind],
    depth: int,
    config: GcgConfig,
    rng: np.random.Generator,
    prefix: str = "attention",
    ln_eps: float = T.LN_EPS,
) -> Optional[AttentionParams]:
    """Create the parameter set of one attention block.

    Weights are Kaiming-uniform, biases zero, LayerNorm affine ones/zeros. ``none`` has no
    parameters and returns ``None``.
    """
    kind = AttentionKind.parse(kind)
    if kind is AttentionKind.NONE:
        return None
    if kind is AttentionKind.SPATIAL:
        return SpatialParams(
            w=Parameter.kaiming(f"{prefix}.w", (depth, 1), depth, rng),
            b=Parameter.zeros(f"{prefix}.b", (1,)),
        )
    if kind is AttentionKind.CHANNEL_SE:
        k = config.bottleneck_width(depth)
        return ChannelSEParams(
            w1=Parameter.kaiming(f"{prefix}.w1", (depth, k), depth, rng),
            b1=Parameter.zeros(f"{prefix}.b1", (k,)),
            w2=Parameter.kaiming(f"{prefix}.w2", (k, depth), k, rng),
            b2=Parameter.zeros(f"{prefix}.b2", (depth,)),
        )
    if kind is AttentionKind.GATED:
        return GatingParams(**_gating_fields(prefix, depth, config, rng))
    context = _context_fields(prefix, depth, config, rng)
    if kind is AttentionKind.GLOBAL_CONTEXT:
        return GlobalContextParams(**context, norm_order=config.norm_order, ln_eps=ln_eps)
    return GcgParams(
        **context,
        **_gating_fields(prefix, depth, config, rng),
        norm_order=config.norm_order,
        ln_eps=ln_eps,
    )
