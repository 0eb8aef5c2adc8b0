"""
Classifier assembly: convolutional backbone, attention block, regularized head.

The backbone is a small trainable stand-in for a pretrained convolutional base: a stack of
``3x3 conv -> batch norm -> ReLU -> 2x downsample`` stages. Its output feature map goes
through the configured attention block, is bridged to a vector (global average pooling by
default, flatten on request) and classified by ``dense -> batch norm -> ReLU -> dropout``
layers followed by a softmax output layer.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator
from typing_extensions import Self

from . import tensor as T
from ._config import ConfigModel
from .attention import (
    AttentionArtifacts,
    AttentionKind,
    AttentionParams,
    GcgConfig,
    attend,
    init_attention_params,
)
from .errors import ContractError, DimensionError
from .tensor import BatchNormState, FeatureMap, Parameter, ParameterKind, Tensor

logger = logging.getLogger(__name__)


class Bridge(str, Enum):
    POOL = "pool"
    FLATTEN = "flatten"


class ModelConfig(ConfigModel):
    """Architecture hyperparameters.

    Defaults are desk-scale (64x64 input, D=128); full fundus scale (512x512 input,
    1280-channel features) is constructible by overriding ``input_size`` and
    ``backbone_channels``.

    ``bn_momentum`` sets the head normalization layers, ``backbone_bn_momentum`` the
    convolution stages.
    """

    input_size: Tuple[int, int, int] = (64, 64, 3)
    backbone_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128], min_length=1)
    feature_depth: int = Field(128, ge=1)
    attention: AttentionKind = AttentionKind.GCG
    gcg: GcgConfig = Field(default_factory=GcgConfig)
    head_widths: List[int] = Field(default_factory=lambda: [512, 256])
    dropout_rate: float = Field(0.3, ge=0.0, lt=1.0)
    num_classes: int = Field(3, ge=2)
    bridge: Bridge = Bridge.POOL
    bn_momentum: float = Field(0.99, ge=0.0, le=1.0)
    backbone_bn_momentum: float = Field(0.9, ge=0.0, le=1.0)
    bn_eps: float = Field(T.BN_EPS, gt=0.0)
    ln_eps: float = Field(T.LN_EPS, gt=0.0)

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if any(size < 1 for size in self.input_size):
            raise ValueError(f"input_size must be positive, got {self.input_size}")
        if any(width < 1 for width in self.backbone_channels + self.head_widths):
            raise ValueError("backbone_channels and head_widths must be positive")
        if self.feature_depth != self.backbone_channels[-1]:
            raise ValueError(
                f"feature_depth {self.feature_depth} must equal the last backbone stage "
                f"width {self.backbone_channels[-1]}"
            )
        height, width = self.feature_grid
        if height < 2 or width < 2:
            raise ValueError(
                f"Backbone downsamples {self.input_size[:2]} to a {height}x{width} grid; "
                "at least 2x2 is required"
            )
        return self

    @property
    def feature_grid(self) -> Tuple[int, int]:
        height, width = self.input_size[0], self.input_size[1]
        for _ in self.backbone_channels:
            height, width = math.ceil(height / 2), math.ceil(width / 2)
        return height, width

    @property
    def bridge_width(self) -> int:
        if self.bridge is Bridge.POOL:
            return self.feature_depth
        height, width = self.feature_grid
        return height * width * self.feature_depth


@dataclass
class ConvStage:
    weight: Parameter
    bn_scale: Parameter
    bn_shift: Parameter
    bn: BatchNormState


@dataclass
class DenseLayer:
    weight: Parameter
    bias: Parameter
    bn_scale: Optional[Parameter] = None
    bn_shift: Optional[Parameter] = None
    bn: Optional[BatchNormState] = None


class ModelOutput(NamedTuple):
    """
    probs: Tensor
    logits: Tensor
    artifacts: AttentionArtifacts
    """

    probs: Tensor
    logits: Tensor
    artifacts: AttentionArtifacts


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class Model:
    """A trainable classifier and its ordered parameter registry.

    A model in train mode is exclusively owned by one caller: forward passes update batch-norm
    running statistics and draw dropout masks from the model's generator. Eval mode reads only.
    """

    def __init__(
        self,
        config: ModelConfig,
        backbone: List[ConvStage],
        attention: Optional[AttentionParams],
        head: List[DenseLayer],
        rng: np.random.Generator,
    ):
        self.config = config
        self.backbone = backbone
        self.attention = attention
        self.head = head
        self.rng = rng
        self.mode = Mode.TRAIN
        names = [p.name for p in self.parameters()]
        duplicates = {name for name in names if names.count(name) > 1}
        if duplicates:
            raise ContractError(f"Duplicate parameter names: {sorted(duplicates)}")

    @property
    def training(self) -> bool:
        return self.mode is Mode.TRAIN

    def train(self) -> Self:
        self.mode = Mode.TRAIN
        return self

    def eval(self) -> Self:
        self.mode = Mode.EVAL
        return self

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for stage in self.backbone:
            params += [stage.weight, stage.bn_scale, stage.bn_shift]
        if self.attention is not None:
            params += self.attention.parameters()
        for layer in self.head:
            params += [layer.weight, layer.bias]
            if layer.bn_scale is not None and layer.bn_shift is not None:
                params += [layer.bn_scale, layer.bn_shift]
        return params

    def _bn_states(self) -> Iterator[Tuple[str, BatchNormState]]:
        for i, stage in enumerate(self.backbone):
            yield f"backbone.{i}.bn", stage.bn
        for i, layer in enumerate(self.head):
            if layer.bn is not None:
                yield f"head.{i}.bn", layer.bn

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics) by name."""
        out: Dict[str, np.ndarray] = {}
        for prefix, state in self._bn_states():
            out[f"{prefix}.running_mean"] = state.running_mean
            out[f"{prefix}.running_var"] = state.running_var
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Replace every parameter and buffer; names and shapes must match exactly."""
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise ContractError(f"State mismatch: missing {missing}, unexpected {unexpected}")
        for name, value in state.items():
            if tuple(value.shape) != tuple(expected[name].shape):
                raise DimensionError("load_state_dict", name, expected[name].shape, value.shape)
        for param in self.parameters():
            param.tensor.data = np.array(state[param.name], dtype=np.float64)
        for prefix, bn in self._bn_states():
            bn.running_mean = np.array(state[f"{prefix}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{prefix}.running_var"], dtype=np.float64)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def backbone_forward(self, images: Tensor) -> FeatureMap:
        """Map an ``N x H_img x W_img x C`` batch with values in [0, 1] to ``N x H x W x D``."""
        if images.ndim != 4 or images.shape[1:] != tuple(self.config.input_size):
            raise DimensionError(
                "backbone_forward", "image", ("N",) + tuple(self.config.input_size), images.shape
            )
        if images.data.size and (images.data.min() < 0.0 or images.data.max() > 1.0):
            raise ContractError("backbone_forward expects pixel values in [0, 1]")
        x = images
        for stage in self.backbone:
            x = T.conv3x3(x, stage.weight.tensor)
            x = T.batch_norm(
                x, stage.bn_scale.tensor, stage.bn_shift.tensor, stage.bn, self.training
            )
            x = T.avg_pool2(T.relu(x))
        return x

    def head_forward(
        self, features: Tensor, keep_masks: Optional[Sequence[np.ndarray]] = None
    ) -> Tuple[Tensor, Tensor]:
        """Classify ``N x D_flat`` features; returns ``(logits, probs)``.

        ``keep_masks`` (one boolean array per hidden layer) replaces the dropout draws.
        """
        x = features
        hidden = self.head[:-1]
        if keep_masks is not None and len(keep_masks) != len(hidden):
            raise ContractError(f"Expected {len(hidden)} dropout masks, got {len(keep_masks)}")
        for i, layer in enumerate(hidden):
            x = T.dense(x, layer.weight.tensor, layer.bias.tensor)
            scale, shift, bn = layer.bn_scale, layer.bn_shift, layer.bn
            assert scale is not None and shift is not None and bn is not None
            x = T.batch_norm(x, scale.tensor, shift.tensor, bn, self.training)
            x = T.dropout(
                T.relu(x),
                self.config.dropout_rate,
                self.rng,
                self.training,
                keep_mask=None if keep_masks is None else keep_masks[i],
            )
        out = self.head[-1]
        logits = T.dense(x, out.weight.tensor, out.bias.tensor)
        return logits, T.softmax(logits, axis=-1)

    def forward(
        self, images: Tensor, keep_masks: Optional[Sequence[np.ndarray]] = None
    ) -> ModelOutput:
        features = self.backbone_forward(images)
        artifacts = attend(self.config.attention, features, self.attention)
        if self.config.bridge is Bridge.POOL:
            bridged = T.global_avg_pool(artifacts.output)
        else:
            bridged = T.reshape(artifacts.output, (artifacts.output.shape[0], -1))
        logits, probs = self.head_forward(bridged, keep_masks)
        return ModelOutput(probs, logits, artifacts)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode class probabilities for an ``N x H x W x C`` array, batch by batch."""
        previous = self.mode
        self.eval()
        try:
            chunks = [
                self.forward(Tensor(images[start : start + batch_size])).probs.data
                for start in range(0, len(images), batch_size)
            ]
        finally:
            self.mode = previous
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.num_classes))


def model_forward(
    model: Model, image: np.ndarray
) -> Tuple[np.ndarray, Optional[AttentionArtifacts]]:
    """Classify one ``H x W x C`` image (or a batch) in the model's current mode.

    Returns:
        ``(probs, artifacts)``; artifacts are ``None`` when the attention kind produces no map
    """
    batched = image.ndim == 4
    output = model.forward(Tensor(image if batched else image[None]))
    artifacts = output.artifacts
    has_maps = artifacts.gate is not None or artifacts.spatial_map is not None
    if not batched:
        return output.probs.data[0], artifacts.select(0) if has_maps else None
    return output.probs.data, artifacts if has_maps else None


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Initialize a model deterministically from ``seed``.

    Initialization and dropout draw from independent streams spawned from the seed, so
    the same seed always yields identical initial parameters.
    """
    init_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(init_seq)

    backbone: List[ConvStage] = []
    channels_in = config.input_size[2]
    for i, channels_out in enumerate(config.backbone_channels):
        prefix = f"backbone.{i}"
        backbone.append(
            ConvStage(
                weight=Parameter.kaiming(
                    f"{prefix}.conv.weight", (3, 3, channels_in, channels_out), 9 * channels_in, rng
                ),
                bn_scale=Parameter.ones(f"{prefix}.bn.scale", (channels_out,)),
                bn_shift=Parameter.zeros(f"{prefix}.bn.shift", (channels_out,), ParameterKind.NORM),
                bn=BatchNormState.fresh(
                    channels_out, config.backbone_bn_momentum, config.bn_eps
                ),
            )
        )
        channels_in = channels_out

    attention = init_attention_params(
        config.attention, config.feature_depth, config.gcg, rng, ln_eps=config.ln_eps
    )

    head: List[DenseLayer] = []
    width_in = config.bridge_width
    for i, width in enumerate(config.head_widths):
        prefix = f"head.{i}"
        head.append(
            DenseLayer(
                weight=Parameter.kaiming(f"{prefix}.weight", (width_in, width), width_in, rng),
                bias=Parameter.zeros(f"{prefix}.bias", (width,)),
                bn_scale=Parameter.ones(f"{prefix}.bn.scale", (width,)),
                bn_shift=Parameter.zeros(f"{prefix}.bn.shift", (width,), ParameterKind.NORM),
                bn=BatchNormState.fresh(width, config.bn_momentum, config.bn_eps),
            )
        )
        width_in = width
    prefix = f"head.{len(config.head_widths)}"
    head.append(
        DenseLayer(
            weight=Parameter.kaiming(
                f"{prefix}.weight", (width_in, config.num_classes), width_in, rng
            ),
            bias=Parameter.zeros(f"{prefix}.bias", (config.num_classes,)),
        )
    )

    model = Model(config, backbone, attention, head, np.random.default_rng(dropout_seq))
    logger.debug(
        "Built model",
        extra={
            "attention": config.attention.value,
            "parameters": sum(p.data.size for p in model.parameters()),
            "seed": seed,
        },
    )
    return model
