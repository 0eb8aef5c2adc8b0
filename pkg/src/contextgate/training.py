"""
Loss, regularization, RMSProp with Gradient Centralization, and the hold-out training loop.
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field

from . import tensor as T
from ._config import ConfigModel
from .checkpoint import save_checkpoint
from .data import Dataset, stratified_holdout
from .errors import ConfigurationError, ContractError, DimensionError, NumericalError
from .model import Model, ModelConfig
from .tensor import Parameter, ParameterKind, Tensor

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
GC_EPS = 1e-8
CHECKPOINT_NAME = "best.ckpt"
LOG_NAME = "train_log.jsonl"


class Regularizer(str, Enum):
    NONE = "none"
    L1 = "l1"
    L2 = "l2"
    L1L2 = "l1l2"


class GcMode(str, Enum):
    OFF = "off"
    ZERO_MEAN = "zero_mean"
    ZSCORE = "zscore"


class ClassWeighting(str, Enum):
    NONE = "none"
    INVERSE_FREQUENCY = "inverse_frequency"


class TrainConfig(ConfigModel):
    """Optimization hyperparameters; defaults suit fundus grading runs."""

    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(100, ge=1)
    weight_reg: Regularizer = Regularizer.L2
    weight_reg_coeff: float = Field(0.005, ge=0.0)
    bias_reg: Regularizer = Regularizer.L1L2
    bias_reg_coeff: float = Field(0.005, ge=0.0)
    rmsprop_rho: float = Field(0.9, ge=0.0, lt=1.0)
    rmsprop_eps: float = Field(1e-7, gt=0.0)
    gc_mode: GcMode = GcMode.ZERO_MEAN
    seed: int = Field(0, ge=0, lt=2**64)
    holdout_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    class_weighting: ClassWeighting = ClassWeighting.NONE


class ExperimentConfig(ConfigModel):
    """Everything ``contextgate train`` needs besides data: ``{"model": ..., "train": ...}``."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


# Objective ----------------------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def class_weights(
    labels: np.ndarray, num_classes: int, weighting: ClassWeighting
) -> Optional[np.ndarray]:
    """Inverse-frequency weights ``N / (C * n_c)``; classes without samples get weight 0."""
    if weighting is ClassWeighting.NONE:
        return None
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(num_classes)
    weights[present] = counts.sum() / (present.sum() * counts[present])
    return weights


def cross_entropy_loss(
    probs: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tensor:
    """Mean over the batch of ``-sum(targets * log(probs + 1e-12))``.

    Args:
        probs: ``N x C`` class probabilities
        targets: ``N x C`` one-hot rows
        weights: Optional per-class weights multiplying each sample's term

    Raises:
        ContractError: If a target row is not one-hot
        DimensionError: If shapes disagree
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise DimensionError("cross_entropy_loss", "targets", probs.shape, targets.shape)
    if not (np.isin(targets, (0.0, 1.0)).all() and (targets.sum(axis=-1) == 1.0).all()):
        raise ContractError("cross_entropy_loss targets must be one-hot rows")
    scaled = targets if weights is None else targets * np.asarray(weights)
    log_probs = T.log(T.add(probs, LOG_EPS))
    return T.mul(T.sum(T.mul(log_probs, Tensor(scaled))), -1.0 / probs.shape[0])


def _penalty(param: Parameter, kind: Regularizer, coeff: float) -> Optional[Tensor]:
    if kind is Regularizer.NONE or coeff == 0.0:
        return None
    terms = []
    if kind in (Regularizer.L1, Regularizer.L1L2):
        terms.append(T.sum(T.abs(param.tensor)))
    if kind in (Regularizer.L2, Regularizer.L1L2):
        terms.append(T.sum(T.square(param.tensor)))
    total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return T.mul(total, coeff)


def regularization_penalty(
    model: Union[Model, Sequence[Parameter]], config: TrainConfig
) -> Tensor:
    """Weight and bias penalties as a differentiable scalar.

    Weights take ``weight_reg``, biases ``bias_reg`` (``l1l2`` adds both norms under one
    coefficient). Normalization affine parameters are not penalized.
    """
    params = model.parameters() if isinstance(model, Model) else list(model)
    total: Tensor = Tensor(np.zeros(()))
    for param in params:
        if param.kind is ParameterKind.WEIGHT:
            term = _penalty(param, config.weight_reg, config.weight_reg_coeff)
        elif param.kind is ParameterKind.BIAS:
            term = _penalty(param, config.bias_reg, config.bias_reg_coeff)
        else:
            term = None
        if term is not None:
            total = T.add(total, term)
    return total


def gradient_centralize(
    grad: Union[np.ndarray, Tensor], mode: Union[str, GcMode]
) -> Union[np.ndarray, Tensor]:
    """Center (``zero_mean``) or standardize (``zscore``) each output slice of a gradient.

    Slice statistics run over every axis except the last (output) axis. Rank < 2 gradients
    and ``off`` mode pass through unchanged.
    """
    mode = GcMode(mode)
    values = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if mode is GcMode.OFF or values.ndim < 2:
        return grad
    axes = tuple(range(values.ndim - 1))
    centered = values - values.mean(axis=axes, keepdims=True)
    if mode is GcMode.ZSCORE:
        centered = centered / (values.std(axis=axes, keepdims=True) + GC_EPS)
    return Tensor(centered) if isinstance(grad, Tensor) else centered


# Optimizer ----------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Uncentered RMSProp accumulators keyed by parameter name."""

    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def rmsprop_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> OptimizerState:
    """Apply one RMSProp update in place.

    ``acc = rho * acc + (1 - rho) * g**2`` then ``theta -= lr * g / (sqrt(acc) + eps)``.
    Every gradient is checked before any parameter moves, so a failed step leaves the model
    and the accumulators untouched.

    Raises:
        NumericalError: If any gradient holds NaN or Inf; names the first offending parameter
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        if not np.all(np.isfinite(grad)):
            raise NumericalError(
                f"Non-finite gradient at optimizer step {state.step + 1}", parameter=param.name
            )

    rho, lr, eps = config.rmsprop_rho, config.learning_rate, config.rmsprop_eps
    for param, grad in zip(params, grads):
        acc = state.accumulators.get(param.name)
        if acc is None:
            acc = np.zeros_like(param.data)
        acc = rho * acc + (1.0 - rho) * grad * grad
        state.accumulators[param.name] = acc
        param.tensor.data = param.data - lr * grad / (np.sqrt(acc) + eps)
    state.step += 1
    return state


# Training loop ------------------------------------------------------------------------------


class EpochRecord(NamedTuple):
    """
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    timestamp: str
    """

    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    timestamp: str


def _record_line(record: EpochRecord) -> str:
    return json.dumps(record._asdict(), sort_keys=True) + "\n"


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_accuracy: float = float("-inf")
    checkpoint_path: Optional[Path] = None

    def append(self, record: EpochRecord) -> bool:
        """Add an epoch; returns True when its validation accuracy is a strict improvement."""
        self.records.append(record)
        if record.val_accuracy > self.best_val_accuracy:
            self.best_val_accuracy = record.val_accuracy
            self.best_epoch = record.epoch
            return True
        return False

    def to_jsonl(self) -> str:
        return "".join(_record_line(record) for record in self.records)

    @classmethod
    def read(cls, path: Union[str, Path]) -> "TrainingLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.append(EpochRecord(**json.loads(line)))
        return log


def evaluate_loss(model: Model, dataset: Dataset, batch_size: int) -> Tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy of ``model`` on ``dataset``."""
    probs = model.predict(dataset.images, batch_size)
    targets = dataset.one_hot()
    loss = float(-np.mean(np.sum(targets * np.log(probs + LOG_EPS), axis=-1)))
    accuracy = float(np.mean(np.argmax(probs, axis=-1) == dataset.labels))
    return loss, accuracy


def _train_epoch(
    model: Model,
    train: Dataset,
    config: TrainConfig,
    state: OptimizerState,
    order: np.ndarray,
    weights: Optional[np.ndarray],
) -> float:
    model.train()
    params = model.parameters()
    total = 0.0
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        model.zero_grad()
        output = model.forward(Tensor(train.images[batch]))
        targets = one_hot(train.labels[batch], train.num_classes)
        data_loss = cross_entropy_loss(output.probs, targets, weights)
        T.backward(T.add(data_loss, regularization_penalty(params, config)))
        grads = []
        for param in params:
            grad = np.zeros_like(param.data) if param.grad is None else param.grad
            if param.kind is ParameterKind.WEIGHT:
                grad = gradient_centralize(grad, config.gc_mode)
            grads.append(grad)
        rmsprop_step(params, grads, state, config)
        total += data_loss.item() * len(batch)
        logger.debug("Batch done", extra={"step": state.step, "loss": data_loss.item()})
    return total / len(order)


def fit(
    model: Model,
    train: Dataset,
    val: Optional[Dataset],
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    restore_best: bool = False,
) -> TrainingLog:
    """Train ``model`` with seeded mini-batches and hold-out checkpointing.

    When ``val`` is missing or empty, ``holdout_fraction`` of every class is held out of
    ``train``. After each epoch the model is evaluated on the hold-out set; whenever the
    validation accuracy strictly improves, the model is saved to ``out_dir/best.ckpt``.
    The per-epoch log goes to ``out_dir/train_log.jsonl``.

    Raises:
        ConfigurationError: If the training (or hold-out) set is empty
        NumericalError: If a gradient becomes non-finite
    """
    if len(train) == 0:
        raise ConfigurationError("Training set is empty")
    if val is None or len(val) == 0:
        train, val = stratified_holdout(train, config.holdout_fraction, config.seed)
        logger.info("Holding out %d of %d samples for validation", len(val), len(val) + len(train))
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError("Training and validation sets must both be non-empty")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / LOG_NAME).write_text("")

    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    weights = class_weights(train.labels, train.num_classes, config.class_weighting)
    state = OptimizerState()
    log = TrainingLog()
    best_state: Optional[Dict[str, np.ndarray]] = None

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        try:
            train_loss = _train_epoch(model, train, config, state, order, weights)
        except NumericalError as e:
            logger.error("Aborting epoch %d: %s", epoch, e, extra={"parameter": e.parameter})
            raise
        val_loss, val_accuracy = evaluate_loss(model, val, config.batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_accuracy=val_accuracy,
            lr=config.learning_rate,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        improved = log.append(record)
        logger.info("Epoch finished", extra=record._asdict())
        if improved:
            if restore_best:
                best_state = {name: value.copy() for name, value in model.state_dict().items()}
            if out_path is not None:
                log.checkpoint_path = save_checkpoint(model, out_path / CHECKPOINT_NAME)
        if out_path is not None:
            with (out_path / LOG_NAME).open("a") as handle:
                handle.write(_record_line(record))

    if restore_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return log
