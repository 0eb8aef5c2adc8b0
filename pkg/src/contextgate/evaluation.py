"""
Classification metrics, attention heatmap export, and the attention comparison harness.
"""

import csv
import json
import logging
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from time import time
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn import metrics

from . import _netpbm
from .attention import AttentionArtifacts, AttentionKind
from .data import Dataset, resize_nearest, stratified_holdout
from .errors import ConfigurationError, ContractError, DimensionError
from .model import ModelConfig, build_model
from .training import TrainConfig, fit

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ("approach", "accuracy", "precision", "recall", "f1", "kappa", "auc")


# Metrics ------------------------------------------------------------------------------------


class ClassMetrics(NamedTuple):
    """One row of the per-class report; ``None`` marks a metric undefined for the class."""

    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    auc: Optional[float]
    support: int


class AggregateMetrics(NamedTuple):
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    auc: Optional[float]


def _macro(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _weighted(values: Sequence[Optional[float]], support: Sequence[int]) -> Optional[float]:
    pairs = [(v, s) for v, s in zip(values, support) if v is not None and s > 0]
    total = sum(s for _, s in pairs)
    return float(sum(v * s for v, s in pairs) / total) if total else None


def _percent(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


@dataclass
class MetricsReport:
    """Confusion matrix (rows true, columns predicted) with per-class and aggregate scores."""

    confusion: np.ndarray
    per_class: List[ClassMetrics]
    macro: AggregateMetrics
    weighted: AggregateMetrics
    accuracy: float
    kappa: float

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "kappa": self.kappa,
            "confusion": self.confusion.tolist(),
            "per_class": [row._asdict() for row in self.per_class],
            "macro": self.macro._asdict(),
            "weighted": self.weighted._asdict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def format_table(self, class_names: Optional[Sequence[str]] = None) -> str:
        """Plain-text classification report: one row per class plus Macro and Weighted rows.

        Scores are percentages; undefined cells print as ``-``.
        """
        names = list(class_names) if class_names else [str(c) for c in range(len(self.per_class))]
        if len(names) != len(self.per_class):
            raise ContractError(f"{len(names)} class names for {len(self.per_class)} classes")
        header = ("Class", "Acc", "Prec", "Rec", "F1", "AUC", "#Test")
        rows = [
            (name, *(_percent(v) for v in row[:5]), str(row.support))
            for name, row in zip(names, self.per_class)
        ]
        total = str(self.num_samples)
        rows.append(("Macro", *(_percent(v) for v in self.macro), total))
        rows.append(("Weighted", *(_percent(v) for v in self.weighted), total))
        width = max(len(cell) for cell in [header[0]] + [row[0] for row in rows])
        lines = [f"{header[0]:<{width}}  " + "  ".join(f"{h:>7}" for h in header[1:])]
        lines += [f"{row[0]:<{width}}  " + "  ".join(f"{c:>7}" for c in row[1:]) for row in rows]
        lines.append("")
        lines.append(f"Accuracy {_percent(self.accuracy)}  Kappa {_percent(self.kappa)}")
        return "\n".join(lines) + "\n"


def _kappa(confusion: np.ndarray, y_true: np.ndarray, y_pred: np.ndarray) -> float:
    total = confusion.sum()
    p_e = float((confusion.sum(axis=1) * confusion.sum(axis=0)).sum() / total**2)
    if p_e == 1.0:
        # a single class on both sides: agreement is no better than chance
        return 0.0
    return float(metrics.cohen_kappa_score(y_true, y_pred, labels=np.arange(len(confusion))))


def compute_metrics(y_true: np.ndarray, y_prob: np.ndarray) -> MetricsReport:
    """Score ``N x C`` class probabilities against integer labels.

    Predictions are the row argmax (ties go to the lowest class index). Per-class accuracy is
    the class recall. Classes absent from ``y_true`` have undefined accuracy, recall, F1 and
    AUC: they are reported as ``None``, left out of the macro means, and logged. Their
    precision stays defined (0) when the class was predicted.

    Raises:
        ConfigurationError: If there are no samples
        ContractError: If probability rows do not sum to 1 or labels are out of range
        DimensionError: If ``y_true`` and ``y_prob`` disagree in length
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_prob = np.asarray(y_prob, dtype=np.float64)
    if y_prob.ndim != 2 or len(y_true) != len(y_prob):
        raise DimensionError("compute_metrics", "samples", len(y_true), y_prob.shape)
    if len(y_true) == 0:
        raise ConfigurationError("Cannot compute metrics on zero samples")
    if not np.allclose(y_prob.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("compute_metrics expects probability rows summing to 1")
    num_classes = y_prob.shape[1]
    if y_true.min() < 0 or y_true.max() >= num_classes:
        raise ContractError(f"labels must lie in [0, {num_classes})")

    labels = np.arange(num_classes)
    y_pred = np.argmax(y_prob, axis=1)
    confusion = metrics.confusion_matrix(y_true, y_pred, labels=labels)
    precision, recall, f1, support = metrics.precision_recall_fscore_support(
        y_true, y_pred, labels=labels, zero_division=0
    )

    per_class: List[ClassMetrics] = []
    for c in labels:
        n = int(support[c])
        if n == 0:
            logger.warning("Class %d is absent from the labels; recall and AUC undefined", c)
            predicted = confusion[:, c].sum() > 0
            per_class.append(
                ClassMetrics(None, float(precision[c]) if predicted else None, None, None, None, 0)
            )
            continue
        positives = y_true == c
        auc = (
            float(metrics.roc_auc_score(positives, y_prob[:, c]))
            if n < len(y_true)
            else None
        )
        per_class.append(
            ClassMetrics(
                float(recall[c]), float(precision[c]), float(recall[c]), float(f1[c]), auc, n
            )
        )

    counts = [row.support for row in per_class]
    columns = list(zip(*(row[:5] for row in per_class)))
    macro = AggregateMetrics(*(_macro(column) for column in columns))
    weighted = AggregateMetrics(*(_weighted(column, counts) for column in columns))
    return MetricsReport(
        confusion=confusion,
        per_class=per_class,
        macro=macro,
        weighted=weighted,
        accuracy=float(np.trace(confusion) / confusion.sum()),
        kappa=_kappa(confusion, y_true, y_pred),
    )


# Heatmaps -----------------------------------------------------------------------------------


class HeatmapChannel(str, Enum):
    SPATIAL_MAP = "spatial_map"
    GATE = "gate"


class Heatmap(NamedTuple):
    """
    gray: np.ndarray     H x W uint8, brighter = more attention
    overlay: Optional[np.ndarray]   H x W x 3 uint8 blend onto the input image
    """

    gray: np.ndarray
    overlay: Optional[np.ndarray]


OVERLAY_ALPHA = 0.5
_LOW = np.array([1.0, 1.0, 1.0])
_HIGH = np.array([0.0, 0.0, 0.5])


def attention_map(artifacts: AttentionArtifacts, channel: Union[str, HeatmapChannel]) -> np.ndarray:
    """The ``H x W`` map of one unbatched forward pass; per-channel gates are averaged."""
    channel = HeatmapChannel(channel)
    source = artifacts.gate if channel is HeatmapChannel.GATE else artifacts.spatial_map
    if source is None:
        raise ConfigurationError(
            f"Attention kind '{artifacts.kind.value}' produces no {channel.value}"
        )
    values = source.data
    if channel is HeatmapChannel.GATE:
        if values.ndim != 3:
            raise DimensionError("attention_map", "gate rank", "3 (H, W, K)", values.ndim)
        return values.mean(axis=-1)
    if values.ndim != 2:
        raise DimensionError("attention_map", "spatial_map rank", "2 (H, W)", values.ndim)
    return values


def export_heatmap(
    artifacts: AttentionArtifacts,
    target_size: Tuple[int, int],
    channel: Union[str, HeatmapChannel] = HeatmapChannel.GATE,
    image: Optional[np.ndarray] = None,
) -> Heatmap:
    """Render an attention map at image resolution.

    The map is min-max normalized (a constant map becomes 0.5 everywhere), scaled to 8 bits
    and nearest-upsampled to ``target_size``. With ``image`` (``H x W x 3`` in [0, 1]), the
    overlay blends a white-to-dark-blue colormap onto it at alpha 0.5, so dark blue marks
    the most attended regions.

    Raises:
        ConfigurationError: If ``target_size`` has a zero side or the map is unavailable
    """
    if len(target_size) != 2 or min(target_size) < 1:
        raise ConfigurationError(f"Heatmap target size must be positive, got {target_size}")
    values = attention_map(artifacts, channel)
    lo, hi = float(values.min()), float(values.max())
    normalized = np.full(values.shape, 0.5) if hi - lo == 0.0 else (values - lo) / (hi - lo)
    intensity = resize_nearest(normalized, target_size)
    gray = np.round(intensity * 255.0).astype(np.uint8)

    overlay = None
    if image is not None:
        base = resize_nearest(np.asarray(image, dtype=np.float64), target_size)
        colors = _LOW + intensity[..., None] * (_HIGH - _LOW)
        blended = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * colors
        overlay = np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Heatmap(gray, overlay)


def write_heatmap(
    heatmap: Heatmap, out_dir: Union[str, Path], stem: str, channel: Union[str, HeatmapChannel]
) -> List[Path]:
    """Write ``{stem}.{channel}.pgm`` and, when present, ``{stem}.overlay.ppm``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gray_path = out_dir / f"{stem}.{HeatmapChannel(channel).value}.pgm"
    written = [_netpbm.write_netpbm(gray_path, heatmap.gray)]
    if heatmap.overlay is not None:
        written.append(_netpbm.write_netpbm(out_dir / f"{stem}.overlay.ppm", heatmap.overlay))
    return written


# Comparison harness -------------------------------------------------------------------------


class ComparisonRow(NamedTuple):
    approach: str
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    kappa: float
    auc: Optional[float]


def _run_variant(
    kind: AttentionKind,
    train: Dataset,
    val: Dataset,
    test: Optional[Dataset],
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Optional[Path],
) -> ComparisonRow:
    started = time()
    model = build_model(model_config.model_copy(update={"attention": kind}), seed=train_config.seed)
    fit(model, train, val, train_config, out_dir, restore_best=True)
    scored = test if test is not None and len(test) else val
    report = compute_metrics(scored.labels, model.predict(scored.images, train_config.batch_size))
    logger.info(
        "Variant finished",
        extra={"attention": kind.value, "accuracy": report.accuracy, "duration": time() - started},
    )
    return ComparisonRow(
        kind.value,
        report.accuracy,
        report.macro.precision,
        report.macro.recall,
        report.macro.f1,
        report.kappa,
        report.macro.auc,
    )


@dataclass
class ComparisonTable:
    rows: List[ComparisonRow]

    def to_csv(self) -> str:
        lines = [",".join(COMPARISON_COLUMNS)]
        for row in self.rows:
            cells = [row.approach] + ["" if v is None else f"{v:.6f}" for v in row[1:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([row._asdict() for row in self.rows], sort_keys=True, indent=2)

    def write(self, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "comparison.csv", out_dir / "comparison.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json() + "\n")
        return csv_path, json_path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "ComparisonTable":
        with Path(path).open(newline="") as handle:
            reader = csv.DictReader(handle)
            rows = [
                ComparisonRow(
                    record["approach"],
                    *(float(record[c]) if record[c] else None for c in COMPARISON_COLUMNS[1:]),
                )
                for record in reader
            ]
        return cls(rows)


def compare_attention_variants(
    train: Dataset,
    val: Optional[Dataset],
    variants: Sequence[Union[str, AttentionKind]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    max_workers: int = 1,
    test: Optional[Dataset] = None,
) -> ComparisonTable:
    """Train one model per attention kind and tabulate their scores.

    Every variant shares the backbone/head configuration and seed; only the attention kind
    changes. Variants run on a thread pool of ``max_workers``; rows keep the requested order.
    Scores come from ``test`` when given, otherwise from the hold-out set. With ``out_dir``,
    each variant's checkpoint and log land in a subdirectory and the table is written as
    ``comparison.csv`` and ``comparison.json``.
    """
    kinds = [AttentionKind.parse(v) for v in variants]
    if not kinds:
        raise ConfigurationError("No attention variants requested")
    if val is None or len(val) == 0:
        train, val = stratified_holdout(train, train_config.holdout_fraction, train_config.seed)
    root = Path(out_dir) if out_dir is not None else None

    def variant_dir(index: int, kind: AttentionKind) -> Optional[Path]:
        if root is None:
            return None
        return root / (kind.value if kinds.count(kind) == 1 else f"{kind.value}-{index}")

    start_time = time()
    futures: Dict[int, Future] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        for index, kind in enumerate(kinds):
            logger.debug("Submitting variant", extra={"attention": kind.value, "index": index})
            futures[index] = executor.submit(
                _run_variant,
                kind,
                train,
                val,
                test,
                model_config,
                train_config,
                variant_dir(index, kind),
            )
        wait(futures.values())

    # results re-raise worker failures in request order
    table = ComparisonTable([futures[index].result() for index in range(len(kinds))])
    if root is not None:
        table.write(root)
    logger.info(
        "Comparison finished",
        extra={"variants": [k.value for k in kinds], "duration": time() - start_time},
    )
    return table
