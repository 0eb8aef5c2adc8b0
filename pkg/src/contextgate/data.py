"""
Synthetic lesion-image generator and dataset loading.

``generate_dataset`` draws fundus-like RGB images: a textured orange-red disc on a dark
field, with three lesion types whose counts depend on the class label

* exudates: bright yellow blobs
* microaneurysms: small dark red dots
* hemorrhages: larger dark red patches

Adjacent classes have disjoint count ranges for at least one lesion type, so the classes
are separable by construction. Images are written as binary PPM next to a ``manifest.csv``
(``path,label,split``) and the canonical ``spec.json`` they were generated from.
"""

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field, model_validator
from typing_extensions import Self

from . import _netpbm
from ._config import ConfigModel
from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
SPEC_NAME = "spec.json"
MANIFEST_HEADER = ("path", "label", "split")

DESK_CLASS_NAMES = ("Normal", "NPDR", "PDR")
DR7_CLASS_NAMES = (
    "Normal",
    "Mild NPDR",
    "Moderate NPDR",
    "Severe NPDR",
    "Very Severe NPDR",
    "PDR",
    "Advanced PDR",
)
# per-grade image counts of the 757-image seven-grade fundus collection
DR7_GRADE_COUNTS = (187, 4, 80, 176, 108, 88, 114)


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class LesionRange(ConfigModel):
    """Inclusive count range and radius range (pixels) of one lesion type."""

    count_min: int = Field(0, ge=0)
    count_max: int = Field(0, ge=0)
    radius_min: float = Field(1.0, gt=0.0)
    radius_max: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _ordered(self) -> Self:
        if self.count_min > self.count_max or self.radius_min > self.radius_max:
            raise ValueError("range minimum exceeds maximum")
        return self

    def disjoint(self, other: "LesionRange") -> bool:
        return self.count_max < other.count_min or other.count_max < self.count_min


def _lesions(count_min: int, count_max: int, radius_min: float, radius_max: float) -> LesionRange:
    return LesionRange(
        count_min=count_min, count_max=count_max, radius_min=radius_min, radius_max=radius_max
    )


class LesionGrammar(ConfigModel):
    exudates: LesionRange = Field(default_factory=lambda: _lesions(0, 0, 1.5, 3.5))
    microaneurysms: LesionRange = Field(default_factory=lambda: _lesions(0, 0, 0.8, 1.5))
    hemorrhages: LesionRange = Field(default_factory=lambda: _lesions(0, 0, 2.5, 4.5))

    def distinguishable_from(self, other: "LesionGrammar") -> bool:
        return (
            self.exudates.disjoint(other.exudates)
            or self.microaneurysms.disjoint(other.microaneurysms)
            or self.hemorrhages.disjoint(other.hemorrhages)
        )

    @classmethod
    def counts(
        cls,
        exudates: Tuple[int, int],
        microaneurysms: Tuple[int, int],
        hemorrhages: Tuple[int, int],
    ) -> "LesionGrammar":
        """Grammar with the given count ranges and default lesion sizes."""
        base = cls()
        return cls(
            exudates=base.exudates.model_copy(
                update={"count_min": exudates[0], "count_max": exudates[1]}
            ),
            microaneurysms=base.microaneurysms.model_copy(
                update={"count_min": microaneurysms[0], "count_max": microaneurysms[1]}
            ),
            hemorrhages=base.hemorrhages.model_copy(
                update={"count_min": hemorrhages[0], "count_max": hemorrhages[1]}
            ),
        )


def _desk_lesions() -> List[LesionGrammar]:
    return [
        LesionGrammar.counts(exudates=(0, 0), microaneurysms=(0, 1), hemorrhages=(0, 0)),
        LesionGrammar.counts(exudates=(0, 2), microaneurysms=(4, 8), hemorrhages=(1, 3)),
        LesionGrammar.counts(exudates=(4, 8), microaneurysms=(4, 8), hemorrhages=(5, 8)),
    ]


def _dr7_lesions() -> List[LesionGrammar]:
    return [
        LesionGrammar.counts(exudates=(0, 0), microaneurysms=(0, 0), hemorrhages=(0, 0)),
        LesionGrammar.counts(exudates=(0, 0), microaneurysms=(2, 4), hemorrhages=(0, 0)),
        LesionGrammar.counts(exudates=(0, 1), microaneurysms=(5, 8), hemorrhages=(1, 2)),
        LesionGrammar.counts(exudates=(2, 3), microaneurysms=(5, 8), hemorrhages=(3, 5)),
        LesionGrammar.counts(exudates=(4, 5), microaneurysms=(5, 8), hemorrhages=(6, 8)),
        LesionGrammar.counts(exudates=(6, 8), microaneurysms=(5, 8), hemorrhages=(9, 11)),
        LesionGrammar.counts(exudates=(9, 12), microaneurysms=(5, 8), hemorrhages=(12, 15)),
    ]


class SyntheticSpec(ConfigModel):
    """Recipe for a synthetic dataset. The defaults are the 3-class desk-scale task."""

    num_classes: int = Field(3, ge=2)
    samples_per_class: List[int] = Field(default_factory=lambda: [100, 100, 100])
    image_size: Tuple[int, int] = (64, 64)
    val_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    test_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    lesions: List[LesionGrammar] = Field(default_factory=_desk_lesions)
    class_names: Optional[List[str]] = None
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if len(self.samples_per_class) != self.num_classes:
            raise ValueError(
                f"samples_per_class has {len(self.samples_per_class)} entries "
                f"for {self.num_classes} classes"
            )
        if any(count < 0 for count in self.samples_per_class):
            raise ValueError("samples_per_class entries must be non-negative")
        if len(self.lesions) != self.num_classes:
            raise ValueError(
                f"lesions has {len(self.lesions)} entries for {self.num_classes} classes"
            )
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names must name every class")
        if min(self.image_size) < 8:
            raise ValueError(f"image_size must be at least 8x8, got {self.image_size}")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave training samples")
        for label, (lower, upper) in enumerate(zip(self.lesions, self.lesions[1:])):
            if not lower.distinguishable_from(upper):
                raise ValueError(
                    f"classes {label} and {label + 1} need disjoint count ranges "
                    "for at least one lesion type"
                )
        return self

    @classmethod
    def desk(cls, seed: int = 0) -> "SyntheticSpec":
        return cls(class_names=list(DESK_CLASS_NAMES), seed=seed)

    @classmethod
    def dr7(cls, seed: int = 0, scale: float = 0.2) -> "SyntheticSpec":
        """Seven grades with the class imbalance of the 757-image fundus collection."""
        return cls(
            num_classes=7,
            samples_per_class=[max(2, round(count * scale)) for count in DR7_GRADE_COUNTS],
            lesions=_dr7_lesions(),
            class_names=list(DR7_CLASS_NAMES),
            seed=seed,
        )

    def names(self) -> List[str]:
        if self.class_names:
            return list(self.class_names)
        return [str(c) for c in range(self.num_classes)]


# Rendering ----------------------------------------------------------------------------------

_FIELD = np.array([0.02, 0.01, 0.01])
_RETINA = np.array([0.78, 0.33, 0.14])
_EXUDATE = np.array([0.98, 0.88, 0.42])
_MICROANEURYSM = np.array([0.36, 0.04, 0.04])
_HEMORRHAGE = np.array([0.46, 0.07, 0.05])


def _stamp(
    canvas: np.ndarray,
    yy: np.ndarray,
    xx: np.ndarray,
    center: Tuple[float, float],
    radius: Tuple[float, float],
    color: np.ndarray,
) -> None:
    """Blend an anti-aliased ellipse of ``color`` into ``canvas`` in place."""
    distance = np.sqrt(((yy - center[0]) / radius[0]) ** 2 + ((xx - center[1]) / radius[1]) ** 2)
    alpha = np.clip((1.0 - distance) * min(radius) + 0.5, 0.0, 1.0)[..., None]
    canvas *= 1.0 - alpha
    canvas += alpha * color


def render_fundus(
    grammar: LesionGrammar, image_size: Tuple[int, int], rng: np.random.Generator
) -> np.ndarray:
    """Draw one ``H x W x 3`` ``uint8`` fundus-like image following ``grammar``."""
    height, width = image_size
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    disc = min(height, width) / 2.0 - 1.0
    radial = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / disc

    texture = rng.normal(0.0, 0.025, size=(height, width, 1))
    shading = (1.0 - 0.35 * radial**2)[..., None]
    inside = np.clip((1.0 - radial) * disc + 0.5, 0.0, 1.0)[..., None]
    canvas = inside * (_RETINA * shading + texture) + (1.0 - inside) * _FIELD

    for lesion, color, elongation in (
        (grammar.hemorrhages, _HEMORRHAGE, 0.6),
        (grammar.microaneurysms, _MICROANEURYSM, 0.0),
        (grammar.exudates, _EXUDATE, 0.3),
    ):
        for _ in range(int(rng.integers(lesion.count_min, lesion.count_max + 1))):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            reach = 0.8 * disc * np.sqrt(rng.uniform())
            center = (cy + reach * np.sin(angle), cx + reach * np.cos(angle))
            r = rng.uniform(lesion.radius_min, lesion.radius_max)
            stretch = 1.0 + rng.uniform(0.0, elongation)
            _stamp(canvas, yy, xx, center, (r, r * stretch), color)

    return np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)


# Manifest -----------------------------------------------------------------------------------


class ManifestRecord(NamedTuple):
    """
    path: str
    label: int
    split: Split
    """

    path: str
    label: int
    split: Split


@dataclass
class DatasetManifest:
    """Labeled image records; ``path`` is relative to ``root``."""

    root: Path
    records: List[ManifestRecord] = field(default_factory=list)
    class_names: Optional[List[str]] = None

    def split(self, split: Union[str, Split]) -> List[ManifestRecord]:
        split = Split(split)
        return [record for record in self.records if record.split is split]

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return max((record.label for record in self.records), default=-1) + 1

    def write(self, manifest_path: Optional[Path] = None) -> Path:
        manifest_path = manifest_path or self.root / MANIFEST_NAME
        with Path(manifest_path).open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for record in self.records:
                writer.writerow((record.path, record.label, record.split.value))
        return Path(manifest_path)

    @classmethod
    def read(cls, manifest_path: Union[str, Path]) -> "DatasetManifest":
        """Parse and validate a manifest CSV.

        Raises:
            DataError: If the manifest is unreadable, malformed, references missing images,
                or lists an image twice
        """
        manifest_path = Path(manifest_path)
        root = manifest_path.parent
        try:
            with manifest_path.open(newline="") as handle:
                rows = list(csv.reader(handle))
        except OSError as e:
            raise DataError(f"Cannot read manifest {manifest_path}: {e}") from e
        if not rows or tuple(rows[0]) != MANIFEST_HEADER:
            raise DataError(
                f"Manifest {manifest_path} must start with header {','.join(MANIFEST_HEADER)}"
            )

        records: List[ManifestRecord] = []
        seen = set()
        for line, row in enumerate(rows[1:], start=2):
            if len(row) != 3:
                raise DataError(f"{manifest_path}:{line}: expected 3 fields, got {len(row)}")
            path, label, split = row
            try:
                record = ManifestRecord(path, int(label), Split(split))
            except ValueError as e:
                raise DataError(f"{manifest_path}:{line}: {e}") from e
            if record.label < 0:
                raise DataError(f"{manifest_path}:{line}: negative label {record.label}")
            if path in seen:
                raise DataError(f"{manifest_path}:{line}: {path} listed more than once")
            if not (root / path).is_file():
                raise DataError(f"{manifest_path}:{line}: image {path} does not exist")
            seen.add(path)
            records.append(record)

        class_names = None
        spec_path = root / SPEC_NAME
        if spec_path.is_file():
            try:
                class_names = SyntheticSpec.load_json(spec_path).names()
            except ConfigurationError:
                logger.warning("Ignoring unreadable %s", spec_path)
        return cls(root, records, class_names)


def _stratified_split(
    count: int, val_fraction: float, test_fraction: float, rng: np.random.Generator
) -> List[Split]:
    n_val, n_test = round(count * val_fraction), round(count * test_fraction)
    n_val = min(n_val, count)
    n_test = min(n_test, count - n_val)
    order = [Split.VAL] * n_val + [Split.TEST] * n_test + [Split.TRAIN] * (count - n_val - n_test)
    return [order[i] for i in rng.permutation(count)]


def generate_dataset(spec: SyntheticSpec, out_dir: Union[str, Path]) -> DatasetManifest:
    """Render every image of ``spec`` into ``out_dir`` and write the manifest.

    The output depends only on ``spec`` (seed included): each image draws from its own
    ``SeedSequence([seed, 1, label, index])`` stream and splits from ``[seed, 0]``.

    Raises:
        DataError: If ``out_dir`` cannot be created or written
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / SPEC_NAME).write_text(spec.to_json())
    except OSError as e:
        raise DataError(f"Cannot write dataset to {out_dir}: {e}") from e

    split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    manifest = DatasetManifest(out_dir, class_names=spec.names())
    number = 0
    for label, count in enumerate(spec.samples_per_class):
        if count == 0:
            logger.warning("Class %d has no samples and is absent from the manifest", label)
            continue
        splits = _stratified_split(count, spec.val_fraction, spec.test_fraction, split_rng)
        for index in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, label, index]))
            pixels = render_fundus(spec.lesions[label], spec.image_size, rng)
            number += 1
            name = f"img_{number:04d}.ppm"
            try:
                _netpbm.write_netpbm(out_dir / name, pixels)
            except OSError as e:
                raise DataError(f"Cannot write image {out_dir / name}: {e}") from e
            manifest.records.append(ManifestRecord(name, label, splits[index]))

    manifest.write()
    logger.info(
        "Generated dataset",
        extra={"out_dir": str(out_dir), "images": number, "seed": spec.seed},
    )
    return manifest


# In-memory datasets -------------------------------------------------------------------------


@dataclass
class Dataset:
    """Images (``N x H x W x 3``, float64 in [0, 1]) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    paths: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            [self.paths[i] for i in indices] if self.paths else [],
        )

    @classmethod
    def empty(cls, image_shape: Tuple[int, int, int], num_classes: int) -> "Dataset":
        return cls(np.zeros((0,) + tuple(image_shape)), np.zeros(0, dtype=np.int64), num_classes)


def resize_nearest(pixels: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of an ``H x W [x C]`` array to ``size`` by index mapping."""
    height, width = pixels.shape[:2]
    target_h, target_w = size
    if (height, width) == (target_h, target_w):
        return pixels
    rows = (np.arange(target_h) * height) // target_h
    cols = (np.arange(target_w) * width) // target_w
    return pixels[rows[:, None], cols[None, :]]


def load_image(path: Union[str, Path], image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read a PPM/PGM as ``H x W x 3`` float64 in [0, 1], optionally resized."""
    pixels = _netpbm.read_netpbm(path)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[..., None], 3, axis=2)
    if image_size is not None:
        pixels = resize_nearest(pixels, image_size)
    return pixels.astype(np.float64) / 255.0


def load_dataset(
    manifest_path: Union[str, Path],
    image_size: Optional[Tuple[int, int]] = None,
    num_classes: Optional[int] = None,
) -> Dict[Split, Dataset]:
    """Load every split of a manifest into memory.

    Images are scaled to [0, 1] and, when ``image_size`` is given, nearest-resized to it.
    Splits absent from the manifest come back as empty datasets.

    Raises:
        DataError: If the manifest or any image is unreadable, images disagree in size,
            or a label is out of range
    """
    manifest = DatasetManifest.read(manifest_path)
    classes = num_classes if num_classes is not None else manifest.num_classes
    if classes < 1:
        raise DataError(f"Manifest {manifest_path} lists no images")

    loaded = {
        split: [
            load_image(manifest.root / record.path, image_size) for record in manifest.split(split)
        ]
        for split in Split
    }
    shapes = {image.shape for images in loaded.values() for image in images}
    if len(shapes) > 1:
        raise DataError(
            f"Images in {manifest_path} have differing shapes {sorted(shapes)}; pass image_size"
        )
    image_shape = shapes.pop() if shapes else (0, 0, 3)

    datasets: Dict[Split, Dataset] = {}
    for split, images in loaded.items():
        records = manifest.split(split)
        datasets[split] = Dataset(
            np.stack(images) if images else np.zeros((0,) + image_shape),
            np.array([record.label for record in records], dtype=np.int64),
            classes,
            [record.path for record in records],
        )
    logger.info(
        "Loaded dataset",
        extra={"manifest": str(manifest_path), **{s.value: len(d) for s, d in datasets.items()}},
    )
    return datasets


def stratified_holdout(
    dataset: Dataset, fraction: float, seed: int
) -> Tuple[Dataset, Dataset]:
    """Split ``dataset`` into (train, hold-out), taking ``fraction`` of every class."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    held: List[int] = []
    kept: List[int] = []
    for label in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == label)
        members = members[rng.permutation(len(members))]
        cut = round(len(members) * fraction)
        held += members[:cut].tolist()
        kept += members[cut:].tolist()
    return dataset.subset(sorted(kept)), dataset.subset(sorted(held))
