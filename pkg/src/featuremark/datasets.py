"""Labeled image datasets: validation, class subsetting, marking selection."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

SPLITS = ("train", "test", "probe")


@dataclass(frozen=True)
class LabeledImageDataset:
    """Images in [0, 1] with integer class labels, for one split."""

    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, class_count)
    class_names: tuple[str, ...]
    split: str
    dataset_id: str

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise SchemaError(f"images must be (N, C, H, W), got shape {images.shape}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise SchemaError(
                f"labels must be one per image: {len(labels)} labels, {len(images)} images"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise SchemaError("pixel values must lie in [0, 1]")
        m = len(self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= m):
            bad = int(np.argmax((labels < 0) | (labels >= m)))
            raise SchemaError(
                f"label {int(labels[bad])} at record {bad} outside [0, {m}) for "
                f"{m}-class dataset"
            )
        if self.split not in SPLITS:
            raise SchemaError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass(frozen=True)
class ClassSubsetSpec:
    """Which classes of a source dataset to keep."""

    source_dataset_id: str
    class_indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.class_indices)
        if len(idx) == 0:
            raise ValueError("class subset must name at least one class")
        if len(set(idx)) != len(idx):
            raise ValueError("class indices must be distinct")
        if tuple(sorted(idx)) != idx:
            raise ValueError("class indices must be sorted ascending")
        object.__setattr__(self, "class_indices", idx)


@dataclass(frozen=True)
class MarkingSelection:
    """Which training samples (global indices, grouped by class) get marked."""

    wm_ratio: float
    per_class_indices: dict[int, tuple[int, ...]]
    seed: int

    def __post_init__(self):
        if not (0.0 < self.wm_ratio <= 1.0):
            raise ValueError(f"wm_ratio must lie in (0, 1], got {self.wm_ratio}")
        frozen = {}
        for cls, idx in self.per_class_indices.items():
            idx = tuple(int(i) for i in idx)
            if len(set(idx)) != len(idx):
                raise ValueError(f"duplicate marked indices for class {cls}")
            frozen[int(cls)] = idx
        object.__setattr__(self, "per_class_indices", frozen)

    @property
    def total_marked(self) -> int:
        return sum(len(v) for v in self.per_class_indices.values())

    def pairs(self) -> list[tuple[int, int]]:
        """Canonical (class, index) ordering used everywhere downstream."""
        out = []
        for cls in sorted(self.per_class_indices):
            for idx in sorted(self.per_class_indices[cls]):
                out.append((cls, idx))
        return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_class_subset(ds: LabeledImageDataset, spec: ClassSubsetSpec) -> LabeledImageDataset:
    """Keep only the chosen classes, re-indexing labels densely.

    New labels follow the sorted original class order; sample order is
    preserved.
    """
    if spec.source_dataset_id != ds.dataset_id:
        raise ValueError(
            f"subset spec targets {spec.source_dataset_id!r} but dataset is "
            f"{ds.dataset_id!r}"
        )
    for c in spec.class_indices:
        if not (0 <= c < ds.class_count):
            raise ValueError(f"unknown class index {c} for {ds.class_count}-class dataset")
    chosen = np.asarray(spec.class_indices, dtype=np.int64)
    mask = np.isin(ds.labels, chosen)
    new_labels = np.searchsorted(chosen, ds.labels[mask])
    digest = hashlib.sha256(",".join(map(str, spec.class_indices)).encode()).hexdigest()[:8]
    return LabeledImageDataset(
        images=ds.images[mask],
        labels=new_labels,
        class_names=tuple(ds.class_names[c] for c in spec.class_indices),
        split=ds.split,
        dataset_id=f"{ds.dataset_id}-sub{len(chosen)}c-{digest}",
    )


def select_marking_targets(
    ds: LabeledImageDataset, wm_ratio: float, seed: int
) -> MarkingSelection:
    """Draw round(wm_ratio * class_size) indices per class, without replacement.

    Rounding is half-up so e.g. 10% of 5000 is exactly 500. Deterministic in
    seed: classes are visited in ascending order against one seeded generator.
    """
    if not (0.0 < wm_ratio <= 1.0):
        raise ValueError(f"wm_ratio must lie in (0, 1], got {wm_ratio}")
    if ds.split != "train":
        raise ValueError(f"marking targets come from the train split, got {ds.split!r}")
    rng = np.random.default_rng(seed)
    per_class = {}
    for cls in range(ds.class_count):
        idx = ds.class_indices(cls)
        if idx.size == 0:
            raise ValueError(f"class {cls} ({ds.class_names[cls]!r}) has no samples")
        k = _round_half_up(wm_ratio * idx.size)
        chosen = rng.permutation(idx)[:k]
        per_class[cls] = tuple(int(i) for i in np.sort(chosen))
    return MarkingSelection(wm_ratio=wm_ratio, per_class_indices=per_class, seed=seed)
