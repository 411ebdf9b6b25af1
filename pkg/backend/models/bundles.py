# backend/models/bundles.py
"""
Array containers passed between services.

These hold numpy arrays and torch tensors, so they are dataclasses rather than
pydantic models.
"""
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from models.models import FeatureGeometry
from utils.errors import DatasetFormatError, UnknownClassError


# ==========================================
# IMAGE SOURCES
# ==========================================

class InMemoryImages:
    """Images held as uint8 HxWx3 arrays."""

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.arrays = list(arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.arrays[index]

    def size(self, index: int) -> Tuple[int, int]:
        """(width, height) of one image."""
        h, w = self.arrays[index].shape[:2]
        return w, h


class FileImages:
    """Images read lazily from disk with Pillow."""

    def __init__(self, paths: Sequence[Union[str, Path]]):
        self.paths = [Path(p) for p in paths]

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> np.ndarray:
        with Image.open(self.paths[index]) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)

    def size(self, index: int) -> Tuple[int, int]:
        with Image.open(self.paths[index]) as img:
            return img.size


ImageSource = Union[InMemoryImages, FileImages]


# ==========================================
# DATASETS
# ==========================================

@dataclass
class ClassSplit:
    train_classes: np.ndarray
    test_classes: np.ndarray

    def __post_init__(self):
        self.train_classes = np.asarray(sorted(int(c) for c in self.train_classes), dtype=np.int64)
        self.test_classes = np.asarray(sorted(int(c) for c in self.test_classes), dtype=np.int64)
        overlap = set(self.train_classes.tolist()) & set(self.test_classes.tolist())
        if overlap:
            raise DatasetFormatError(f"Train and test classes overlap: {sorted(overlap)[:10]}")

    @property
    def all_classes(self) -> np.ndarray:
        return np.concatenate([self.train_classes, self.test_classes])


@dataclass
class PartAnnotations:
    """Worker clicks, one row per (image, part, worker) annotation."""
    num_parts: int
    image_index: np.ndarray
    part_index: np.ndarray
    xy: np.ndarray  # [N, 2] pixel coordinates (x, y)
    visible: np.ndarray
    part_names: Optional[List[str]] = None

    def __post_init__(self):
        self.image_index = np.asarray(self.image_index, dtype=np.int64)
        self.part_index = np.asarray(self.part_index, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool)

    def __len__(self) -> int:
        return len(self.image_index)

    def subset(self, mask: np.ndarray) -> "PartAnnotations":
        return PartAnnotations(
            num_parts=self.num_parts, image_index=self.image_index[mask],
            part_index=self.part_index[mask], xy=self.xy[mask],
            visible=self.visible[mask], part_names=self.part_names,
        )


@dataclass
class DatasetBundle:
    name: str
    images: ImageSource
    labels: np.ndarray
    attributes: np.ndarray  # [num_classes, num_attributes], unit rows
    split: ClassSplit
    parts: Optional[PartAnnotations] = None
    raw_attributes: Optional[np.ndarray] = None
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        known = set(self.split.all_classes.tolist())
        unknown = sorted(set(np.unique(self.labels).tolist()) - known)
        if unknown:
            raise UnknownClassError(f"Labels reference classes outside the split: {unknown[:10]}")
        if self.labels.size and self.labels.max() >= self.attributes.shape[0]:
            raise UnknownClassError(
                f"Label {int(self.labels.max())} has no attribute row ({self.attributes.shape[0]} rows)"
            )

    @property
    def num_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def num_attributes(self) -> int:
        return self.attributes.shape[1]

    def indices_for(self, classes: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, np.asarray(classes)))

    @property
    def train_indices(self) -> np.ndarray:
        return self.indices_for(self.split.train_classes)

    @property
    def test_indices(self) -> np.ndarray:
        return self.indices_for(self.split.test_classes)

    def image_sizes(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """[N, 2] array of (width, height)."""
        indices = range(len(self.images)) if indices is None else indices
        return np.asarray([self.images.size(int(i)) for i in indices], dtype=np.int64).reshape(-1, 2)


# ==========================================
# PART MAPS
# ==========================================

@dataclass
class PartMaps:
    """Boolean part maps [N, P, H, W], image-level or projected onto a feature grid."""
    maps: np.ndarray
    image_indices: np.ndarray
    level: str = "image"
    geometry: Optional[FeatureGeometry] = None

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=bool)
        self.image_indices = np.asarray(self.image_indices, dtype=np.int64)

    @property
    def num_parts(self) -> int:
        return self.maps.shape[1]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]

    def union(self) -> np.ndarray:
        """Any-part OR, [N, H, W]."""
        return self.maps.any(axis=1)


# ==========================================
# FEATURES
# ==========================================

@dataclass
class FeatureBundle:
    """Encoder outputs for a batch: global vectors [B, D] and channel-first local grids [B, C, H, W]."""
    global_features: torch.Tensor
    local_features: torch.Tensor
    geometry: FeatureGeometry
    labels: Optional[np.ndarray] = None
    image_indices: Optional[np.ndarray] = None
    taps: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.global_features.shape[0]

    def local_hwc(self) -> torch.Tensor:
        """Local grid in [B, H, W, C] layout."""
        return self.local_features.permute(0, 2, 3, 1)

    def select(self, indices) -> "FeatureBundle":
        indices = np.asarray(indices)
        if indices.dtype == bool:
            indices = np.flatnonzero(indices)
        idx = torch.as_tensor(indices, dtype=torch.long)
        return FeatureBundle(
            global_features=self.global_features[idx],
            local_features=self.local_features[idx],
            geometry=self.geometry,
            labels=None if self.labels is None else self.labels[idx.numpy()],
            image_indices=None if self.image_indices is None else self.image_indices[idx.numpy()],
            taps={k: v[idx] for k, v in self.taps.items()},
        )


# ==========================================
# PRETRAINING
# ==========================================

@dataclass
class PairingPlan:
    """Positive source per anchor and the rule that defines its negatives."""
    positive: np.ndarray
    intra_class: np.ndarray
    labels: np.ndarray
    class_negatives: bool = False

    def __len__(self) -> int:
        return len(self.positive)

    @cached_property
    def negative_mask(self) -> np.ndarray:
        """[n, n] bool; row i marks the global sources scored as negatives for anchor i.

        With class negatives, an anchor whose class fills the whole batch has an
        empty row: same-class inputs are never contrasted against it.
        """
        if self.class_negatives:
            return self.labels[:, None] != self.labels[None, :]
        return ~np.eye(len(self.positive), dtype=bool)


@dataclass
class PMIHeatmap:
    scores: np.ndarray
    normalized: np.ndarray
    source_id: int
    target_id: int
    flags: List[str] = field(default_factory=list)
