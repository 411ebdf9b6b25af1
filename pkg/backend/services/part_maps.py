# backend/services/part_maps.py
"""
Boolean part-location maps and their projection onto feature grids.

A visible click paints a PART_SQUARE_SIDE square ([c-5, c+4] on each axis,
clipped). A feature cell is on when its receptive window touches any painted pixel.
"""
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from constants import PART_SQUARE_BEFORE, PART_SQUARE_AFTER, RESIZE_SIDE, CROP_SIDE, EVAL_CROP_OFFSET
from models.bundles import PartAnnotations, PartMaps
from models.models import FeatureGeometry
from utils.errors import GeometryMismatchError

logger = logging.getLogger(__name__)


def _as_hw(image_size: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    if isinstance(image_size, int):
        return image_size, image_size
    return int(image_size[0]), int(image_size[1])


def build_part_maps(ann: PartAnnotations, image_size: Union[int, Tuple[int, int]],
                    image_indices: Optional[Sequence[int]] = None) -> PartMaps:
    """Image-level maps [N, P, H, W] for the requested images (all annotated images by default)."""
    height, width = _as_hw(image_size)
    if image_indices is None:
        image_indices = np.unique(ann.image_index)
    image_indices = np.asarray(image_indices, dtype=np.int64)
    row_of = {int(img): row for row, img in enumerate(image_indices)}

    maps = np.zeros((len(image_indices), ann.num_parts, height, width), dtype=bool)
    for k in np.flatnonzero(ann.visible & np.isin(ann.image_index, image_indices)):
        row = row_of[int(ann.image_index[k])]
        cx, cy = int(round(ann.xy[k, 0])), int(round(ann.xy[k, 1]))
        top, bottom = max(cy - PART_SQUARE_BEFORE, 0), min(cy + PART_SQUARE_AFTER, height - 1)
        left, right = max(cx - PART_SQUARE_BEFORE, 0), min(cx + PART_SQUARE_AFTER, width - 1)
        if top <= bottom and left <= right:
            maps[row, ann.part_index[k], top:bottom + 1, left:right + 1] = True

    return PartMaps(maps=maps, image_indices=image_indices, level="image")


def rescale_annotations(ann: PartAnnotations, image_sizes: np.ndarray,
                        target: int = RESIZE_SIDE) -> PartAnnotations:
    """Map click coordinates from original (width, height) sizes onto the square resize frame."""
    sizes = np.asarray(image_sizes, dtype=np.float64)
    per_click = sizes[ann.image_index]
    xy = ann.xy * (target / per_click)
    xy = np.clip(xy, 0, target - 1)
    return PartAnnotations(
        num_parts=ann.num_parts, image_index=ann.image_index, part_index=ann.part_index,
        xy=xy, visible=ann.visible, part_names=ann.part_names,
    )


def crop_part_maps(maps: PartMaps, offset: Tuple[int, int] = EVAL_CROP_OFFSET,
                   size: int = CROP_SIDE) -> PartMaps:
    """Cut the same crop the eval preprocessing applies to the images."""
    top, left = offset
    return PartMaps(
        maps=maps.maps[:, :, top:top + size, left:left + size],
        image_indices=maps.image_indices, level=maps.level,
    )


def _window_bounds(geometry: FeatureGeometry, cells: int) -> Tuple[np.ndarray, np.ndarray]:
    bounds = np.asarray([geometry.axis_window(i) for i in range(cells)], dtype=np.int64)
    return bounds[:, 0], bounds[:, 1]


def project_part_maps(maps: PartMaps, geometry: FeatureGeometry) -> PartMaps:
    """Binary max over each cell's receptive window, computed with summed-area tables."""
    height, width = maps.spatial
    if height != geometry.image_size or width != geometry.image_size:
        raise GeometryMismatchError(
            f"Part maps are {height}x{width} but the feature geometry expects {geometry.image_size}px input"
        )

    integral = np.zeros(maps.maps.shape[:2] + (height + 1, width + 1), dtype=np.int64)
    integral[:, :, 1:, 1:] = maps.maps.cumsum(axis=2).cumsum(axis=3)

    top, bottom = _window_bounds(geometry, geometry.height)
    left, right = _window_bounds(geometry, geometry.width)
    # windows lying fully outside the image have start > end
    valid = (top <= bottom)[:, None] & (left <= right)[None, :]
    t, b = np.clip(top, 0, height)[:, None], np.clip(bottom + 1, 0, height)[:, None]
    l, r = np.clip(left, 0, width)[None, :], np.clip(right + 1, 0, width)[None, :]
    counts = (integral[:, :, b, r] - integral[:, :, t, r] - integral[:, :, b, l] + integral[:, :, t, l])
    projected = (counts > 0) & valid

    return PartMaps(maps=projected, image_indices=maps.image_indices, level="feature", geometry=geometry)


def feature_part_maps(ann: PartAnnotations, image_sizes: np.ndarray, geometry: FeatureGeometry,
                      image_indices: Sequence[int]) -> PartMaps:
    """Annotations -> resize frame -> eval crop -> feature grid."""
    rescaled = rescale_annotations(ann, image_sizes)
    image_level = build_part_maps(rescaled, RESIZE_SIDE, image_indices)
    cropped = crop_part_maps(image_level)
    return project_part_maps(cropped, geometry)
