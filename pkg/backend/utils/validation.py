# backend/utils/validation.py
"""Simple validation functions"""
from typing import Tuple, Optional, Sequence

import numpy as np

from constants import DATASET_MANIFESTS

def validate_split(train_classes: Sequence[int], test_classes: Sequence[int]) -> Tuple[bool, Optional[str]]:
    """Validate that a class split is disjoint and non-empty."""
    if len(train_classes) == 0 or len(test_classes) == 0:
        return False, "Split must list at least one train and one test class"
    overlap = set(train_classes) & set(test_classes)
    if overlap:
        return False, f"Train and test classes overlap: {sorted(overlap)[:10]}"
    return True, None

def validate_attribute_matrix(matrix: np.ndarray) -> Tuple[bool, Optional[str]]:
    """Validate shape and finiteness of a class-attribute matrix."""
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        return False, f"Attribute matrix must be 2-D and non-empty, got shape {matrix.shape}"
    if not np.all(np.isfinite(matrix)):
        return False, "Attribute matrix contains non-finite values"
    return True, None

def validate_manifest_counts(name: str, num_images: int, num_attributes: int,
                             num_classes: int, num_train: int, num_test: int) -> Tuple[bool, Optional[str]]:
    """Compare loaded counts with the known manifest of a dataset."""
    manifest = DATASET_MANIFESTS.get(name.upper())
    if manifest is None:
        return True, None
    found = {'images': num_images, 'attributes': num_attributes, 'classes': num_classes,
             'train': num_train, 'test': num_test}
    wrong = [f"{key}={found[key]} (expected {manifest[key]})" for key in found if found[key] != manifest[key]]
    if wrong:
        return False, f"{name} counts do not match manifest: {', '.join(wrong)}"
    return True, None

def validate_click(x: float, y: float, width: int, height: int) -> Tuple[bool, Optional[str]]:
    """Visible clicks must lie inside the image."""
    if not (0 <= x < width and 0 <= y < height):
        return False, f"Click ({x}, {y}) outside {width}x{height} image"
    return True, None

def validate_image_batch(shape: Sequence[int], channels: int, size: int) -> Tuple[bool, Optional[str]]:
    if len(shape) != 4 or tuple(shape[1:]) != (channels, size, size):
        return False, f"Expected batch [B, {channels}, {size}, {size}], got {list(shape)}"
    if shape[0] == 0:
        return False, "Empty batch"
    return True, None