# backend/services/synthetic.py
"""
Synthetic compositional ZSL dataset.

Every attribute owns one glyph (shape + colour) and one home slot on a grid;
an image of a class draws the glyphs of the class's true attributes at their
slots with seeded jitter. Unseen classes are new combinations of attributes
that all appear in the train classes, so attribute detectors transfer.
"""
import logging
from typing import List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from models.bundles import ClassSplit, DatasetBundle, InMemoryImages, PartAnnotations
from models.models import SyntheticSpec
from services.datasets import normalize_attribute_rows
from utils.errors import InfeasibleSyntheticSpecError

logger = logging.getLogger(__name__)

SHAPES = ['square', 'circle', 'triangle', 'cross', 'diamond']
COLORS: List[Tuple[int, int, int]] = [
    (230, 60, 60), (60, 200, 80), (70, 110, 240),
    (240, 220, 60), (220, 80, 220), (60, 220, 220),
]
BACKGROUND = 40
GLYPH_GAP = 4
MAX_ATTEMPTS = 1000


def glyph_for(attribute: int) -> Tuple[str, Tuple[int, int, int]]:
    return SHAPES[attribute % len(SHAPES)], COLORS[attribute % len(COLORS)]


def slot_grid(spec: SyntheticSpec) -> Tuple[int, int]:
    """(slots per side, slot pitch)."""
    pitch = spec.glyph_size + 2 * spec.jitter + GLYPH_GAP
    usable = spec.image_size - 2 * spec.margin
    return max(usable // pitch, 0), pitch


def _check_feasible(spec: SyntheticSpec) -> None:
    if spec.num_attributes < 4:
        raise InfeasibleSyntheticSpecError(f"Need at least 4 attributes, got {spec.num_attributes}")
    per_side, _ = slot_grid(spec)
    if spec.num_attributes > per_side * per_side:
        raise InfeasibleSyntheticSpecError(
            f"{spec.num_attributes} glyphs do not fit: canvas {spec.image_size}px holds {per_side * per_side} slots"
        )
    if spec.num_classes > 2 ** spec.num_attributes - 1:
        raise InfeasibleSyntheticSpecError(
            f"{spec.num_classes} unique classes impossible with {spec.num_attributes} attributes"
        )
    if spec.num_test_classes >= spec.num_classes - 1:
        raise InfeasibleSyntheticSpecError("Need at least two train classes")


def _class_matrix(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.class_attribute_matrix is not None:
        matrix = np.asarray(spec.class_attribute_matrix, dtype=np.int64)
        if matrix.shape != (spec.num_classes, spec.num_attributes) or not np.isin(matrix, (0, 1)).all():
            raise InfeasibleSyntheticSpecError("class_attribute_matrix must be binary [num_classes x num_attributes]")
        if len({tuple(r) for r in matrix}) != len(matrix) or (matrix.sum(axis=1) == 0).any():
            raise InfeasibleSyntheticSpecError("Class attribute vectors must be unique and non-empty")
        return matrix

    rows, seen = [], set()
    for _ in range(MAX_ATTEMPTS * spec.num_classes):
        row = (rng.random(spec.num_attributes) < spec.attribute_density).astype(np.int64)
        key = tuple(row)
        if row.sum() == 0 or key in seen:
            continue
        seen.add(key)
        rows.append(row)
        if len(rows) == spec.num_classes:
            return np.stack(rows)
    raise InfeasibleSyntheticSpecError("Could not draw enough unique class attribute vectors")


def _split(matrix: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> ClassSplit:
    for _ in range(MAX_ATTEMPTS):
        order = rng.permutation(spec.num_classes)
        test, train = order[:spec.num_test_classes], order[spec.num_test_classes:]
        seen = matrix[train]
        # every attribute must be observed both on and off in the train classes
        if seen.any(axis=0).all() and (~seen.astype(bool)).any(axis=0).all():
            return ClassSplit(train, test)
    raise InfeasibleSyntheticSpecError("No split leaves every attribute observable in train classes")


def _draw_glyph(draw: ImageDraw.ImageDraw, shape: str, color, cx: int, cy: int, size: int) -> None:
    h = size // 2
    box = [cx - h, cy - h, cx + h, cy + h]
    if shape == 'square':
        draw.rectangle(box, fill=color)
    elif shape == 'circle':
        draw.ellipse(box, fill=color)
    elif shape == 'triangle':
        draw.polygon([(cx, cy - h), (cx + h, cy + h), (cx - h, cy + h)], fill=color)
    elif shape == 'cross':
        t = max(size // 6, 1)
        draw.rectangle([cx - h, cy - t, cx + h, cy + t], fill=color)
        draw.rectangle([cx - t, cy - h, cx + t, cy + h], fill=color)
    else:
        draw.polygon([(cx, cy - h), (cx + h, cy), (cx, cy + h), (cx - h, cy)], fill=color)


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    """Render a deterministic compositional dataset; equal specs give bit-identical bundles."""
    _check_feasible(spec)
    rng = np.random.default_rng(spec.seed)

    matrix = _class_matrix(spec, rng)
    split = _split(matrix, spec, rng)

    per_side, pitch = slot_grid(spec)
    slots = rng.permutation(per_side * per_side)[:spec.num_attributes]
    centers = np.asarray(
        [(spec.margin + (s % per_side) * pitch + pitch // 2, spec.margin + (s // per_side) * pitch + pitch // 2)
         for s in slots], dtype=np.int64,
    )

    images, labels = [], []
    click_image, click_part, click_xy, click_visible = [], [], [], []
    for cls in range(spec.num_classes):
        for _ in range(spec.images_per_class):
            index = len(images)
            noise = rng.integers(-spec.noise, spec.noise + 1, size=(spec.image_size, spec.image_size, 3))
            canvas = np.clip(BACKGROUND + noise, 0, 255).astype(np.uint8)
            img = Image.fromarray(canvas)
            draw = ImageDraw.Draw(img)
            jitter = rng.integers(-spec.jitter, spec.jitter + 1, size=(spec.num_attributes, 2))

            for attr in range(spec.num_attributes):
                present = bool(matrix[cls, attr])
                cx, cy = (centers[attr] + jitter[attr]).tolist()
                if present:
                    shape, color = glyph_for(attr)
                    _draw_glyph(draw, shape, color, cx, cy, spec.glyph_size)
                click_image.append(index)
                click_part.append(attr)
                click_xy.append((cx, cy) if present else (0, 0))
                click_visible.append(present)

            images.append(np.asarray(img, dtype=np.uint8))
            labels.append(cls)

    parts = PartAnnotations(
        num_parts=spec.num_attributes, image_index=np.asarray(click_image),
        part_index=np.asarray(click_part), xy=np.asarray(click_xy, dtype=np.float64),
        visible=np.asarray(click_visible),
        part_names=[f"attr{a}-{glyph_for(a)[0]}" for a in range(spec.num_attributes)],
    )
    raw = matrix.astype(np.float64)
    logger.info(
        f"[Synthetic] {spec.num_classes} classes x {spec.images_per_class} images, "
        f"{spec.num_attributes} attributes, {len(split.test_classes)} unseen classes, seed {spec.seed}"
    )
    return DatasetBundle(
        name="synthetic", images=InMemoryImages(images), labels=np.asarray(labels),
        attributes=normalize_attribute_rows(raw), split=split, parts=parts, raw_attributes=raw,
    )
