# backend/services/datasets.py
"""
ZSL dataset loading, attribute normalization and image preprocessing.

On-disk layout of a dataset root:
    images.txt      image_path<TAB>class_index        (paths relative to the root)
    attributes.txt  whitespace-separated floats, one class per line
    split.txt       "train: i,j,..." and "test: k,..."
    parts.txt       image_index part_index x y visible   (optional)
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from constants import (
    DATASET_MANIFESTS, IMAGES_FILE, ATTRIBUTES_FILE, SPLIT_FILE, PARTS_FILE, IMAGES_DIR,
    RESIZE_SIDE, CROP_SIDE, MAX_CROP_OFFSET, EVAL_CROP_OFFSET, PIXEL_MEAN, PIXEL_STD,
)
from models.bundles import ClassSplit, DatasetBundle, FileImages, InMemoryImages, PartAnnotations
from models.enums import PreprocessMode
from utils.errors import (
    DatasetFormatError, MissingSplitFileError, UnknownClassError, ZeroAttributeRowError,
)
from utils.validation import (
    validate_attribute_matrix, validate_click, validate_manifest_counts, validate_split,
)

logger = logging.getLogger(__name__)


# ==========================================
# ATTRIBUTES
# ==========================================

def normalize_attribute_rows(matrix: np.ndarray) -> np.ndarray:
    """Scale every class row to unit Euclidean norm.

    Raises ZeroAttributeRowError naming the first all-zero row.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero_rows = np.flatnonzero(norms == 0)
    if zero_rows.size:
        raise ZeroAttributeRowError(int(zero_rows[0]))
    return matrix / norms[:, None]


# ==========================================
# LOADING
# ==========================================

def _read_split(path: Path) -> ClassSplit:
    if not path.exists():
        raise MissingSplitFileError(f"Split file not found: {path}")
    sections: Dict[str, List[int]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, values = line.partition(":")
        key = key.strip().lower()
        if key not in ("train", "test"):
            raise DatasetFormatError(f"Unexpected split section '{key}' in {path}")
        sections[key] = [int(v) for v in values.replace(" ", "").split(",") if v]
    if "train" not in sections or "test" not in sections:
        raise DatasetFormatError(f"Split file {path} must contain train and test lines")

    ok, error = validate_split(sections["train"], sections["test"])
    if not ok:
        raise DatasetFormatError(error)
    return ClassSplit(np.asarray(sections["train"]), np.asarray(sections["test"]))


def _read_manifest(path: Path, root: Path) -> Tuple[List[Path], np.ndarray]:
    if not path.exists():
        raise DatasetFormatError(f"Image manifest not found: {path}")
    paths, labels = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            image_path, label = line.split("\t")
            labels.append(int(label))
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: expected 'image_path<TAB>class_index'")
        paths.append(root / image_path)
    return paths, np.asarray(labels, dtype=np.int64)


def _read_parts(path: Path, images: FileImages, num_parts: Optional[int]) -> PartAnnotations:
    table = np.loadtxt(path, ndmin=2)
    if table.shape[1] != 5:
        raise DatasetFormatError(f"{path}: expected 'image_index part_index x y visible' per line")
    image_index = table[:, 0].astype(np.int64)
    visible = table[:, 4] > 0
    if image_index.size and (image_index.min() < 0 or image_index.max() >= len(images)):
        raise DatasetFormatError(f"{path}: part click references a missing image")

    sizes = {}
    for row in np.flatnonzero(visible):
        i = int(image_index[row])
        if i not in sizes:
            sizes[i] = images.size(i)
        ok, error = validate_click(table[row, 2], table[row, 3], *sizes[i])
        if not ok:
            raise DatasetFormatError(f"{path}: image {i}: {error}")

    part_index = table[:, 1].astype(np.int64)
    count = num_parts or (int(part_index.max()) + 1 if part_index.size else 0)
    return PartAnnotations(
        num_parts=count, image_index=image_index, part_index=part_index,
        xy=table[:, 2:4], visible=visible,
    )


def load_zsl_dataset(root: Union[str, Path], name: str) -> DatasetBundle:
    """Load a dataset root in the documented text layout."""
    root = Path(root)
    split = _read_split(root / SPLIT_FILE)
    paths, labels = _read_manifest(root / IMAGES_FILE, root)

    attributes_path = root / ATTRIBUTES_FILE
    if not attributes_path.exists():
        raise DatasetFormatError(f"Attribute file not found: {attributes_path}")
    raw = np.loadtxt(attributes_path, ndmin=2)
    ok, error = validate_attribute_matrix(raw)
    if not ok:
        raise DatasetFormatError(error)
    attributes = normalize_attribute_rows(raw)

    known = set(split.all_classes.tolist())
    unknown = sorted(set(np.unique(labels).tolist()) - known)
    if unknown:
        raise UnknownClassError(f"Labels reference classes outside the split: {unknown[:10]}")
    if split.all_classes.max() >= attributes.shape[0]:
        raise UnknownClassError(
            f"Split references class {int(split.all_classes.max())} but only {attributes.shape[0]} attribute rows exist"
        )

    ok, error = validate_manifest_counts(
        name, len(paths), attributes.shape[1], attributes.shape[0],
        len(split.train_classes), len(split.test_classes),
    )
    if not ok:
        raise DatasetFormatError(error)

    images = FileImages(paths)
    parts = None
    if (root / PARTS_FILE).exists():
        manifest = DATASET_MANIFESTS.get(name.upper(), {})
        parts = _read_parts(root / PARTS_FILE, images, manifest.get('parts') or None)

    logger.info(
        f"Loaded {name}: {len(paths)} images, {attributes.shape[0]} classes, "
        f"{attributes.shape[1]} attributes, {len(split.train_classes)}/{len(split.test_classes)} train/test"
    )
    return DatasetBundle(
        name=name, images=images, labels=labels, attributes=attributes, split=split,
        parts=parts, raw_attributes=raw,
    )


def write_zsl_dataset(bundle: DatasetBundle, root: Union[str, Path]) -> Path:
    """Write a bundle in the on-disk layout read by load_zsl_dataset."""
    root = Path(root)
    (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)

    lines = []
    for i in range(len(bundle.images)):
        rel = f"{IMAGES_DIR}/{i:06d}.png"
        Image.fromarray(np.asarray(bundle.images[i], dtype=np.uint8)).save(root / rel)
        lines.append(f"{rel}\t{int(bundle.labels[i])}")
    (root / IMAGES_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")

    raw = bundle.raw_attributes if bundle.raw_attributes is not None else bundle.attributes
    np.savetxt(root / ATTRIBUTES_FILE, raw, fmt="%.8g")

    split_text = (
        "train: " + ",".join(str(c) for c in bundle.split.train_classes) + "\n"
        "test: " + ",".join(str(c) for c in bundle.split.test_classes) + "\n"
    )
    (root / SPLIT_FILE).write_text(split_text, encoding="utf-8")

    if bundle.parts is not None:
        p = bundle.parts
        table = np.column_stack([p.image_index, p.part_index, p.xy, p.visible.astype(int)])
        np.savetxt(root / PARTS_FILE, table, fmt=["%d", "%d", "%.2f", "%.2f", "%d"])

    logger.info(f"Wrote dataset {bundle.name} to {root}")
    return root


# ==========================================
# PREPROCESSING
# ==========================================

def resize_image(image: np.ndarray) -> np.ndarray:
    """Resize to RESIZE_SIDE x RESIZE_SIDE; images already at that size pass through untouched."""
    image = np.asarray(image, dtype=np.uint8)
    if image.shape[0] == RESIZE_SIDE and image.shape[1] == RESIZE_SIDE:
        return image
    resized = Image.fromarray(image).convert("RGB").resize((RESIZE_SIDE, RESIZE_SIDE), Image.BILINEAR)
    return np.asarray(resized, dtype=np.uint8)


def crop_offset(mode: Union[str, PreprocessMode], rng: Optional[np.random.Generator] = None) -> Tuple[int, int]:
    """(top, left) of the CROP_SIDE crop inside the resized image."""
    if PreprocessMode(mode) == PreprocessMode.EVAL:
        return EVAL_CROP_OFFSET
    rng = rng if rng is not None else np.random.default_rng()
    top, left = rng.integers(0, MAX_CROP_OFFSET + 1, size=2)
    return int(top), int(left)


def normalize_pixels(crop: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float32 3xHxW in [-1, 1]."""
    x = crop.astype(np.float32) / 255.0
    x = (x - PIXEL_MEAN) / PIXEL_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def preprocess(image: np.ndarray, mode: Union[str, PreprocessMode] = PreprocessMode.EVAL,
               rng: Optional[np.random.Generator] = None,
               offset: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Resize to 128, crop 112 (random in train mode, centred in eval) and scale to [-1, 1]."""
    resized = resize_image(image)
    top, left = offset if offset is not None else crop_offset(mode, rng)
    crop = resized[top:top + CROP_SIDE, left:left + CROP_SIDE]
    return normalize_pixels(crop)


def preprocess_batch(bundle: DatasetBundle, indices: Sequence[int],
                     mode: Union[str, PreprocessMode] = PreprocessMode.EVAL,
                     rng: Optional[np.random.Generator] = None,
                     cache: Optional[Dict[int, np.ndarray]] = None) -> torch.Tensor:
    """Stack preprocessed images into a [B, 3, 112, 112] float tensor."""
    arrays = []
    for i in indices:
        i = int(i)
        if cache is not None:
            if i not in cache:
                cache[i] = resize_image(bundle.images[i])
            image = cache[i]
        else:
            image = bundle.images[i]
        arrays.append(preprocess(image, mode, rng))
    return torch.from_numpy(np.stack(arrays))
