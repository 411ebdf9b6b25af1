"""
Tests for dataset loading, attribute normalization and preprocessing.
"""
import numpy as np
import pytest
import torch
from PIL import Image

from constants import CROP_SIDE, EVAL_CROP_OFFSET, RESIZE_SIDE
from models.bundles import ClassSplit, DatasetBundle, InMemoryImages
from services.datasets import (
    crop_offset, load_zsl_dataset, normalize_attribute_rows, preprocess, preprocess_batch, write_zsl_dataset,
)
from utils.errors import (
    DatasetFormatError, MissingSplitFileError, UnknownClassError, ZeroAttributeRowError,
)


# =====================================================================
# Attribute normalization
# =====================================================================

class TestNormalizeAttributes:

    def test_rows_have_unit_norm(self, rng):
        matrix = rng.random((7, 5)) + 0.1
        normalized = normalize_attribute_rows(matrix)
        np.testing.assert_allclose(np.linalg.norm(normalized, axis=1), 1.0, atol=1e-6)

    def test_direction_is_preserved(self):
        normalized = normalize_attribute_rows(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(normalized, [[0.6, 0.8]])

    def test_zero_row_is_named(self):
        with pytest.raises(ZeroAttributeRowError) as exc:
            normalize_attribute_rows(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]))
        assert exc.value.row == 1


# =====================================================================
# On-disk layout
# =====================================================================

def _write_minimal(root, labels, split_text, attributes):
    images = [np.full((20, 30, 3), 10 * i, dtype=np.uint8) for i in range(len(labels))]
    bundle_dir = root / "images"
    bundle_dir.mkdir(parents=True)
    lines = []
    for i, image in enumerate(images):
        Image.fromarray(image).save(bundle_dir / f"{i}.png")
        lines.append(f"images/{i}.png\t{labels[i]}")
    (root / "images.txt").write_text("\n".join(lines) + "\n")
    np.savetxt(root / "attributes.txt", np.asarray(attributes, dtype=float))
    if split_text is not None:
        (root / "split.txt").write_text(split_text)


class TestLoadDataset:

    def test_round_trip_of_synthetic_bundle(self, tiny_bundle, tmp_path):
        root = write_zsl_dataset(tiny_bundle, tmp_path / "synthetic")
        loaded = load_zsl_dataset(root, "synthetic")

        assert len(loaded.images) == len(tiny_bundle.images)
        np.testing.assert_array_equal(loaded.labels, tiny_bundle.labels)
        np.testing.assert_allclose(loaded.attributes, tiny_bundle.attributes, atol=1e-6)
        np.testing.assert_array_equal(loaded.split.test_classes, tiny_bundle.split.test_classes)
        np.testing.assert_array_equal(loaded.images[5], tiny_bundle.images[5])
        assert loaded.parts is not None
        assert loaded.parts.visible.sum() == tiny_bundle.parts.visible.sum()

    def test_missing_split_file(self, tmp_path):
        _write_minimal(tmp_path, [0, 1], None, [[1, 0], [0, 1]])
        with pytest.raises(MissingSplitFileError):
            load_zsl_dataset(tmp_path, "toy")

    def test_label_outside_split(self, tmp_path):
        _write_minimal(tmp_path, [0, 2], "train: 0\ntest: 1\n", [[1, 0], [0, 1], [1, 1]])
        with pytest.raises(UnknownClassError):
            load_zsl_dataset(tmp_path, "toy")

    def test_overlapping_split(self, tmp_path):
        _write_minimal(tmp_path, [0, 1], "train: 0,1\ntest: 1\n", [[1, 0], [0, 1]])
        with pytest.raises(DatasetFormatError):
            load_zsl_dataset(tmp_path, "toy")

    def test_zero_attribute_row(self, tmp_path):
        _write_minimal(tmp_path, [0, 1], "train: 0\ntest: 1\n", [[1, 0], [0, 0]])
        with pytest.raises(ZeroAttributeRowError):
            load_zsl_dataset(tmp_path, "toy")

    def test_manifest_counts_checked_for_known_names(self, tmp_path):
        _write_minimal(tmp_path, [0, 1], "train: 0\ntest: 1\n", [[1, 0], [0, 1]])
        with pytest.raises(DatasetFormatError, match="manifest"):
            load_zsl_dataset(tmp_path, "cub")

    def test_unseen_split_indices(self, tiny_bundle):
        test_labels = set(tiny_bundle.labels[tiny_bundle.test_indices].tolist())
        assert test_labels == set(tiny_bundle.split.test_classes.tolist())
        assert not test_labels & set(tiny_bundle.labels[tiny_bundle.train_indices].tolist())


def test_bundle_rejects_unknown_labels():
    split = ClassSplit(np.array([0]), np.array([1]))
    with pytest.raises(UnknownClassError):
        DatasetBundle(name="toy", images=InMemoryImages([]), labels=np.array([3]),
                      attributes=np.eye(4), split=split)


# =====================================================================
# Preprocessing
# =====================================================================

class TestPreprocess:

    def test_output_shape_and_range(self, rng):
        image = rng.integers(0, 256, size=(200, 150, 3), dtype=np.uint8)
        x = preprocess(image, "train", rng)
        assert x.shape == (3, CROP_SIDE, CROP_SIDE)
        assert x.dtype == np.float32
        assert x.min() >= -1.0 and x.max() <= 1.0

    def test_extreme_pixels_map_to_range_ends(self):
        black = preprocess(np.zeros((RESIZE_SIDE, RESIZE_SIDE, 3), dtype=np.uint8))
        white = preprocess(np.full((RESIZE_SIDE, RESIZE_SIDE, 3), 255, dtype=np.uint8))
        assert np.all(black == -1.0)
        assert np.all(white == 1.0)

    def test_eval_crop_is_centred(self):
        image = np.zeros((RESIZE_SIDE, RESIZE_SIDE, 3), dtype=np.uint8)
        top, left = EVAL_CROP_OFFSET
        image[top, left] = 255
        x = preprocess(image, "eval")
        assert x[0, 0, 0] == 1.0
        assert crop_offset("eval") == EVAL_CROP_OFFSET

    def test_train_crop_offsets_stay_inside(self, rng):
        offsets = np.array([crop_offset("train", rng) for _ in range(200)])
        assert offsets.min() >= 0
        assert offsets.max() <= RESIZE_SIDE - CROP_SIDE

    def test_batch_with_cache(self, tiny_bundle):
        cache = {}
        batch = preprocess_batch(tiny_bundle, [0, 1, 2], "eval", cache=cache)
        assert isinstance(batch, torch.Tensor)
        assert batch.shape == (3, 3, CROP_SIDE, CROP_SIDE)
        assert set(cache) == {0, 1, 2}
        torch.testing.assert_close(batch, preprocess_batch(tiny_bundle, [0, 1, 2], "eval"))
