"""
Shared fixtures: a tiny deterministic synthetic dataset and small budgets.
"""
import os
import sys

import numpy as np
import pytest

# ---------------------------------------------------------------------------
# Path setup – make sure 'backend' is importable
# ---------------------------------------------------------------------------
backend_path = os.path.join(os.path.dirname(__file__), "..", "backend")
sys.path.insert(0, os.path.abspath(backend_path))

from models.models import RunConfig, SyntheticSpec  # noqa: E402
from services.synthetic import generate_synthetic  # noqa: E402

# 8 unique classes over 6 glyph attributes
TINY_MATRIX = [
    [1, 1, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 0],
    [0, 0, 1, 1, 0, 0],
    [0, 0, 0, 1, 1, 0],
    [0, 0, 0, 0, 1, 1],
    [1, 0, 0, 0, 0, 1],
    [1, 0, 1, 0, 1, 0],
    [0, 1, 0, 1, 0, 1],
]


def tiny_spec(**overrides) -> SyntheticSpec:
    values = dict(
        num_classes=8, num_attributes=6, images_per_class=6, num_test_classes=3,
        class_attribute_matrix=TINY_MATRIX, seed=0,
    )
    values.update(overrides)
    return SyntheticSpec(**values)


@pytest.fixture(scope="session")
def tiny_bundle():
    """48 images, 5 seen / 3 unseen classes, glyph part annotations."""
    return generate_synthetic(tiny_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_run_config(tmp_path) -> RunConfig:
    """Run config that trains in seconds on CPU."""
    return RunConfig.model_validate({
        "dataset": "synthetic",
        "data_root": str(tmp_path / "data"),
        "encoder_width": 0.125,
        "training": {"steps": 3, "batch_size": 8, "log_every": 1},
        "protonet": {"steps": 5, "batch_size": 16, "embed_dim": 16, "hidden_dim": 16},
        "probes": {"steps": 5, "batch_size": 8},
        "mine": {"steps": 5, "batch_size": 8, "hidden_dim": 16},
        "tre": {"steps": 20, "draws": 2},
        "synthetic": tiny_spec().model_dump(),
        "out_dir": str(tmp_path / "runs"),
    })
