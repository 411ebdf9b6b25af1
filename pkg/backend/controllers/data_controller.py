# backend/controllers/data_controller.py
"""Controller for gen-synthetic."""
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from core.container import ServiceContainer
from models.models import RunConfig
from services.datasets import write_zsl_dataset
from services.synthetic import generate_synthetic

logger = logging.getLogger(__name__)


def gen_synthetic_command(config: RunConfig, container: ServiceContainer,
                          out: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Render the synthetic bundle and write it where `load_dataset` will find it."""
    bundle = generate_synthetic(config.synthetic)
    root = Path(out) if out else container.dataset_root(config)
    if root is None:
        root = Path(container.settings.data_root) / "synthetic"
    write_zsl_dataset(bundle, root)
    return {
        "root": str(root),
        "images": len(bundle.images),
        "classes": bundle.num_classes,
        "attributes": bundle.num_attributes,
        "train_classes": bundle.split.train_classes.tolist(),
        "test_classes": bundle.split.test_classes.tolist(),
    }
