# backend/core/container.py
"""
Shared wiring for the CLI commands: settings, device, datasets, checkpoints
and the results store.
"""
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch

from config.settings import Settings, settings as default_settings
from models.bundles import DatasetBundle
from models.models import RunConfig, RunRecord
from services.datasets import load_zsl_dataset
from services.encoders import Encoder, load_checkpoint
from services.results_store import ResultsStore, build_records
from services.synthetic import generate_synthetic
from services.trainer import CHECKPOINT_NAME
from utils.errors import ConfigError
from utils.helpers import generate_run_id

logger = logging.getLogger(__name__)


class ServiceContainer:
    """Centralized wiring for shared services."""

    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or default_settings
        self.results_store: Optional[ResultsStore] = None
        self._datasets: Dict[str, DatasetBundle] = {}
        self._started = False

    def start(self) -> None:
        """Create the results store and apply thread settings; later calls are no-ops."""
        if self._started:
            return
        results_dir = Path(self.settings.results_dir)
        results_dir.mkdir(parents=True, exist_ok=True)
        self.results_store = ResultsStore(results_dir / self.settings.results_file)
        if self.settings.num_threads > 0:
            torch.set_num_threads(self.settings.num_threads)
        self._started = True
        logger.info(f"Service container initialized (results: {self.results_store.path}, device {self.device})")

    @property
    def device(self) -> torch.device:
        return torch.device(self.settings.device)

    def get_results_store(self) -> ResultsStore:
        if not self.results_store:
            raise RuntimeError("Results store not initialized")
        return self.results_store

    # ==========================================
    # DATA
    # ==========================================

    def dataset_root(self, config: RunConfig) -> Optional[Path]:
        root = config.data_root or self.settings.data_root
        return Path(root) / config.dataset if root else None

    def load_dataset(self, config: RunConfig) -> DatasetBundle:
        """On-disk dataset under the data root, or the in-memory synthetic bundle."""
        root = self.dataset_root(config)
        key = str(root) if root is not None and root.exists() else f"synthetic:{config.synthetic.model_dump_json()}"
        if key in self._datasets:
            return self._datasets[key]

        if root is not None and root.exists():
            bundle = load_zsl_dataset(root, config.dataset)
        elif config.dataset == "synthetic":
            bundle = generate_synthetic(config.synthetic)
        else:
            raise ConfigError(
                f"Dataset {config.dataset} not found (data root: {root}); set ZFS_DATA_ROOT or [data] data_root"
            )
        self._datasets[key] = bundle
        return bundle

    # ==========================================
    # RUNS
    # ==========================================

    def run_dir(self, config: RunConfig) -> Path:
        return Path(config.out_dir) / config.run_name

    def load_encoder(self, config: RunConfig, checkpoint: Optional[Union[str, Path]] = None) -> Encoder:
        return self.load_encoder_with_provenance(config, checkpoint)[0]

    def load_encoder_with_provenance(self, config: RunConfig,
                                     checkpoint: Optional[Union[str, Path]] = None) -> Tuple[Encoder, Dict[str, Any]]:
        path = Path(checkpoint) if checkpoint else self.run_dir(config) / CHECKPOINT_NAME
        if not path.exists():
            raise ConfigError(f"Checkpoint not found: {path}; run `train` first")
        encoder, provenance = load_checkpoint(path, zfs_strict=config.zfs_strict, expected_dataset=config.dataset)
        logger.info(f"Loaded encoder from {path} ({provenance.get('objective')}, seed {provenance.get('seed')})")
        return encoder, provenance

    def record(self, config: RunConfig, metrics: Dict[str, float], started: float,
               run_id: Optional[str] = None) -> List[RunRecord]:
        records = build_records(config, metrics, time.time() - started, run_id or generate_run_id())
        self.get_results_store().append(records)
        return records


container = ServiceContainer()
