# backend/controllers/mi_controller.py
"""Controllers for mi-train, mi-viz and mi-study."""
import logging
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from core.container import ServiceContainer
from models.enums import PreprocessMode
from models.models import RunConfig
from services.datasets import preprocess_batch
from services.encoders import extract_features, freeze_encoder
from services.mi_analysis import (
    StatisticsNetwork, pmi_heatmap, ratio_correlation_study, render_heatmap, sample_cross_class_pairs, train_mine,
)
from utils.errors import ConfigError
from utils.run_logger import RunLogger

logger = logging.getLogger(__name__)

STATNET_FILE = "statnet.pt"


def _statnet_path(config: RunConfig, container: ServiceContainer) -> Path:
    return container.run_dir(config) / STATNET_FILE


def save_statnet(statnet: StatisticsNetwork, path: Path, global_dim: int, local_dim: int, hidden_dim: int) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "global_dim": global_dim, "local_dim": local_dim, "hidden_dim": hidden_dim,
        "steps_trained": statnet.steps_trained, "state_dict": statnet.state_dict(),
    }, path)
    return path


def load_statnet(path: Path) -> StatisticsNetwork:
    if not path.exists():
        raise ConfigError(f"Statistics network not found: {path}; run `mi-train` first")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    statnet = StatisticsNetwork(payload["global_dim"], payload["local_dim"], payload["hidden_dim"])
    statnet.load_state_dict(payload["state_dict"])
    statnet.steps_trained = int(payload["steps_trained"])
    return statnet.eval()


def mi_train_command(config: RunConfig, container: ServiceContainer,
                     checkpoint: Optional[str] = None) -> Dict[str, Any]:
    started = time.time()
    data = container.load_dataset(config)
    encoder = freeze_encoder(container.load_encoder(config, checkpoint))
    statnet = train_mine(None, encoder, data, config.mine)
    path = save_statnet(statnet, _statnet_path(config, container), encoder.spec.global_dim,
                        encoder.local_channels, config.mine.hidden_dim)
    RunLogger(container.run_dir(config)).write_metadata({"mine": config.mine.model_dump(), "estimator": "dv"})
    container.record(config, {"mine_steps": float(statnet.steps_trained)}, started)
    return {"statnet": str(path), "steps": statnet.steps_trained}


def mi_viz_command(config: RunConfig, container: ServiceContainer, num_pairs: int = 8,
                   checkpoint: Optional[str] = None) -> Dict[str, Any]:
    """Heatmaps for seeded cross-class test pairs: overlay, raw grid and score sidecar per pair."""
    data = container.load_dataset(config)
    encoder = freeze_encoder(container.load_encoder(config, checkpoint))
    statnet = load_statnet(_statnet_path(config, container))
    rng = np.random.default_rng(config.seed)
    pairs = sample_cross_class_pairs(data.labels, data.test_indices, num_pairs, rng)
    used = np.unique(pairs)
    features = extract_features(encoder, data, used)
    row_of = {int(img): row for row, img in enumerate(used)}
    crops = preprocess_batch(data, used, PreprocessMode.EVAL).numpy()
    crops = ((crops.transpose(0, 2, 3, 1) + 1.0) / 2.0).clip(0.0, 1.0)

    out_dir = container.run_dir(config) / "heatmaps"
    written = []
    for a, b in pairs:
        ra, rb = row_of[int(a)], row_of[int(b)]
        heatmap = pmi_heatmap(statnet, features.global_features[ra], features.local_features[rb], a, b)
        written.append({k: str(v) for k, v in render_heatmap(heatmap, crops[rb], out_dir).items()})
    logger.info(f"[MINE] wrote {len(written)} heatmaps to {out_dir}")
    return {"out_dir": str(out_dir), "heatmaps": written}


def mi_study_command(config: RunConfig, container: ServiceContainer, n_pairs: int,
                     checkpoint: Optional[str] = None) -> Dict[str, Any]:
    started = time.time()
    data = container.load_dataset(config)
    encoder = freeze_encoder(container.load_encoder(config, checkpoint))
    statnet = load_statnet(_statnet_path(config, container))
    out_csv = container.run_dir(config) / "ratio_study.csv"
    study = ratio_correlation_study(statnet, encoder, data, n_pairs, config.seed, out_csv)
    metrics = {"ratio_r_attr": study.r_attr, "ratio_r_ssim": study.r_ssim}
    container.record(config, metrics, started)
    return {"csv": str(out_csv), "p_attr": study.p_attr, "p_ssim": study.p_ssim,
            "num_pairs": study.num_pairs, "dropped": study.dropped, **metrics}
