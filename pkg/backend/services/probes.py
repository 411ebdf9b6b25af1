# backend/services/probes.py
"""
Linear part probes on frozen local features and the parts-F1 locality score.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import f1_score

from constants import REFERENCE_PARTS_ZSL_PEARSON
from models.bundles import PartMaps
from models.models import F1Report, FeatureGeometry, ProbeConfig
from services.encoders import parameter_checksum
from utils.errors import GeometryMismatchError, ZFSViolationError
from utils.statistics import Correlation, correlation

logger = logging.getLogger(__name__)


class PartProbeSet(nn.Module):
    """One linear map per part, applied at every location as a 1x1 convolution."""

    def __init__(self, channels: int, num_parts: int, geometry: Optional[FeatureGeometry] = None):
        super().__init__()
        self.linear = nn.Conv2d(channels, num_parts, kernel_size=1)
        self.geometry = geometry

    @property
    def num_parts(self) -> int:
        return self.linear.out_channels

    def forward(self, local_features: torch.Tensor) -> torch.Tensor:
        return self.linear(local_features)


def _check_aligned(local_features: torch.Tensor, maps: PartMaps) -> None:
    n, _, h, w = local_features.shape
    if maps.maps.shape[0] != n or maps.spatial != (h, w):
        raise GeometryMismatchError(
            f"Part maps {tuple(maps.maps.shape)} do not align with local features {tuple(local_features.shape)}"
        )
    if maps.geometry is not None and (maps.geometry.height, maps.geometry.width) != (h, w):
        raise GeometryMismatchError(f"Maps were projected for a {maps.geometry.grid} grid, features are {(h, w)}")


def inverse_prevalence(maps: np.ndarray) -> np.ndarray:
    """Per-part negatives/positives; parts with no positives get weight 1."""
    counts = maps.reshape(maps.shape[0], maps.shape[1], -1)
    positives = counts.sum(axis=(0, 2)).astype(np.float64)
    total = counts.shape[0] * counts.shape[2]
    return np.where(positives > 0, (total - positives) / np.maximum(positives, 1), 1.0)


def train_part_probes(local_features: torch.Tensor, projected: PartMaps,
                      config: Optional[ProbeConfig] = None,
                      encoder: Optional[nn.Module] = None) -> PartProbeSet:
    """Fit every part probe on detached features; the encoder is never touched."""
    config = config or ProbeConfig()
    features = local_features.detach().float()
    _check_aligned(features, projected)
    checksum = parameter_checksum(encoder) if encoder is not None else None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        probes = PartProbeSet(features.shape[1], projected.num_parts, projected.geometry)
        generator = torch.Generator().manual_seed(config.seed)

        targets = torch.as_tensor(projected.maps, dtype=torch.float32)
        pos_weight = torch.as_tensor(inverse_prevalence(projected.maps), dtype=torch.float32)
        optimizer = torch.optim.Adam(probes.parameters(), lr=config.lr)
        n = features.shape[0]
        batch = min(config.batch_size, n)

        probes.train()
        for step in range(config.steps):
            idx = torch.randperm(n, generator=generator)[:batch]
            logits = probes(features[idx]).permute(0, 2, 3, 1)
            loss = F.binary_cross_entropy_with_logits(
                logits, targets[idx].permute(0, 2, 3, 1), pos_weight=pos_weight,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        probes.eval()

    if checksum is not None and parameter_checksum(encoder) != checksum:
        raise ZFSViolationError("Encoder parameters changed during probe training")
    logger.info(f"[Probes] trained {projected.num_parts} probes on {n} images, final loss {loss.item():.4f}")
    return probes


def probe_predictions(probes: PartProbeSet, local_features: torch.Tensor, threshold: float) -> np.ndarray:
    """Boolean [N, P, H, W] predictions at the given probability threshold."""
    with torch.no_grad():
        probs = torch.sigmoid(probes(local_features.detach().float()))
    return (probs > threshold).numpy()


def f1_from_predictions(predicted: np.ndarray, maps: np.ndarray) -> Tuple[List[float], List[int]]:
    """Per-part F1 over all (image, location) pairs; parts without positives score 0 and are flagged."""
    per_part, flagged = [], []
    for p in range(maps.shape[1]):
        y_true = maps[:, p].ravel()
        if not y_true.any():
            flagged.append(p)
            per_part.append(0.0)
            continue
        per_part.append(float(f1_score(y_true, predicted[:, p].ravel(), zero_division=0)))
    return per_part, flagged


def parts_f1(probes: PartProbeSet, local_features: torch.Tensor, projected: PartMaps,
             threshold: Optional[float] = None) -> F1Report:
    threshold = ProbeConfig().threshold if threshold is None else threshold
    _check_aligned(local_features, projected)
    predicted = probe_predictions(probes, local_features, threshold)
    per_part, flagged = f1_from_predictions(predicted, projected.maps)
    if flagged:
        logger.warning(f"[Probes] parts without positives in evaluation: {flagged}")
    report = F1Report(mean_f1=float(np.mean(per_part)), per_part_f1=per_part,
                      flagged_parts=flagged, threshold=threshold)
    logger.info(f"[Probes] parts F1 {report.mean_f1:.3f}")
    return report


def format_f1_table(report: F1Report, part_names: Optional[Sequence[str]] = None) -> str:
    names = list(part_names) if part_names else [f"part{p}" for p in range(len(report.per_part_f1))]
    lines = ["part\tf1\tflagged"]
    for p, (name, value) in enumerate(zip(names, report.per_part_f1)):
        lines.append(f"{name}\t{value:.4f}\t{'yes' if p in report.flagged_parts else ''}")
    lines.append(f"mean\t{report.mean_f1:.4f}\t")
    return "\n".join(lines)


def locality_zsl_correlation(parts_f1_values: Sequence[float], zsl_top1: Sequence[float]) -> Correlation:
    """Pearson r between parts F1 and ZSL accuracy across model variants."""
    result = correlation(parts_f1_values, zsl_top1, method="pearson")
    logger.info(f"[Probes] locality vs ZSL: r={result.r:.3f} (p={result.p_value:.3g}, n={result.n}, "
                f"reference {REFERENCE_PARTS_ZSL_PEARSON:.2f})")
    return result
