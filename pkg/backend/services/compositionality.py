# backend/services/compositionality.py
"""
Tree reconstruction error (TRE) of frozen features against class attributes.

Each attribute gets a learnable vector; a datapoint's composition is the sum
of the vectors of its class's active attributes, scored by cosine distance.
The TRE ratio divides the error under the true attributes by the error under
density-matched random attribute matrices.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from constants import REFERENCE_TRE_ZSL_PEARSON, TRE_DENOMINATOR_EPS
from models.models import TREBudget, TREReport
from utils.errors import DegenerateTaskError, InputShapeError
from utils.statistics import Correlation, correlation

logger = logging.getLogger(__name__)


# ==========================================
# ATTRIBUTES
# ==========================================

@dataclass
class BinarizedAttributes:
    matrix: np.ndarray
    thresholds: np.ndarray
    constant_columns: List[int] = field(default_factory=list)

    @property
    def flags(self) -> List[str]:
        return [f"constant_attribute:{c}" for c in self.constant_columns]


def binarize_attributes(matrix: np.ndarray, train_classes: Optional[Sequence[int]] = None) -> BinarizedAttributes:
    """Threshold each attribute at its train-class mean (strict >); constant columns become all zero."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows = matrix if train_classes is None else matrix[np.asarray(train_classes)]
    thresholds = rows.mean(axis=0)
    binary = matrix > thresholds[None, :]
    constant = np.flatnonzero(np.ptp(rows, axis=0) == 0).tolist()
    if constant:
        binary[:, constant] = False
        logger.warning(f"[TRE] {len(constant)} attributes constant over the train classes: {constant}")
    return BinarizedAttributes(matrix=binary, thresholds=thresholds, constant_columns=constant)


def datapoint_attributes(class_matrix: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """D(x) for every datapoint as a boolean [N, A] matrix."""
    return np.asarray(class_matrix, dtype=bool)[np.asarray(labels, dtype=np.int64)]


def density_matched_random(class_matrix: np.ndarray, seed: int) -> np.ndarray:
    """Each column shuffled over classes independently; column densities are kept exactly."""
    matrix = np.asarray(class_matrix, dtype=bool)
    rng = np.random.default_rng(seed)
    return np.stack([rng.permutation(matrix[:, a]) for a in range(matrix.shape[1])], axis=1)


# ==========================================
# MODEL
# ==========================================

class TREModel(nn.Module):
    """One embedding per attribute; compositions are unweighted sums."""

    def __init__(self, num_attributes: int, feature_dim: int, init_std: float = 0.01, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.eta = nn.Parameter(torch.randn(num_attributes, feature_dim, generator=generator, dtype=dtype) * init_std)

    def compose(self, attributes: torch.Tensor) -> torch.Tensor:
        return attributes.to(self.eta.dtype) @ self.eta


def tre_objective(eta: torch.Tensor, features: torch.Tensor, attributes: torch.Tensor) -> torch.Tensor:
    """Mean cosine distance between features and their attribute compositions."""
    composed = attributes.to(eta.dtype) @ eta
    return (1.0 - F.cosine_similarity(features.to(eta.dtype), composed, dim=1)).mean()


def _prepare(features, attributes) -> Tuple[torch.Tensor, torch.Tensor, int]:
    features = torch.as_tensor(features)
    attributes = np.asarray(attributes, dtype=bool)
    if features.shape[0] != attributes.shape[0]:
        raise InputShapeError(f"{features.shape[0]} feature rows but {attributes.shape[0]} attribute rows")
    keep = attributes.any(axis=1)
    excluded = int((~keep).sum())
    idx = torch.as_tensor(np.flatnonzero(keep))
    return features[idx], torch.as_tensor(attributes[keep]), excluded


@dataclass
class TREFit:
    model: TREModel
    initial: float
    final: float
    steps: int
    excluded: int
    history: List[float] = field(default_factory=list)


def fit_tre(features, attributes, budget: Optional[TREBudget] = None, seed: Optional[int] = None) -> TREFit:
    """Minimise TRE over the attribute embeddings; datapoints with no active attribute are excluded."""
    budget = budget or TREBudget()
    seed = budget.seed if seed is None else seed
    x, d, excluded = _prepare(features, attributes)
    if x.shape[0] == 0:
        raise DegenerateTaskError("Every datapoint has an empty attribute set")
    if excluded:
        logger.warning(f"[TRE] {excluded} datapoints excluded: no active attribute")

    dtype = x.dtype if x.dtype == torch.float64 else torch.float32
    x = x.to(dtype)
    model = TREModel(d.shape[1], x.shape[1], budget.init_std, seed, dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=budget.lr)

    with torch.no_grad():
        best = tre_objective(model.eta, x, d).item()
    initial, best_eta = best, model.eta.detach().clone()
    history = [best]
    step = 0
    for step in range(1, budget.steps + 1):
        loss = tre_objective(model.eta, x, d)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            value = tre_objective(model.eta, x, d).item()
        if value < best:
            best, best_eta = value, model.eta.detach().clone()
        history.append(best)
        if step >= budget.patience:
            before = history[-budget.patience - 1]
            if (before - best) / max(abs(before), 1e-12) < budget.tolerance:
                break

    with torch.no_grad():
        model.eta.copy_(best_eta)
    logger.debug(f"[TRE] fit {step} steps: {initial:.4f} -> {best:.4f}")
    return TREFit(model=model, initial=initial, final=best, steps=step, excluded=excluded, history=history)


def tre(model: TREModel, features, attributes) -> float:
    """Mean per-datapoint cosine distance under a fitted model."""
    x, d, _ = _prepare(features, attributes)
    if x.shape[0] == 0:
        raise DegenerateTaskError("Every datapoint has an empty attribute set")
    with torch.no_grad():
        return float(tre_objective(model.eta, x, d).item())


# ==========================================
# RATIO
# ==========================================

def _safe_ratio(numerator: float, denominator: float, flags: List[str], name: str) -> float:
    if abs(denominator) < TRE_DENOMINATOR_EPS:
        flags.append(f"{name}_denominator_near_zero")
        return float("nan")
    return numerator / denominator


def tre_ratio(features_train, labels_train: Sequence[int], features_test, labels_test: Sequence[int],
              class_attributes: np.ndarray, budget: Optional[TREBudget] = None,
              random_matrices: Optional[List[np.ndarray]] = None) -> TREReport:
    """TRE under the true binarized attributes over the mean TRE under random matrices.

    Every fit uses the train features, the same budget and the same seed. The
    headline ratio is on test features; the train ratio is reported alongside.
    """
    budget = budget or TREBudget()
    class_attributes = np.asarray(class_attributes, dtype=bool)
    seeds: List[int] = []
    if random_matrices is None:
        seeds = [budget.seed + 1 + k for k in range(budget.draws)]
        random_matrices = [density_matched_random(class_attributes, s) for s in seeds]

    true_fit = fit_tre(features_train, datapoint_attributes(class_attributes, labels_train), budget)
    tre_train = tre(true_fit.model, features_train, datapoint_attributes(class_attributes, labels_train))
    tre_test = tre(true_fit.model, features_test, datapoint_attributes(class_attributes, labels_test))
    excluded: Dict[str, int] = {
        "train": true_fit.excluded,
        "test": int((~datapoint_attributes(class_attributes, labels_test).any(axis=1)).sum()),
    }

    random_train, random_test = [], []
    for k, matrix in enumerate(random_matrices):
        fit = fit_tre(features_train, datapoint_attributes(matrix, labels_train), budget)
        random_train.append(tre(fit.model, features_train, datapoint_attributes(matrix, labels_train)))
        random_test.append(tre(fit.model, features_test, datapoint_attributes(matrix, labels_test)))
        excluded[f"random{k}_train"] = fit.excluded

    flags: List[str] = []
    mean_train, mean_test = float(np.mean(random_train)), float(np.mean(random_test))
    report = TREReport(
        tre_train=tre_train, tre_test=tre_test,
        ratio=_safe_ratio(tre_test, mean_test, flags, "test"),
        ratio_train=_safe_ratio(tre_train, mean_train, flags, "train"),
        tre_random_train=mean_train, tre_random_test=mean_test,
        random_matrix_seeds=seeds, fit_seed=budget.seed, excluded=excluded, flags=flags,
    )
    logger.info(
        f"[TRE] ratio {report.ratio:.4f} (train {report.ratio_train:.4f}); "
        f"TRE {tre_test:.4f} vs random {mean_test:.4f} over {len(random_matrices)} draws"
    )
    return report


def tre_zsl_correlation(ratios: Sequence[float], zsl_top1: Sequence[float],
                        dataset: Optional[str] = None) -> Correlation:
    """Pearson r between TRE ratio and ZSL accuracy across variants of one dataset."""
    result = correlation(ratios, zsl_top1, method="pearson")
    reference = REFERENCE_TRE_ZSL_PEARSON.get((dataset or "").upper())
    suffix = f", reference {reference:.2f}" if reference is not None else ""
    logger.info(f"[TRE] ratio vs ZSL: r={result.r:.3f} (p={result.p_value:.3g}, n={result.n}{suffix})")
    return result
