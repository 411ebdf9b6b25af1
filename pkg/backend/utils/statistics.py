# backend/utils/statistics.py
"""Correlation helpers shared by the locality and compositionality analyses."""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from utils.errors import DegenerateSeriesError

logger = logging.getLogger(__name__)


@dataclass
class Correlation:
    r: float
    p_value: float
    n: int
    method: str


def correlation(x: Sequence[float], y: Sequence[float], method: str = "pearson",
                min_points: int = 3) -> Correlation:
    """Pearson or Spearman correlation with its two-sided p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DegenerateSeriesError(f"Series lengths differ: {x.shape} vs {y.shape}")
    if x.size < min_points:
        raise DegenerateSeriesError(f"Need at least {min_points} paired points, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateSeriesError("Zero variance in one of the series")

    if method == "pearson":
        r, p = stats.pearsonr(x, y)
    elif method == "spearman":
        r, p = stats.spearmanr(x, y)
    else:
        raise ValueError(f"Unknown correlation method: {method}")
    return Correlation(r=float(r), p_value=float(p), n=int(x.size), method=method)
