# backend/services/mi_analysis.py
"""
Mutual information between global and local features.

A statistics network T(G, L) is trained to maximise the Donsker-Varadhan
bound E_joint[T] - log E_marginal[exp T]. Its scores on one image's global
vector against another image's local grid give PMI heatmaps, and the share of
heatmap mass on part cells is correlated with attribute and pixel similarity.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from constants import (
    GRAYSCALE_WEIGHTS, SSIM_DATA_RANGE, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, STUDY_PAIRS_DESK,
)
from models.bundles import DatasetBundle, PMIHeatmap
from models.enums import PreprocessMode
from models.models import MineBudget
from services.datasets import preprocess_batch
from services.encoders import extract_features, is_frozen
from services.part_maps import feature_part_maps
from utils.errors import ConfigError, InputShapeError, MIDivergenceError, ZFSViolationError
from utils.helpers import log_mean_exp
from utils.statistics import correlation

logger = logging.getLogger(__name__)


# ==========================================
# STATISTICS NETWORK AND BOUND
# ==========================================

class StatisticsNetwork(nn.Module):
    """T(g, l): concatenation followed by two hidden layers."""

    def __init__(self, global_dim: int, local_dim: int, hidden_dim: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(global_dim + local_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, 1),
        )
        self.steps_trained = 0

    def forward(self, g: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([g, l], dim=1)).squeeze(1)


def dv_bound(t_joint: torch.Tensor, t_marginal: torch.Tensor) -> torch.Tensor:
    """E_joint[T] - log E_marginal[e^T]; zero when T is identically zero."""
    return t_joint.mean() - log_mean_exp(t_marginal, dim=0)


@dataclass
class PairSampler:
    """Joint pairs (x[owner[k]], y[k]); marginal pairs re-draw the x side from the other rows of x."""
    x: torch.Tensor
    y: torch.Tensor
    owner: np.ndarray

    def __post_init__(self):
        if self.x.shape[0] < 2:
            raise InputShapeError("Marginal sampling needs at least two source rows")

    def joint(self, k: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.x[self.owner[k]], self.y[k]

    def marginal(self, k: np.ndarray, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        owners = self.owner[k]
        other = rng.integers(0, self.x.shape[0] - 1, size=len(k))
        other = np.where(other >= owners, other + 1, other)  # skip the owner row
        return self.x[other], self.y[k]

    def __len__(self) -> int:
        return len(self.owner)


def _as_2d(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float32)
    return t.unsqueeze(1) if t.dim() == 1 else t


def _train(statnet: StatisticsNetwork, sampler: PairSampler, budget: MineBudget) -> List[float]:
    rng = np.random.default_rng(budget.seed)
    optimizer = torch.optim.Adam(statnet.parameters(), lr=budget.lr)
    batch = min(budget.batch_size, len(sampler))
    history = []
    statnet.train()
    for step in range(1, budget.steps + 1):
        k = rng.integers(0, len(sampler), size=batch)
        gj, lj = sampler.joint(k)
        gm, lm = sampler.marginal(k, rng)
        bound = dv_bound(statnet(gj, lj), statnet(gm, lm))
        if not torch.isfinite(bound) or abs(bound.item()) > budget.divergence_limit:
            raise MIDivergenceError(f"[MINE] bound diverged at step {step}: {bound.item()}")
        optimizer.zero_grad()
        (-bound).backward()
        optimizer.step()
        history.append(bound.item())
        if step % 500 == 0:
            logger.debug(f"[MINE] step {step}/{budget.steps} bound {np.mean(history[-500:]):.4f}")
    statnet.eval()
    statnet.steps_trained += budget.steps
    return history


def train_mine_on_pairs(x, y, budget: Optional[MineBudget] = None,
                        statnet: Optional[StatisticsNetwork] = None) -> StatisticsNetwork:
    """Fit T on paired samples (x_i, y_i); marginals pair y_i with an independently drawn x."""
    budget = budget or MineBudget()
    x, y = _as_2d(x), _as_2d(y)
    if x.shape[0] != y.shape[0]:
        raise InputShapeError(f"Paired samples differ in count: {x.shape[0]} vs {y.shape[0]}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(budget.seed)
        statnet = statnet or StatisticsNetwork(x.shape[1], y.shape[1], budget.hidden_dim)
        _train(statnet, PairSampler(x, y, np.arange(x.shape[0])), budget)
    return statnet


def train_mine(statnet: Optional[StatisticsNetwork], encoder: nn.Module, data: DatasetBundle,
               budget: Optional[MineBudget] = None,
               indices: Optional[Sequence[int]] = None) -> StatisticsNetwork:
    """Fit T on (global vector, one local vector) pairs from a frozen encoder."""
    if not is_frozen(encoder):
        raise ZFSViolationError("MINE needs a frozen encoder; call freeze_encoder first")
    budget = budget or MineBudget()
    indices = data.train_indices if indices is None else np.asarray(indices)
    features = extract_features(encoder, data, indices)
    g = features.global_features
    n, c, h, w = features.local_features.shape
    l = features.local_hwc().reshape(n * h * w, c)
    owner = np.repeat(np.arange(n), h * w)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(budget.seed)
        statnet = statnet or StatisticsNetwork(g.shape[1], c, budget.hidden_dim)
        history = _train(statnet, PairSampler(g, l, owner), budget)
    logger.info(f"[MINE] trained on {n} images x {h * w} locations, final bound {np.mean(history[-100:]):.4f}")
    return statnet


def estimate_mi(statnet: StatisticsNetwork, x, y, seed: int = 0) -> float:
    """DV bound over a full sample, marginals from a seeded permutation."""
    x, y = _as_2d(x), _as_2d(y)
    perm = torch.as_tensor(np.random.default_rng(seed).permutation(x.shape[0]))
    with torch.no_grad():
        return float(dv_bound(statnet(x, y), statnet(x[perm], y)).item())


# ==========================================
# HEATMAPS
# ==========================================

def normalize_scores(scores) -> np.ndarray:
    """Softmax over every location of a score grid, in float64."""
    scores = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    return torch.softmax(scores.reshape(-1), dim=0).reshape(scores.shape).numpy()


def pmi_heatmap(statnet: StatisticsNetwork, global_a: torch.Tensor, local_b: torch.Tensor,
                source_id: int = -1, target_id: int = -1) -> PMIHeatmap:
    """Scores of image A's global vector against every location of image B's [C, H, W] grid."""
    c, h, w = local_b.shape
    locations = local_b.permute(1, 2, 0).reshape(h * w, c).float()
    g = global_a.reshape(1, -1).float().expand(h * w, -1)
    with torch.no_grad():
        scores = statnet(g, locations)
    flags = [] if statnet.steps_trained > 0 else ["untrained_statnet"]
    return PMIHeatmap(
        scores=scores.reshape(h, w).numpy().astype(np.float64),
        normalized=normalize_scores(scores.reshape(h, w).numpy()),
        source_id=int(source_id), target_id=int(target_id), flags=flags,
    )


def render_heatmap(heatmap: PMIHeatmap, image: np.ndarray, out_dir: Union[str, Path],
                   stem: Optional[str] = None) -> Dict[str, Path]:
    """Overlay on the target crop, the raw score grid, and a text sidecar of raw scores."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"pmi_{heatmap.source_id}_{heatmap.target_id}"
    paths = {
        "overlay": out_dir / f"{stem}_overlay.png",
        "raw": out_dir / f"{stem}_raw.png",
        "scores": out_dir / f"{stem}_scores.txt",
    }

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image)
    ax.imshow(heatmap.normalized, cmap="jet", alpha=0.5, interpolation="bilinear",
              extent=(0, image.shape[1], image.shape[0], 0))
    ax.set_axis_off()
    fig.savefig(paths["overlay"], bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 4))
    shown = ax.imshow(heatmap.scores, cmap="viridis", interpolation="nearest")
    fig.colorbar(shown, ax=ax)
    ax.set_title(f"T(G_{heatmap.source_id}, L_{heatmap.target_id})")
    fig.savefig(paths["raw"], bbox_inches="tight")
    plt.close(fig)

    header = f"source={heatmap.source_id} target={heatmap.target_id} flags={','.join(heatmap.flags)}"
    np.savetxt(paths["scores"], heatmap.scores, fmt="%.6f", header=header)
    return paths


def parts_ratio(heatmap: PMIHeatmap, part_union: np.ndarray) -> float:
    """Mean normalized score on part cells over the mean over all cells; nan when no cell holds a part."""
    union = np.asarray(part_union, dtype=bool)
    if union.shape != heatmap.normalized.shape:
        raise InputShapeError(f"Part union {union.shape} does not match heatmap {heatmap.normalized.shape}")
    if not union.any():
        if "empty_part_union" not in heatmap.flags:
            heatmap.flags.append("empty_part_union")
        return float("nan")
    scores = heatmap.normalized.astype(np.float64)
    return float(scores[union].mean() / scores.mean())


# ==========================================
# SIMILARITIES
# ==========================================

def _grayscale(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image))
    if x.dtype == torch.uint8:
        x = x.double() / 255.0
    x = x.double()
    if x.dim() == 3:
        if x.shape[0] == 3 and x.shape[-1] != 3:
            x = x.permute(1, 2, 0)
        x = x @ torch.tensor(GRAYSCALE_WEIGHTS, dtype=torch.float64)
    return x


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(image_a, image_b, data_range: float = SSIM_DATA_RANGE) -> float:
    """Mean windowed SSIM of the grayscale images (Gaussian window, valid positions only)."""
    a, b = _grayscale(image_a), _grayscale(image_b)
    if a.shape != b.shape:
        raise InputShapeError(f"SSIM needs equal sizes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if min(a.shape) < SSIM_WINDOW:
        raise InputShapeError(f"Images smaller than the {SSIM_WINDOW}px SSIM window")

    window = gaussian_window()[None, None]
    a, b = a[None, None], b[None, None]
    mu_a, mu_b = F.conv2d(a, window), F.conv2d(b, window)
    var_a = F.conv2d(a * a, window) - mu_a ** 2
    var_b = F.conv2d(b * b, window) - mu_b ** 2
    cov = F.conv2d(a * b, window) - mu_a * mu_b
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean().item())


def attribute_similarity(class_a: int, class_b: int, attributes: np.ndarray) -> float:
    """Cosine similarity between two class attribute rows."""
    a = np.asarray(attributes[class_a], dtype=np.float64)
    b = np.asarray(attributes[class_b], dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


# ==========================================
# CORRELATION STUDY
# ==========================================

@dataclass
class RatioStudy:
    r_attr: float
    p_attr: float
    r_ssim: float
    p_ssim: float
    num_pairs: int
    dropped: int
    rows: pd.DataFrame = field(repr=False, default=None)


def sample_cross_class_pairs(labels: np.ndarray, indices: np.ndarray, n_pairs: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Uniform (A, B) pairs of test images with different classes."""
    if len(np.unique(labels[indices])) < 2:
        raise ConfigError("Cross-class pairs need at least two test classes")
    pairs: List[Tuple[int, int]] = []
    while len(pairs) < n_pairs:
        a = rng.choice(indices, size=n_pairs * 2)
        b = rng.choice(indices, size=n_pairs * 2)
        keep = labels[a] != labels[b]
        pairs.extend(zip(a[keep].tolist(), b[keep].tolist()))
    return np.asarray(pairs[:n_pairs], dtype=np.int64)


def ratio_correlation_study(statnet: StatisticsNetwork, encoder: nn.Module, data: DatasetBundle,
                            n_pairs: int = STUDY_PAIRS_DESK, seed: int = 0,
                            out_csv: Optional[Union[str, Path]] = None) -> RatioStudy:
    """Correlate the parts ratio of PMI heatmaps with attribute similarity and SSIM over test pairs."""
    if data.parts is None:
        raise ConfigError(f"The parts-ratio study needs part annotations; {data.name} has none")
    if not is_frozen(encoder):
        raise ZFSViolationError("The parts-ratio study needs a frozen encoder")

    rng = np.random.default_rng(seed)
    test_idx = data.test_indices
    pairs = sample_cross_class_pairs(data.labels, test_idx, n_pairs, rng)
    used = np.unique(pairs)
    features = extract_features(encoder, data, used)
    row_of = {int(img): row for row, img in enumerate(used)}
    union = feature_part_maps(data.parts, data.image_sizes(), features.geometry, used).union()
    crops = (preprocess_batch(data, used, PreprocessMode.EVAL).numpy() + 1.0) / 2.0

    records = []
    for a, b in pairs:
        ra, rb = row_of[int(a)], row_of[int(b)]
        heatmap = pmi_heatmap(statnet, features.global_features[ra], features.local_features[rb], a, b)
        records.append({
            "source": int(a), "target": int(b),
            "ratio": parts_ratio(heatmap, union[rb]),
            "sim_attr": attribute_similarity(data.labels[a], data.labels[b], data.attributes),
            "ssim": ssim(crops[ra], crops[rb]),
        })

    frame = pd.DataFrame.from_records(records, columns=["source", "target", "ratio", "sim_attr", "ssim"])
    valid = frame.dropna(subset=["ratio"])
    dropped = len(frame) - len(valid)
    if dropped:
        logger.warning(f"[MINE] {dropped} pairs dropped: target image has no visible part")
    attr = correlation(valid["ratio"], valid["sim_attr"])
    pixel = correlation(valid["ratio"], valid["ssim"])

    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_csv, index=False)
    logger.info(
        f"[MINE] ratio study over {len(valid)} pairs: r_attr={attr.r:.3f} (p={attr.p_value:.3g}), "
        f"r_ssim={pixel.r:.3f} (p={pixel.p_value:.3g})"
    )
    return RatioStudy(r_attr=attr.r, p_attr=attr.p_value, r_ssim=pixel.r, p_ssim=pixel.p_value,
                      num_pairs=len(valid), dropped=dropped, rows=frame)
