# backend/services/zsl_eval.py
"""
Prototypical-network zero-shot evaluation on frozen features.

Image features and class attribute vectors are embedded into a common
space; a test image is assigned the unseen class whose embedded attributes
are nearest in squared Euclidean distance.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from constants import QUOTED_ALEXNET_POOL_RF
from models.enums import AggregationMode, EncoderFamily, PoolTap
from models.models import ProtoConfig, ZslResult
from services.encoders import extract_features, freeze_encoder, is_frozen, tap_geometry
from utils.errors import DegenerateTaskError, MissingAttributeError, ZFSViolationError

logger = logging.getLogger(__name__)

# receptive fields quoted for the alexnet final-pool taps, reported next to the computed ones
QUOTED_POOL_RF = dict(zip((PoolTap.PRE_POOL, PoolTap.POST_POOL), QUOTED_ALEXNET_POOL_RF))


# ==========================================
# MODEL
# ==========================================

def _mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))


def squared_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.cdist(x, y, compute_mode="donot_use_mm_for_euclid_dist").pow(2)


class ProtoModel(nn.Module):
    """Image and attribute embedders into a shared d-dimensional space."""

    def __init__(self, feature_dim: int, attribute_dim: int, embed_dim: int = 512, hidden_dim: int = 512):
        super().__init__()
        self.embed_dim = embed_dim
        self.image_embedder = _mlp(feature_dim, hidden_dim, embed_dim)
        self.attribute_embedder = _mlp(attribute_dim, hidden_dim, embed_dim)

    def distances(self, features: torch.Tensor, class_attributes: torch.Tensor) -> torch.Tensor:
        """[N, K] squared distances from embedded images to embedded prototypes."""
        return squared_distances(self.image_embedder(features), self.attribute_embedder(class_attributes))

    def forward(self, features: torch.Tensor, class_attributes: torch.Tensor) -> torch.Tensor:
        return -self.distances(features, class_attributes)


def prototypical_loss(model: ProtoModel, features: torch.Tensor, labels: torch.Tensor,
                      class_attributes: torch.Tensor) -> torch.Tensor:
    """Softmax over negative distances to the prototypes of the classes present in the batch.

    labels index rows of class_attributes.
    """
    present, target = torch.unique(labels, sorted=True, return_inverse=True)
    logits = model(features, class_attributes[present])
    return F.cross_entropy(logits, target)


# ==========================================
# FITTING
# ==========================================

def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)


def fit_protonet(features, labels: Sequence[int], attributes: np.ndarray, train_classes: Sequence[int],
                 config: Optional[ProtoConfig] = None, encoder: Optional[nn.Module] = None) -> ProtoModel:
    """Train the embedders on train-class features of a frozen encoder."""
    config = config or ProtoConfig()
    if encoder is not None and not is_frozen(encoder):
        raise ZFSViolationError("Encoder must be frozen before fitting the prototypical network")

    features = _as_tensor(features).detach()
    labels = np.asarray(labels, dtype=np.int64)
    train_classes = np.asarray(sorted(int(c) for c in train_classes), dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise DegenerateTaskError(f"Prototypical training needs at least two classes, got {present.size}")
    if not np.isin(present, train_classes).all():
        raise DegenerateTaskError("Training features include classes outside the train split")

    local_labels = torch.as_tensor(np.searchsorted(train_classes, labels), dtype=torch.long)
    class_attributes = _as_tensor(attributes[train_classes])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ProtoModel(features.shape[1], class_attributes.shape[1], config.embed_dim, config.hidden_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n = features.shape[0]

    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.as_tensor(rng.choice(n, size=min(config.batch_size, n), replace=False), dtype=torch.long)
        loss = prototypical_loss(model, features[idx], local_labels[idx], class_attributes)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 200 == 0 or step == config.steps:
            logger.debug(f"[Protonet] step {step}/{config.steps} loss {loss.item():.4f}")

    model.eval()
    return model


# ==========================================
# PREDICTION
# ==========================================

def _check_test_classes(attributes: np.ndarray, test_classes: Sequence[int],
                        train_classes: Optional[Sequence[int]]) -> np.ndarray:
    classes = np.asarray(sorted(int(c) for c in test_classes), dtype=np.int64)
    missing = [int(c) for c in classes if c < 0 or c >= attributes.shape[0] or not np.all(np.isfinite(attributes[c]))]
    if missing:
        raise MissingAttributeError(f"No attribute row for test classes {missing[:10]}")
    if train_classes is not None and np.isin(classes, np.asarray(train_classes)).any():
        raise DegenerateTaskError("Unseen classes overlap the training classes")
    return classes


def _result(predicted: np.ndarray, labels: np.ndarray, classes: np.ndarray,
            mode: Optional[AggregationMode] = None, receptive_field: Optional[int] = None) -> ZslResult:
    correct = predicted == labels
    per_class = [float(correct[labels == c].mean()) if np.any(labels == c) else 0.0 for c in classes]
    return ZslResult(
        top1=float(correct.mean()) if correct.size else 0.0, per_class_accuracy=per_class,
        classes=classes.tolist(), num_images=int(labels.size), mode=mode, receptive_field=receptive_field,
    )


def nearest_prototype(model: ProtoModel, features: torch.Tensor, class_attributes: torch.Tensor,
                      batch_size: int = 1024) -> np.ndarray:
    """Column index of the nearest prototype; first (lowest) index wins ties."""
    model.eval()
    out = []
    with torch.no_grad():
        protos = model.attribute_embedder(class_attributes)
        for start in range(0, features.shape[0], batch_size):
            emb = model.image_embedder(features[start:start + batch_size])
            out.append(squared_distances(emb, protos).numpy())
    distances = np.concatenate(out) if out else np.zeros((0, class_attributes.shape[0]))
    return np.argmin(distances, axis=1)


def predict_zsl(model: ProtoModel, features, labels: Sequence[int], attributes: np.ndarray,
                test_classes: Sequence[int], train_classes: Optional[Sequence[int]] = None) -> ZslResult:
    """Top-1 accuracy of nearest-prototype classification over the unseen classes."""
    classes = _check_test_classes(attributes, test_classes, train_classes)
    labels = np.asarray(labels, dtype=np.int64)
    columns = nearest_prototype(model, _as_tensor(features), _as_tensor(attributes[classes]))
    result = _result(classes[columns], labels, classes)
    logger.info(f"[Protonet] ZSL top-1 {result.top1:.4f} over {result.num_images} images, {len(classes)} classes")
    return result


# ==========================================
# LOCAL FEATURES
# ==========================================

@dataclass
class LocalPrediction:
    scores: np.ndarray     # [N, K] class probabilities
    predicted: np.ndarray  # [N] class ids


def aggregate_local(local_features: torch.Tensor, mode: Union[str, AggregationMode], model: ProtoModel,
                    attributes: np.ndarray, classes: Sequence[int]) -> LocalPrediction:
    """Classify from a local grid [N, C, H, W].

    average_representations embeds the mean local vector once;
    average_predictions classifies every location and averages class probabilities.
    """
    mode = AggregationMode(mode)
    classes = np.asarray(sorted(int(c) for c in classes), dtype=np.int64)
    class_attributes = _as_tensor(attributes[classes])
    local_features = _as_tensor(local_features)
    n, c, h, w = local_features.shape

    model.eval()
    with torch.no_grad():
        if mode == AggregationMode.AVERAGE_REPRESENTATIONS:
            scores = F.softmax(model(local_features.mean(dim=(2, 3)), class_attributes), dim=1)
        else:
            cells = local_features.permute(0, 2, 3, 1).reshape(n * h * w, c)
            probs = F.softmax(model(cells, class_attributes), dim=1)
            scores = probs.view(n, h * w, -1).mean(dim=1)
    scores = scores.numpy()
    return LocalPrediction(scores=scores, predicted=classes[np.argmax(scores, axis=1)])


def fit_local_protonet(local_features: torch.Tensor, labels: Sequence[int], attributes: np.ndarray,
                       train_classes: Sequence[int], mode: Union[str, AggregationMode],
                       config: Optional[ProtoConfig] = None) -> ProtoModel:
    """Fit on mean local vectors, or on sampled individual locations for per-location prediction."""
    config = config or ProtoConfig()
    mode = AggregationMode(mode)
    local_features = _as_tensor(local_features)
    labels = np.asarray(labels, dtype=np.int64)
    if mode == AggregationMode.AVERAGE_REPRESENTATIONS:
        return fit_protonet(local_features.mean(dim=(2, 3)), labels, attributes, train_classes, config)

    n, c, h, w = local_features.shape
    k = min(config.local_samples_per_image, h * w)
    rng = np.random.default_rng(config.seed)
    picks = np.stack([rng.choice(h * w, size=k, replace=False) for _ in range(n)])
    cells = local_features.flatten(2).permute(0, 2, 1)  # [N, HW, C]
    sampled = cells[torch.arange(n)[:, None], torch.as_tensor(picks)].reshape(n * k, c)
    return fit_protonet(sampled, np.repeat(labels, k), attributes, train_classes, config)


def evaluate_local(model: ProtoModel, local_features: torch.Tensor, labels: Sequence[int],
                   attributes: np.ndarray, test_classes: Sequence[int],
                   mode: Union[str, AggregationMode], receptive_field: Optional[int] = None) -> ZslResult:
    classes = _check_test_classes(attributes, test_classes, None)
    prediction = aggregate_local(local_features, mode, model, attributes, classes)
    return _result(prediction.predicted, np.asarray(labels, dtype=np.int64), classes,
                   AggregationMode(mode), receptive_field)


# ==========================================
# ENCODER-LEVEL EVALUATION
# ==========================================

def evaluate_encoder(encoder: nn.Module, data, config: Optional[ProtoConfig] = None,
                     batch_size: int = 64) -> ZslResult:
    """Global-feature ZSL for a frozen encoder on a dataset's standard split."""
    freeze_encoder(encoder)
    train = extract_features(encoder, data, data.train_indices, batch_size)
    test = extract_features(encoder, data, data.test_indices, batch_size)
    model = fit_protonet(train.global_features, train.labels, data.attributes,
                         data.split.train_classes, config, encoder=encoder)
    return predict_zsl(model, test.global_features, test.labels, data.attributes,
                       data.split.test_classes, data.split.train_classes)


def evaluate_local_modes(encoder: nn.Module, data, config: Optional[ProtoConfig] = None,
                         tap: str = "local", batch_size: int = 64):
    """Both aggregation modes on one tap; returns {mode: ZslResult}."""
    freeze_encoder(encoder)
    extra = () if tap == "local" else (tap,)
    train = extract_features(encoder, data, data.train_indices, batch_size, extra)
    test = extract_features(encoder, data, data.test_indices, batch_size, extra)
    train_local = train.local_features if tap == "local" else train.taps[tap]
    test_local = test.local_features if tap == "local" else test.taps[tap]

    results = {}
    for mode in AggregationMode:
        model = fit_local_protonet(train_local, train.labels, data.attributes, data.split.train_classes, mode, config)
        results[mode] = evaluate_local(model, test_local, test.labels, data.attributes, data.split.test_classes, mode)
    return results


def pool_variant_eval(encoder: nn.Module, tap: Union[str, PoolTap], data, config: Optional[ProtoConfig] = None,
                      mode: Union[str, AggregationMode] = AggregationMode.AVERAGE_REPRESENTATIONS,
                      batch_size: int = 64) -> ZslResult:
    """ZSL from the features just before or just after the final pooling layer."""
    tap = PoolTap(tap)
    geometry = tap_geometry(encoder.spec, tap)
    freeze_encoder(encoder)
    train = extract_features(encoder, data, data.train_indices, batch_size, (tap.value,))
    test = extract_features(encoder, data, data.test_indices, batch_size, (tap.value,))
    model = fit_local_protonet(train.taps[tap.value], train.labels, data.attributes,
                               data.split.train_classes, mode, config)
    result = evaluate_local(model, test.taps[tap.value], test.labels, data.attributes,
                            data.split.test_classes, mode, geometry.receptive_field)
    if encoder.spec.family == EncoderFamily.ALEXNET:
        result.quoted_receptive_field = QUOTED_POOL_RF[tap]
    logger.info(f"[Protonet] {tap.value} tap (rf {geometry.receptive_field}px, "
                f"quoted {result.quoted_receptive_field}px): top-1 {result.top1:.4f}")
    return result
