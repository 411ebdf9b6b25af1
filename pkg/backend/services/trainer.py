# backend/services/trainer.py
"""
Training driver for encoder pretraining.

Every run starts from a seeded initialization. Total loss is the objective's
main loss plus local_loss_weight times the per-location auxiliary loss.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torchvision.transforms.functional as TF
from tqdm import tqdm

from config.settings import settings
from constants import AMDIM_JITTER, VERSION
from models.bundles import DatasetBundle, InMemoryImages
from models.enums import LocalLoss, ObjectiveKind, PreprocessMode
from models.models import EncoderSpec, ObjectiveConfig, ProtoConfig, TrainBudget
from services.datasets import preprocess_batch
from services.encoders import Encoder, build_encoder, load_checkpoint, save_checkpoint
from services.objectives import (
    PretrainingObjective, TrainingBatch, attribute_targets, build_objective, local_aux_loss,
)
from utils.errors import NonFiniteLossError, ZFSViolationError
from utils.helpers import fingerprint, seed_everything
from utils.run_logger import RunLogger

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "encoder.pt"


@dataclass
class TrainingResult:
    encoder: Encoder
    objective: PretrainingObjective
    local_head: Optional[nn.Module]
    provenance: Dict[str, Any]
    curve: List[Tuple[int, str, float]] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None


def augment_view(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Seeded horizontal flip and colour jitter on [-1, 1] images."""
    out = []
    for img in images:
        view = (img + 1.0) / 2.0
        if rng.random() < 0.5:
            view = TF.hflip(view)
        view = TF.adjust_brightness(view, 1.0 + rng.uniform(-AMDIM_JITTER['brightness'], AMDIM_JITTER['brightness']))
        view = TF.adjust_contrast(view, 1.0 + rng.uniform(-AMDIM_JITTER['contrast'], AMDIM_JITTER['contrast']))
        view = TF.adjust_saturation(view, 1.0 + rng.uniform(-AMDIM_JITTER['saturation'], AMDIM_JITTER['saturation']))
        out.append(view.clamp(0.0, 1.0) * 2.0 - 1.0)
    return torch.stack(out)


def _local_head(config: ObjectiveConfig, channels: int, num_attributes: int,
                num_train_classes: int, seed: int) -> Optional[nn.Conv2d]:
    if config.local_loss == LocalLoss.NONE:
        return None
    out = num_attributes if config.local_loss == LocalLoss.AC else num_train_classes
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.Conv2d(channels, out, kernel_size=1)


def train_encoder(config: ObjectiveConfig, data: DatasetBundle, budget: Optional[TrainBudget] = None,
                  spec: Optional[EncoderSpec] = None, seed: int = 0,
                  out_dir: Optional[Union[str, Path]] = None, zfs_strict: Optional[bool] = None,
                  init_checkpoint: Optional[Union[str, Path]] = None,
                  proto_config: Optional[ProtoConfig] = None, progress: bool = False) -> TrainingResult:
    """Pretrain an encoder on the train classes of `data` and write a checkpoint to out_dir."""
    budget = budget or TrainBudget()
    spec = spec or EncoderSpec.basic()
    zfs_strict = settings.zfs_strict if zfs_strict is None else zfs_strict
    seed_everything(seed, settings.num_threads, settings.deterministic)
    rng = np.random.default_rng(seed)

    encoder = build_encoder(spec, seed)
    zfs = True
    if init_checkpoint is not None:
        if zfs_strict:
            raise ZFSViolationError(
                f"Refusing to initialise from {init_checkpoint}: parameters must come from the seed only"
            )
        loaded, _ = load_checkpoint(init_checkpoint, zfs_strict=False)
        encoder.load_state_dict(loaded.state_dict())
        zfs = False
        logger.warning(f"[Trainer] Initialised from {init_checkpoint}; run is not zero-shot-from-scratch")

    train_classes = data.split.train_classes
    train_idx = data.train_indices
    objective = build_objective(config, spec, encoder.local_channels, data.attributes[train_classes],
                                budget.lr, seed + 1, proto_config)
    local_head = _local_head(config, encoder.local_channels, data.num_attributes, len(train_classes), seed + 2)
    ac_targets = torch.as_tensor(attribute_targets(data.attributes, train_classes, config.ac_threshold))

    params = list(encoder.parameters()) + objective.main_parameters()
    if local_head is not None:
        params += list(local_head.parameters())
    optimizer = torch.optim.Adam(params, lr=budget.lr)

    run_logger = RunLogger(out_dir)
    cache: Optional[Dict[int, np.ndarray]] = {} if isinstance(data.images, InMemoryImages) else None

    encoder.train()
    objective.train()
    logger.info(
        f"[Trainer] {config.label} (local={config.local_loss.value}) on {data.name}: "
        f"{budget.steps} steps, batch {budget.batch_size}, lr {budget.lr}, seed {seed}"
    )
    for step in tqdm(range(1, budget.steps + 1), desc=config.label, disable=not progress):
        idx = rng.choice(train_idx, size=min(budget.batch_size, len(train_idx)), replace=False)
        images = preprocess_batch(data, idx, PreprocessMode.TRAIN, rng, cache)
        second_view = None
        if objective.needs_two_views:
            second_view = augment_view(preprocess_batch(data, idx, PreprocessMode.TRAIN, rng, cache), rng)
            images = augment_view(images, rng)
        labels = torch.as_tensor(np.searchsorted(train_classes, data.labels[idx]), dtype=torch.long)

        output = objective.compute(encoder, TrainingBatch(images=images, labels=labels, second_view=second_view))
        losses = {"main": output.main}
        total = output.main
        if local_head is not None:
            target = ac_targets[data.labels[idx]] if config.local_loss == LocalLoss.AC else labels
            aux = local_aux_loss(output.local, target, config.local_loss, local_head)
            losses[f"local_{config.local_loss.value}"] = aux
            total = output.main + config.local_loss_weight * aux
        losses["total"] = total

        bad = {name: value.item() for name, value in losses.items() if not torch.isfinite(value)}
        if bad:
            raise NonFiniteLossError(f"[Trainer] non-finite loss at step {step}: {bad} (parts: {output.parts})")

        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        disc = objective.auxiliary_step()

        if step == 1 or step % budget.log_every == 0 or step == budget.steps:
            values = {name: value.item() for name, value in losses.items()}
            values.update({k: v for k, v in output.parts.items() if k not in values})
            if disc is not None:
                values["discriminator_step"] = disc
            run_logger.log_losses(step, values)
            logger.info(f"[Trainer] step {step}/{budget.steps} total {values['total']:.4f}")

    encoder.eval()
    provenance = {
        "objective": config.label,
        "objective_config": config.model_dump(mode="json"),
        "estimator": config.resolved_estimator.value,
        "dataset": data.name,
        "steps": budget.steps,
        "batch_size": budget.batch_size,
        "lr": budget.lr,
        "seed": seed,
        "encoder": spec.family.value,
        "zfs": zfs,
        "fingerprint": fingerprint({"objective": config.model_dump(mode="json"),
                                    "budget": budget.model_dump(mode="json"),
                                    "spec": spec.model_dump(mode="json"), "seed": seed, "dataset": data.name}),
        "code_version": VERSION,
    }

    checkpoint_path = None
    if out_dir is not None:
        extras = {"objective": objective.state_dict()}
        if local_head is not None:
            extras["local_head"] = local_head.state_dict()
        checkpoint_path = save_checkpoint(Path(out_dir) / CHECKPOINT_NAME, encoder, provenance, extras)
        run_logger.write_metadata({"provenance": provenance, "ac_threshold": config.ac_threshold})

    return TrainingResult(encoder=encoder, objective=objective, local_head=local_head,
                          provenance=provenance, curve=run_logger.curve, checkpoint_path=checkpoint_path)


def pn_end_to_end(data: DatasetBundle, budget: Optional[TrainBudget] = None,
                  spec: Optional[EncoderSpec] = None, seed: int = 0,
                  out_dir: Optional[Union[str, Path]] = None,
                  proto_config: Optional[ProtoConfig] = None, progress: bool = False) -> TrainingResult:
    """Train encoder and prototypical embedders jointly on the train classes."""
    return train_encoder(ObjectiveConfig(kind=ObjectiveKind.PN), data, budget, spec, seed, out_dir,
                         proto_config=proto_config, progress=progress)


def classifier_accuracy(result: TrainingResult, data: DatasetBundle, indices=None, batch_size: int = 128) -> float:
    """Accuracy of the supervised head over train-class images (FC runs only)."""
    head = getattr(result.objective, "head", None)
    if not isinstance(head, nn.Linear):
        raise ValueError("classifier_accuracy needs a supervised objective")
    indices = data.train_indices if indices is None else np.asarray(indices)
    train_classes = data.split.train_classes
    result.encoder.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            g, _ = result.encoder(preprocess_batch(data, chunk, PreprocessMode.EVAL))
            predicted = head(g).argmax(dim=1).numpy()
            correct += int((train_classes[predicted] == data.labels[chunk]).sum())
    return correct / max(len(indices), 1)


def loss_decreased(curve: List[Tuple[int, str, float]], name: str = "main", upto: int = 100) -> bool:
    """True when the last logged value within `upto` steps is below the first."""
    values = [v for s, n, v in curve if n == name and s <= upto]
    return len(values) >= 2 and values[-1] < values[0] and all(math.isfinite(v) for v in values)
