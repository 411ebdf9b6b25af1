# backend/services/objectives.py
"""
Pretraining objectives: supervised classifier, (beta-)VAE, adversarial
auto-encoder, the infomax family (DIM, AMDIM, class-matching DIM), the
prototypical baseline, and the per-location auxiliary losses.

Each loss is available as a plain function over encoder outputs and wrapped
in a PretrainingObjective module that owns its heads for the trainer.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from constants import VAE_LATENT_DIM, LOGVAR_CLAMP, INFOMAX_EMBED_DIM, SCORE_CLIP
from models.bundles import PairingPlan
from models.enums import Estimator, LocalLoss, ObjectiveKind
from models.models import EncoderSpec, ObjectiveConfig, ProtoConfig
from services.zsl_eval import ProtoModel, prototypical_loss
from utils.errors import EmptyBatchError, InvalidSpecError, LabelOutOfRangeError
from utils.helpers import masked_log_mean_exp

logger = logging.getLogger(__name__)


# ==========================================
# SUPERVISED
# ==========================================

def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRangeError(
            f"Labels must lie in [0, {num_classes}), got [{int(labels.min())}, {int(labels.max())}]"
        )


def supervised_loss(global_features: torch.Tensor, labels: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Cross-entropy of a linear head on the global feature."""
    _check_labels(labels, head.out_features)
    return F.cross_entropy(head(global_features), labels)


# ==========================================
# AUTO-ENCODERS
# ==========================================

def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dims, averaged over the batch."""
    logvar = logvar.clamp(*LOGVAR_CLAMP)
    kl = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0)
    return kl.sum(dim=1).mean()


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    return F.mse_loss(recon, target, reduction="sum") / target.shape[0]


class Decoder(nn.Module):
    """Posterior heads on the global vector plus a transposed-conv generator back to the input size."""

    def __init__(self, global_dim: int, image_size: int, latent_dim: int = VAE_LATENT_DIM,
                 base_channels: int = 256, out_channels: int = 3):
        super().__init__()
        start = image_size // 16
        if start * 16 != image_size:
            raise InvalidSpecError(f"Decoder needs an input size divisible by 16, got {image_size}")
        self.latent_dim = latent_dim
        self.start = start
        self.base_channels = base_channels
        self.mu = nn.Linear(global_dim, latent_dim)
        self.logvar = nn.Linear(global_dim, latent_dim)
        self.fc = nn.Sequential(
            nn.Linear(latent_dim, base_channels * start * start),
            nn.BatchNorm1d(base_channels * start * start),
            nn.ReLU(),
        )
        layers: List[nn.Module] = []
        channels = base_channels
        for _ in range(3):
            layers += [nn.ConvTranspose2d(channels, channels // 2, 4, 2, 1), nn.BatchNorm2d(channels // 2), nn.ReLU()]
            channels //= 2
        layers += [nn.ConvTranspose2d(channels, out_channels, 4, 2, 1), nn.Tanh()]
        self.deconv = nn.Sequential(*layers)

    def posterior(self, global_features: torch.Tensor):
        return self.mu(global_features), self.logvar(global_features).clamp(*LOGVAR_CLAMP)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z).view(-1, self.base_channels, self.start, self.start)
        return self.deconv(h)


@dataclass
class VaeLoss:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def vae_terms(global_features: torch.Tensor, batch: torch.Tensor, decoder: Decoder, beta: float) -> VaeLoss:
    mu, logvar = decoder.posterior(global_features)
    z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
    recon = reconstruction_loss(decoder(z), batch)
    kl = gaussian_kl(mu, logvar)
    return VaeLoss(total=recon + beta * kl, recon=recon, kl=kl)


def vae_loss(encoder: nn.Module, decoder: Decoder, batch: torch.Tensor, beta: float = 1.0) -> VaeLoss:
    """Reconstruction + beta * KL; beta=1 is the VAE, beta>1 the beta-VAE."""
    global_features, _ = encoder(batch)
    return vae_terms(global_features, batch, decoder, beta)


class Discriminator(nn.Module):
    def __init__(self, latent_dim: int = VAE_LATENT_DIM, hidden_dim: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden_dim), nn.LeakyReLU(0.2),
            nn.Linear(hidden_dim, hidden_dim), nn.LeakyReLU(0.2),
            nn.Linear(hidden_dim, 1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


@dataclass
class AaeLoss:
    recon: torch.Tensor
    generator: torch.Tensor
    discriminator: torch.Tensor


def aae_terms(global_features: torch.Tensor, batch: torch.Tensor, decoder: Decoder,
              discriminator: Discriminator, prior_sample: Optional[torch.Tensor] = None) -> AaeLoss:
    code, _ = decoder.posterior(global_features)
    recon = reconstruction_loss(decoder(code), batch)
    prior = prior_sample if prior_sample is not None else torch.randn_like(code)

    fake_logits = discriminator(code)
    generator = F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    real_logits = discriminator(prior)
    detached_logits = discriminator(code.detach())
    disc = 0.5 * (
        F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        + F.binary_cross_entropy_with_logits(detached_logits, torch.zeros_like(detached_logits))
    )
    return AaeLoss(recon=recon, generator=generator, discriminator=disc)


def aae_loss(encoder: nn.Module, decoder: Decoder, discriminator: Discriminator,
             batch: torch.Tensor, prior_sample: Optional[torch.Tensor] = None) -> AaeLoss:
    """Reconstruction plus adversarial matching of codes to a standard normal prior."""
    global_features, _ = encoder(batch)
    return aae_terms(global_features, batch, decoder, discriminator, prior_sample)


# ==========================================
# PAIRING
# ==========================================

def identity_plan(labels: Sequence[int]) -> PairingPlan:
    """DIM pairing: every anchor is its own positive, every other input a negative."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyBatchError("Cannot pair an empty batch")
    n = labels.size
    return PairingPlan(positive=np.arange(n), intra_class=np.zeros(n, dtype=bool), labels=labels)


def cmdim_pairing(labels: Sequence[int], p: float, rng: np.random.Generator) -> PairingPlan:
    """With probability p take a uniformly drawn same-class sibling as positive, else the anchor itself.

    Anchors alone in their class keep themselves. Negatives are the other-class inputs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise EmptyBatchError("Cannot pair an empty batch")

    order = np.argsort(labels, kind="stable")
    _, starts, inverse, counts = np.unique(labels[order], return_index=True, return_inverse=True, return_counts=True)
    class_of = np.empty(n, dtype=np.int64)
    class_of[order] = inverse
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - starts[inverse]

    size = counts[class_of]
    draw_intra = rng.random(n) < p
    has_sibling = size >= 2
    intra = draw_intra & has_sibling

    # uniform over the size-1 siblings: skip the anchor's own rank
    r = rng.integers(0, np.maximum(size - 1, 1))
    r = np.where(r >= rank, r + 1, r)
    sibling = order[starts[class_of] + np.minimum(r, size - 1)]

    positive = np.where(intra, sibling, np.arange(n))
    return PairingPlan(positive=positive, intra_class=intra, labels=labels, class_negatives=True)


# ==========================================
# INFOMAX BOUNDS
# ==========================================

def infomax_bound(scores: torch.Tensor, plan: PairingPlan,
                  estimator: Union[str, Estimator] = Estimator.DV) -> torch.Tensor:
    """MI lower bound from scores[g, a, l] = T(G_g, L_a[l]).

    For anchor a the positive is scores[plan.positive[a], a, :] and the
    negatives are the rows g with plan.negative_mask[a, g]. Anchors without any
    negative are left out of the average.
    """
    estimator = Estimator(estimator)
    n_global, n_anchor, _ = scores.shape
    if n_anchor == 0:
        raise EmptyBatchError("No anchors to score")
    per_anchor = scores.permute(1, 0, 2)  # [a, g, l]
    anchors = torch.arange(n_anchor, device=scores.device)
    positive_idx = torch.as_tensor(plan.positive, dtype=torch.long, device=scores.device)
    pos = per_anchor[anchors, positive_idx]  # [a, l]

    mask = torch.as_tensor(plan.negative_mask, dtype=torch.bool, device=scores.device)
    scored = mask.any(dim=1)
    if not scored.any():
        if not plan.class_negatives:
            raise EmptyBatchError("Every anchor needs at least one negative; batch too small")
        logger.warning(f"[InfoMax] all {n_anchor} anchors share one class; no contrastive term this batch")
        return scores.sum() * 0.0
    if not scored.all():
        logger.warning(f"[InfoMax] {int((~scored).sum())} anchors without negatives left out")
        per_anchor, pos, mask = per_anchor[scored], pos[scored], mask[scored]
    mask3 = mask.unsqueeze(-1).expand_as(per_anchor)

    if estimator == Estimator.DV:
        neg_term = masked_log_mean_exp(per_anchor, mask3, dim=1)
        return (pos - neg_term).mean()
    if estimator == Estimator.NCE:
        filled = per_anchor.masked_fill(~mask3, float("-inf"))
        logits = torch.cat([pos.unsqueeze(1), filled], dim=1)
        n_terms = mask.sum(dim=1, keepdim=True).to(scores.dtype) + 1.0
        return (pos - torch.logsumexp(logits, dim=1) + torch.log(n_terms)).mean()
    # Jensen-Shannon
    neg_sp = F.softplus(per_anchor) * mask3
    neg_term = neg_sp.sum(dim=1) / mask3.sum(dim=1)
    return (-F.softplus(-pos) - neg_term).mean()


class InfoMaxHead(nn.Module):
    """Bilinear scorer between embedded global vectors and embedded local cells."""

    def __init__(self, global_dim: int, local_channels: int, embed_dim: int = INFOMAX_EMBED_DIM,
                 clip: float = SCORE_CLIP):
        super().__init__()
        self.embed_dim = embed_dim
        self.clip = clip
        self.global_net = nn.Sequential(nn.Linear(global_dim, embed_dim), nn.ReLU(), nn.Linear(embed_dim, embed_dim))
        self.global_skip = nn.Linear(global_dim, embed_dim)
        self.local_net = nn.Sequential(
            nn.Conv2d(local_channels, embed_dim, 1), nn.ReLU(), nn.Conv2d(embed_dim, embed_dim, 1),
        )
        self.local_skip = nn.Conv2d(local_channels, embed_dim, 1)

    def forward(self, global_features: torch.Tensor, local_features: torch.Tensor) -> torch.Tensor:
        g = self.global_net(global_features) + self.global_skip(global_features)
        l = self.local_net(local_features) + self.local_skip(local_features)
        l = l.flatten(2)  # [a, e, hw]
        scores = torch.einsum("ge,ael->gal", g, l) / math.sqrt(self.embed_dim)
        return self.clip * torch.tanh(scores / self.clip)


def infomax_loss(global_features: torch.Tensor, local_features: torch.Tensor, plan: PairingPlan,
                 estimator: Union[str, Estimator], head: InfoMaxHead) -> torch.Tensor:
    """Negative MI bound between global sources and anchor local grids."""
    return -infomax_bound(head(global_features, local_features), plan, estimator)


# ==========================================
# LOCAL AUXILIARY LOSSES
# ==========================================

def attribute_targets(attributes: np.ndarray, train_classes: Sequence[int],
                      threshold: float = 0.0) -> np.ndarray:
    """Binary AC targets: attributes centred on their train-class mean, then > threshold."""
    attributes = np.asarray(attributes, dtype=np.float64)
    mean = attributes[np.asarray(train_classes)].mean(axis=0)
    return (attributes - mean > threshold).astype(np.float32)


def local_aux_loss(local_features: torch.Tensor, target: torch.Tensor,
                   kind: Union[str, LocalLoss], head: nn.Conv2d) -> torch.Tensor:
    """Shared 1x1 classifier applied at every location, loss averaged over locations.

    AC: multi-label BCE against binary attribute targets [B, A].
    LC: cross-entropy against class labels [B].
    """
    kind = LocalLoss(kind)
    logits = head(local_features)  # [B, K, H, W]
    b, k, h, w = logits.shape
    if target.shape[0] != b:
        raise LabelOutOfRangeError(f"{target.shape[0]} targets for a batch of {b}")

    if kind == LocalLoss.AC:
        if target.dim() != 2 or target.shape[1] != k:
            raise LabelOutOfRangeError(f"AC targets must be [B, {k}], got {list(target.shape)}")
        expanded = target.to(logits.dtype)[:, :, None, None].expand_as(logits)
        return F.binary_cross_entropy_with_logits(logits, expanded)
    if kind == LocalLoss.LC:
        _check_labels(target, k)
        return F.cross_entropy(logits, target[:, None, None].expand(b, h, w))
    raise InvalidSpecError("local_aux_loss needs kind ac or lc")


def global_aux_loss(global_features: torch.Tensor, target: torch.Tensor,
                    kind: Union[str, LocalLoss], head: nn.Linear) -> torch.Tensor:
    """The same classifier losses on a single vector per input."""
    kind = LocalLoss(kind)
    logits = head(global_features)
    if kind == LocalLoss.AC:
        return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))
    _check_labels(target, head.out_features)
    return F.cross_entropy(logits, target)


# ==========================================
# OBJECTIVE MODULES
# ==========================================

@dataclass
class TrainingBatch:
    images: torch.Tensor
    labels: torch.Tensor  # train-local class index
    second_view: Optional[torch.Tensor] = None


@dataclass
class ObjectiveOutput:
    main: torch.Tensor
    local: torch.Tensor
    global_features: torch.Tensor
    parts: Dict[str, float] = field(default_factory=dict)


class PretrainingObjective(nn.Module):
    """Base class: owns objective-specific heads, computes the main loss."""
    name = "objective"
    needs_two_views = False

    def compute(self, encoder: nn.Module, batch: TrainingBatch) -> ObjectiveOutput:
        raise NotImplementedError

    def main_parameters(self) -> List[nn.Parameter]:
        return list(self.parameters())

    def auxiliary_step(self) -> Optional[float]:
        return None


class SupervisedObjective(PretrainingObjective):
    name = "fc"

    def __init__(self, global_dim: int, num_classes: int):
        super().__init__()
        self.head = nn.Linear(global_dim, num_classes)

    def compute(self, encoder, batch):
        g, l = encoder(batch.images)
        loss = supervised_loss(g, batch.labels, self.head)
        return ObjectiveOutput(main=loss, local=l, global_features=g, parts={"ce": loss.item()})


class VAEObjective(PretrainingObjective):
    name = "vae"

    def __init__(self, global_dim: int, image_size: int, beta: float = 1.0):
        super().__init__()
        self.beta = beta
        self.decoder = Decoder(global_dim, image_size)

    def compute(self, encoder, batch):
        g, l = encoder(batch.images)
        terms = vae_terms(g, batch.images, self.decoder, self.beta)
        return ObjectiveOutput(main=terms.total, local=l, global_features=g,
                               parts={"recon": terms.recon.item(), "kl": terms.kl.item()})


class AAEObjective(PretrainingObjective):
    name = "aae"

    def __init__(self, global_dim: int, image_size: int, lr: float):
        super().__init__()
        self.decoder = Decoder(global_dim, image_size)
        self.discriminator = Discriminator(self.decoder.latent_dim)
        self.disc_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=lr)
        self._pending: Optional[torch.Tensor] = None

    def main_parameters(self):
        return list(self.decoder.parameters())

    def compute(self, encoder, batch):
        g, l = encoder(batch.images)
        terms = aae_terms(g, batch.images, self.decoder, self.discriminator)
        self._pending = terms.discriminator
        return ObjectiveOutput(main=terms.recon + terms.generator, local=l, global_features=g,
                               parts={"recon": terms.recon.item(), "generator": terms.generator.item(),
                                      "discriminator": terms.discriminator.item()})

    def auxiliary_step(self):
        if self._pending is None:
            return None
        self.disc_optimizer.zero_grad()
        self._pending.backward()
        self.disc_optimizer.step()
        value = self._pending.item()
        self._pending = None
        return value


class InfoMaxObjective(PretrainingObjective):
    """DIM (self pairing), CMDIM (class matching with probability p) and AMDIM (two views)."""

    def __init__(self, kind: ObjectiveKind, global_dim: int, local_channels: int,
                 estimator: Estimator, match_prob: float = 0.0, seed: int = 0):
        super().__init__()
        self.kind = kind
        self.name = kind.value
        self.needs_two_views = kind == ObjectiveKind.AMDIM
        self.estimator = estimator
        self.match_prob = match_prob
        self.rng = np.random.default_rng(seed)
        self.head = InfoMaxHead(global_dim, local_channels)

    def compute(self, encoder, batch):
        labels = batch.labels.cpu().numpy()
        if self.kind == ObjectiveKind.AMDIM:
            if batch.second_view is None:
                raise InvalidSpecError("AMDIM needs a second augmented view")
            g1, l1 = encoder(batch.images)
            g2, l2 = encoder(batch.second_view)
            plan = identity_plan(labels)
            loss = 0.5 * (infomax_loss(g1, l2, plan, self.estimator, self.head)
                          + infomax_loss(g2, l1, plan, self.estimator, self.head))
            return ObjectiveOutput(main=loss, local=l1, global_features=g1, parts={"mi_bound": -loss.item()})

        g, l = encoder(batch.images)
        if self.kind == ObjectiveKind.CMDIM:
            plan = cmdim_pairing(labels, self.match_prob, self.rng)
        else:
            plan = identity_plan(labels)
        loss = infomax_loss(g, l, plan, self.estimator, self.head)
        parts = {"mi_bound": -loss.item()}
        if self.kind == ObjectiveKind.CMDIM:
            parts["intra_fraction"] = float(plan.intra_class.mean())
        return ObjectiveOutput(main=loss, local=l, global_features=g, parts=parts)


class PrototypicalObjective(PretrainingObjective):
    """End-to-end prototypical network on the global feature (the PN baseline)."""
    name = "pn"

    def __init__(self, global_dim: int, class_attributes: np.ndarray, proto_config):
        super().__init__()
        self.model = ProtoModel(global_dim, class_attributes.shape[1],
                                proto_config.embed_dim, proto_config.hidden_dim)
        self.register_buffer("class_attributes", torch.as_tensor(class_attributes, dtype=torch.float32))

    def compute(self, encoder, batch):
        g, l = encoder(batch.images)
        loss = prototypical_loss(self.model, g, batch.labels, self.class_attributes)
        return ObjectiveOutput(main=loss, local=l, global_features=g, parts={"proto_ce": loss.item()})


def build_objective(config: ObjectiveConfig, spec: EncoderSpec, local_channels: int,
                    train_attributes: np.ndarray, lr: float, seed: int,
                    proto_config=None) -> PretrainingObjective:
    """Objective module for a config; heads are initialised from the given seed."""
    num_classes = train_attributes.shape[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if config.kind == ObjectiveKind.FC:
            objective = SupervisedObjective(spec.global_dim, num_classes)
        elif config.kind in (ObjectiveKind.VAE, ObjectiveKind.BVAE):
            objective = VAEObjective(spec.global_dim, spec.input_size, config.effective_beta)
            objective.name = config.kind.value
        elif config.kind == ObjectiveKind.AAE:
            objective = AAEObjective(spec.global_dim, spec.input_size, lr)
        elif config.kind in (ObjectiveKind.DIM, ObjectiveKind.AMDIM, ObjectiveKind.CMDIM):
            objective = InfoMaxObjective(config.kind, spec.global_dim, local_channels,
                                         config.resolved_estimator, config.match_prob, seed)
        elif config.kind == ObjectiveKind.PN:
            objective = PrototypicalObjective(spec.global_dim, train_attributes, proto_config or ProtoConfig())
        else:
            raise InvalidSpecError(f"Unknown objective: {config.kind}")
    return objective
