# backend/services/encoders.py
"""
Convolutional encoders with global and local feature taps.

Two families share one builder: the basic (DCGAN-style) stack of stride-2
convolutions and the AlexNet-style stack with max pools. Both end in a
1024-d global vector; the local tap is the output of the third conv block.
"""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from constants import CHECKPOINT_FORMAT_VERSION, ZFS_PROVENANCE_MARKER
from models.bundles import DatasetBundle, FeatureBundle
from models.enums import PoolTap, PreprocessMode
from models.models import EncoderSpec, FeatureGeometry
from services.datasets import preprocess_batch
from utils.errors import InputShapeError, InvalidSpecError, TapUnavailableError, ZFSViolationError
from utils.validation import validate_image_batch

logger = logging.getLogger(__name__)


# ==========================================
# SHAPE ARITHMETIC
# ==========================================

@dataclass
class BlockShape:
    conv: Tuple[int, int, int]  # (C, H, W) after conv + activation
    out: Tuple[int, int, int]   # after the block's pool, if any


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(spec: EncoderSpec) -> List[BlockShape]:
    """Per-block output shapes for a square input of spec.input_size."""
    shapes = []
    size = spec.input_size
    for i, layer in enumerate(spec.conv_layers):
        size = _conv_out(size, layer.kernel, layer.stride, layer.padding)
        if size < 1:
            raise InvalidSpecError(f"Conv block {i} collapses a {spec.input_size}px input to {size}px")
        conv = (layer.out_channels, size, size)
        if layer.has_pool:
            size = _conv_out(size, layer.pool_kernel, layer.pool_stride, 0)
            if size < 1:
                raise InvalidSpecError(f"Pool of block {i} collapses a {spec.input_size}px input")
        shapes.append(BlockShape(conv=conv, out=(layer.out_channels, size, size)))
    return shapes


def receptive_field(spec: EncoderSpec, layer: int, pre_pool: bool = False) -> FeatureGeometry:
    """Geometry of block `layer`'s output (before its pool when pre_pool).

    rf' = rf + (k-1)*j, j' = j*s, start' = start - p*j.
    """
    if not 0 <= layer < len(spec.conv_layers):
        raise InvalidSpecError(f"Layer {layer} not in a {len(spec.conv_layers)}-block encoder")

    rf, jump, start = 1, 1, 0
    for i, block in enumerate(spec.conv_layers[:layer + 1]):
        start -= block.padding * jump
        rf += (block.kernel - 1) * jump
        jump *= block.stride
        if block.has_pool and not (i == layer and pre_pool):
            rf += (block.pool_kernel - 1) * jump
            jump *= block.pool_stride

    shape = infer_shapes(spec)[layer]
    channels, height, width = shape.conv if pre_pool else shape.out
    return FeatureGeometry(
        height=height, width=width, channels=channels, receptive_field=rf,
        jump=jump, start_offset=start, image_size=spec.input_size,
    )


def tap_geometry(spec: EncoderSpec, tap: Union[str, PoolTap]) -> FeatureGeometry:
    """Geometry of the features before or after the final pooling layer."""
    last = len(spec.conv_layers) - 1
    if not spec.conv_layers[last].has_pool:
        raise TapUnavailableError(f"The {spec.family.value} encoder has no final pooling layer")
    return receptive_field(spec, last, pre_pool=PoolTap(tap) == PoolTap.PRE_POOL)


# ==========================================
# MODULE
# ==========================================

def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    raise InvalidSpecError(f"Unknown activation: {name}")


class Encoder(nn.Module):
    """Conv blocks -> flatten -> linear head; taps the local grid and the final pool."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.seed: Optional[int] = None
        shapes = infer_shapes(spec)

        self.blocks = nn.ModuleList()
        self.pools = nn.ModuleList()
        in_channels = spec.in_channels
        for layer in spec.conv_layers:
            modules = [nn.Conv2d(in_channels, layer.out_channels, layer.kernel, layer.stride,
                                 layer.padding, bias=not layer.batch_norm)]
            if layer.batch_norm:
                modules.append(nn.BatchNorm2d(layer.out_channels))
            modules.append(_activation(layer.activation))
            self.blocks.append(nn.Sequential(*modules))
            self.pools.append(nn.MaxPool2d(layer.pool_kernel, layer.pool_stride) if layer.has_pool else nn.Identity())
            in_channels = layer.out_channels

        c, h, w = shapes[-1].out
        head: List[nn.Module] = [nn.Flatten()]
        width = c * h * w
        for dim in list(spec.head_dims) + [spec.global_dim]:
            head += [nn.Linear(width, dim), nn.BatchNorm1d(dim), nn.ReLU()]
            width = dim
        self.head = nn.Sequential(*head)

        self.local_geometry = receptive_field(spec, spec.local_tap_layer)

    @property
    def local_channels(self) -> int:
        return self.local_geometry.channels

    def forward_taps(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        ok, error = validate_image_batch(tuple(x.shape), self.spec.in_channels, self.spec.input_size)
        if not ok:
            raise InputShapeError(error)
        taps: Dict[str, torch.Tensor] = {}
        last = len(self.blocks) - 1
        h = x
        for i, (block, pool) in enumerate(zip(self.blocks, self.pools)):
            h = block(h)
            if i == last:
                taps[PoolTap.PRE_POOL.value] = h
            h = pool(h)
            if i == self.spec.local_tap_layer:
                taps['local'] = h
        taps[PoolTap.POST_POOL.value] = h
        taps['global'] = self.head(h)
        return taps

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        taps = self.forward_taps(x)
        return taps['global'], taps['local']


def build_encoder(spec: EncoderSpec, seed: int) -> Encoder:
    """Seeded initialization; the global torch RNG state is left untouched."""
    infer_shapes(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = Encoder(spec)
    encoder.seed = seed
    n_params = sum(p.numel() for p in encoder.parameters())
    logger.debug(f"Built {spec.family.value} encoder (seed {seed}, {n_params} parameters)")
    return encoder


# ==========================================
# FORWARD PASSES
# ==========================================

def encode(encoder: Encoder, batch: Union[np.ndarray, torch.Tensor],
           extra_taps: Sequence[str] = ()) -> FeatureBundle:
    """Deterministic eval-mode forward pass."""
    x = torch.as_tensor(batch, dtype=torch.float32)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            taps = encoder.forward_taps(x)
    finally:
        encoder.train(was_training)
    return FeatureBundle(
        global_features=taps['global'], local_features=taps['local'],
        geometry=encoder.local_geometry, taps={k: taps[k] for k in extra_taps},
    )


def extract_features(encoder: Encoder, data: DatasetBundle, indices: Sequence[int],
                     batch_size: int = 64, extra_taps: Sequence[str] = (),
                     progress: bool = False) -> FeatureBundle:
    """Encode dataset images (eval preprocessing) in batches."""
    indices = np.asarray(indices, dtype=np.int64)
    globals_, locals_ = [], []
    taps: Dict[str, List[torch.Tensor]] = {k: [] for k in extra_taps}
    starts = range(0, len(indices), batch_size)
    for start in tqdm(starts, desc="encode", disable=not progress):
        chunk = indices[start:start + batch_size]
        bundle = encode(encoder, preprocess_batch(data, chunk, PreprocessMode.EVAL), extra_taps)
        globals_.append(bundle.global_features)
        locals_.append(bundle.local_features)
        for k in extra_taps:
            taps[k].append(bundle.taps[k])
    return FeatureBundle(
        global_features=torch.cat(globals_), local_features=torch.cat(locals_),
        geometry=encoder.local_geometry, labels=data.labels[indices], image_indices=indices,
        taps={k: torch.cat(v) for k, v in taps.items()},
    )


# ==========================================
# FREEZING
# ==========================================

def freeze_encoder(encoder: nn.Module) -> nn.Module:
    """Eval mode (batch-norm statistics fixed) and no gradients."""
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def is_frozen(encoder: nn.Module) -> bool:
    return not encoder.training and not any(p.requires_grad for p in encoder.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ==========================================
# CHECKPOINTS
# ==========================================

def save_checkpoint(path: Union[str, Path], encoder: Encoder, provenance: Dict[str, Any],
                    extras: Optional[Dict[str, Dict[str, torch.Tensor]]] = None) -> Path:
    """Self-describing checkpoint: spec, seed, parameters and training provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "marker": ZFS_PROVENANCE_MARKER,
        "spec": encoder.spec.model_dump(mode="json"),
        "seed": encoder.seed,
        "state_dict": encoder.state_dict(),
        "provenance": provenance,
        "extras": extras or {},
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path], zfs_strict: bool = True,
                    expected_dataset: Optional[str] = None) -> Tuple[Encoder, Dict[str, Any]]:
    """Rebuild an encoder; in strict mode refuse anything not trained here on the same dataset."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    provenance = payload.get("provenance", {}) if isinstance(payload, dict) else {}

    if zfs_strict:
        if not isinstance(payload, dict) or payload.get("marker") != ZFS_PROVENANCE_MARKER:
            raise ZFSViolationError(f"{path} is an external checkpoint (no toolkit provenance)")
        if not provenance.get("zfs", False):
            raise ZFSViolationError(f"{path} was trained outside the zero-shot-from-scratch rule")
        if expected_dataset and provenance.get("dataset") != expected_dataset:
            raise ZFSViolationError(
                f"{path} was trained on {provenance.get('dataset')}, not {expected_dataset}"
            )

    spec = EncoderSpec.model_validate(payload["spec"])
    encoder = Encoder(spec)
    encoder.load_state_dict(payload["state_dict"])
    encoder.seed = payload.get("seed")
    provenance = dict(provenance)
    provenance["extras"] = payload.get("extras", {})
    return encoder, provenance
