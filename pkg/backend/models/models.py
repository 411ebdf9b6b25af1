# backend/models/models.py
"""
Pydantic models for configurations, geometry and results
"""
import itertools
import re
from typing import Optional, List, Dict, Any, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from constants import (
    CROP_SIDE, GLOBAL_DIM, LOCAL_TAP_LAYER, BASIC_CONV_TABLE, BASIC_HEAD_DIMS,
    ALEXNET_CONV_TABLE, ALEXNET_HEAD_DIMS, DEFAULT_LR, DEFAULT_BATCH_SIZE,
    DEFAULT_TRAIN_STEPS, DEFAULT_LOG_EVERY, DEFAULT_BVAE_BETA, AC_THRESHOLD,
    LOCAL_LOSS_WEIGHT, PROTO_EMBED_DIM, PROTO_HIDDEN_DIM, PROTO_STEPS,
    PROTO_BATCH_SIZE, LOCAL_SAMPLES_PER_IMAGE, PROBE_THRESHOLD, PROBE_STEPS,
    STATNET_HIDDEN_DIM, MINE_STEPS, MINE_BATCH_SIZE, MINE_LR, MINE_DIVERGENCE_LIMIT,
    TRE_LR, TRE_STEPS, TRE_INIT_STD, TRE_RANDOM_DRAWS, TRE_TOLERANCE, TRE_PATIENCE,
    RESIZE_SIDE,
)
from models.enums import (
    ObjectiveKind, LocalLoss, EncoderFamily, Estimator, AggregationMode,
)

# ==========================================
# ENCODERS
# ==========================================

class ConvLayerSpec(BaseModel):
    """One convolution block: conv, batch norm, activation, optional max pool."""
    out_channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    pool_kernel: int = Field(default=0, ge=0)
    pool_stride: int = Field(default=0, ge=0)
    batch_norm: bool = True
    activation: str = "relu"

    @property
    def has_pool(self) -> bool:
        return self.pool_kernel > 0


def _table_to_layers(table, width: float) -> List[ConvLayerSpec]:
    return [
        ConvLayerSpec(
            out_channels=max(1, int(round(c * width))), kernel=k, stride=s, padding=p,
            pool_kernel=pk, pool_stride=ps,
        )
        for c, k, s, p, pk, ps in table
    ]


class EncoderSpec(BaseModel):
    family: EncoderFamily = EncoderFamily.BASIC
    in_channels: int = 3
    input_size: int = CROP_SIDE
    conv_layers: List[ConvLayerSpec]
    head_dims: List[int] = Field(default_factory=list)
    global_dim: int = GLOBAL_DIM
    local_tap_layer: int = LOCAL_TAP_LAYER
    width: float = 1.0

    @model_validator(mode="after")
    def _check_tap(self):
        if not 0 <= self.local_tap_layer < len(self.conv_layers):
            raise ValueError(f"local_tap_layer {self.local_tap_layer} outside {len(self.conv_layers)} conv blocks")
        return self

    @classmethod
    def basic(cls, input_size: int = CROP_SIDE, width: float = 1.0) -> "EncoderSpec":
        return cls(
            family=EncoderFamily.BASIC, input_size=input_size, width=width,
            conv_layers=_table_to_layers(BASIC_CONV_TABLE, width),
            head_dims=[max(1, int(round(d * width))) for d in BASIC_HEAD_DIMS],
        )

    @classmethod
    def alexnet(cls, input_size: int = CROP_SIDE, width: float = 1.0) -> "EncoderSpec":
        return cls(
            family=EncoderFamily.ALEXNET, input_size=input_size, width=width,
            conv_layers=_table_to_layers(ALEXNET_CONV_TABLE, width),
            head_dims=[max(1, int(round(d * width))) for d in ALEXNET_HEAD_DIMS],
        )

    @classmethod
    def for_family(cls, family, input_size: int = CROP_SIDE, width: float = 1.0) -> "EncoderSpec":
        family = EncoderFamily(family)
        if family == EncoderFamily.ALEXNET:
            return cls.alexnet(input_size, width)
        return cls.basic(input_size, width)


class FeatureGeometry(BaseModel):
    """Spatial layout of a feature grid and the input window behind each cell."""
    height: int
    width: int
    channels: int
    receptive_field: int
    jump: int
    start_offset: int  # input coordinate of the first pixel of cell 0's window (may be negative)
    image_size: int

    @property
    def grid(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels

    def axis_window(self, index: int) -> Tuple[int, int]:
        """Inclusive [start, end] of a cell's window on one axis, clipped to the image."""
        start = self.start_offset + index * self.jump
        end = start + self.receptive_field - 1
        return max(start, 0), min(end, self.image_size - 1)

    def window(self, h: int, w: int) -> Tuple[int, int, int, int]:
        top, bottom = self.axis_window(h)
        left, right = self.axis_window(w)
        return top, bottom, left, right


# ==========================================
# PRETRAINING
# ==========================================

class ObjectiveConfig(BaseModel):
    kind: ObjectiveKind = ObjectiveKind.FC
    beta: Optional[float] = Field(default=None, ge=0)
    match_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    local_loss: LocalLoss = LocalLoss.NONE
    local_loss_weight: float = LOCAL_LOSS_WEIGHT
    estimator: Optional[Estimator] = None
    ac_threshold: float = AC_THRESHOLD

    @model_validator(mode="after")
    def _check(self):
        if self.match_prob > 0 and self.kind != ObjectiveKind.CMDIM:
            raise ValueError("match_prob only applies to the cmdim objective")
        if self.local_loss != LocalLoss.NONE and self.local_loss_weight <= 0:
            raise ValueError("local_loss_weight must be positive when a local loss is enabled")
        return self

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return DEFAULT_BVAE_BETA if self.kind == ObjectiveKind.BVAE else 1.0

    @property
    def resolved_estimator(self) -> Estimator:
        if self.estimator is not None:
            return self.estimator
        return Estimator.NCE if self.kind == ObjectiveKind.AMDIM else Estimator.DV

    @property
    def label(self) -> str:
        """Short objective label, e.g. ``cmdim_p0.5``."""
        if self.kind == ObjectiveKind.CMDIM:
            return f"cmdim_p{self.match_prob:g}"
        return self.kind.value

    @classmethod
    def from_label(cls, label: str, local_loss: str = "none", **kwargs) -> "ObjectiveConfig":
        match = re.fullmatch(r"cmdim_p([0-9.]+)", label)
        if match:
            return cls(kind=ObjectiveKind.CMDIM, match_prob=float(match.group(1)),
                       local_loss=LocalLoss(local_loss), **kwargs)
        return cls(kind=ObjectiveKind(label), local_loss=LocalLoss(local_loss), **kwargs)


class TrainBudget(BaseModel):
    steps: int = Field(default=DEFAULT_TRAIN_STEPS, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, gt=0)
    lr: float = Field(default=DEFAULT_LR, gt=0)
    log_every: int = Field(default=DEFAULT_LOG_EVERY, gt=0)


# ==========================================
# DATASETS
# ==========================================

class SyntheticSpec(BaseModel):
    num_classes: int = Field(default=20, gt=1)
    num_attributes: int = Field(default=12, gt=0)
    image_size: int = RESIZE_SIDE
    glyph_size: int = 14
    seed: int = 0
    images_per_class: int = Field(default=24, gt=0)
    num_test_classes: int = Field(default=5, gt=0)
    attribute_density: float = Field(default=0.4, gt=0, lt=1)
    jitter: int = Field(default=3, ge=0)
    noise: int = Field(default=6, ge=0)
    margin: int = 16
    class_attribute_matrix: Optional[List[List[int]]] = None


# ==========================================
# EVALUATION
# ==========================================

class ProtoConfig(BaseModel):
    steps: int = Field(default=PROTO_STEPS, gt=0)
    batch_size: int = Field(default=PROTO_BATCH_SIZE, gt=0)
    lr: float = DEFAULT_LR * 10
    embed_dim: int = PROTO_EMBED_DIM
    hidden_dim: int = PROTO_HIDDEN_DIM
    seed: int = 0
    local_samples_per_image: int = LOCAL_SAMPLES_PER_IMAGE


class ProbeConfig(BaseModel):
    steps: int = Field(default=PROBE_STEPS, gt=0)
    batch_size: int = Field(default=32, gt=0)
    lr: float = DEFAULT_LR * 10
    threshold: float = PROBE_THRESHOLD
    seed: int = 0


class MineBudget(BaseModel):
    steps: int = Field(default=MINE_STEPS, gt=0)
    batch_size: int = Field(default=MINE_BATCH_SIZE, gt=1)
    lr: float = MINE_LR
    hidden_dim: int = STATNET_HIDDEN_DIM
    seed: int = 0
    divergence_limit: float = MINE_DIVERGENCE_LIMIT


class TREBudget(BaseModel):
    steps: int = Field(default=TRE_STEPS, gt=0)
    lr: float = TRE_LR
    init_std: float = TRE_INIT_STD
    draws: int = Field(default=TRE_RANDOM_DRAWS, gt=0)
    tolerance: float = TRE_TOLERANCE
    patience: int = TRE_PATIENCE
    seed: int = 0


class ZslResult(BaseModel):
    top1: float
    per_class_accuracy: List[float]
    classes: List[int]
    num_images: int
    fingerprint: str = ""
    mode: Optional[AggregationMode] = None
    receptive_field: Optional[int] = None
    quoted_receptive_field: Optional[int] = None


class F1Report(BaseModel):
    mean_f1: float
    per_part_f1: List[float]
    flagged_parts: List[int] = Field(default_factory=list)
    threshold: float = PROBE_THRESHOLD
    convention: str = "micro over (image, location) per part, macro over parts"


class TREReport(BaseModel):
    tre_train: float
    tre_test: float
    ratio: float
    ratio_train: float
    tre_random_train: float
    tre_random_test: float
    random_matrix_seeds: List[int]
    fit_seed: int
    excluded: Dict[str, int] = Field(default_factory=dict)
    flags: List[str] = Field(default_factory=list)


# ==========================================
# HARNESS
# ==========================================

class RunRecord(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    run_id: str
    fingerprint: str
    dataset: str
    objective: str
    encoder: str
    local_loss: str
    seed: int
    metric: str
    value: float
    wall_time: float
    code_version: str


class ExperimentGrid(BaseModel):
    datasets: List[str]
    objectives: List[str]
    local_losses: List[LocalLoss] = Field(default_factory=lambda: [LocalLoss.NONE])
    encoders: List[EncoderFamily] = Field(default_factory=lambda: [EncoderFamily.BASIC])
    seeds: List[int] = Field(default_factory=lambda: [0])

    @property
    def size(self) -> int:
        return (len(self.datasets) * len(self.objectives) * len(self.local_losses)
                * len(self.encoders) * len(self.seeds))

    def cells(self) -> List[Dict[str, Any]]:
        return [
            {'dataset': d, 'objective': o, 'local_loss': l.value, 'encoder': e.value, 'seed': s}
            for d, o, l, e, s in itertools.product(
                self.datasets, self.objectives, self.local_losses, self.encoders, self.seeds
            )
        ]


class RunConfig(BaseModel):
    dataset: str = "synthetic"
    data_root: Optional[str] = None
    encoder: EncoderFamily = EncoderFamily.BASIC
    encoder_width: float = Field(default=1.0, gt=0)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    training: TrainBudget = Field(default_factory=TrainBudget)
    protonet: ProtoConfig = Field(default_factory=ProtoConfig)
    probes: ProbeConfig = Field(default_factory=ProbeConfig)
    mine: MineBudget = Field(default_factory=MineBudget)
    tre: TREBudget = Field(default_factory=TREBudget)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    seed: int = 0
    out_dir: str = "runs"
    zfs_strict: bool = True

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec.for_family(self.encoder, width=self.encoder_width)

    @property
    def run_name(self) -> str:
        return (f"{self.dataset}-{self.encoder.value}-{self.objective.label}"
                f"-{self.objective.local_loss.value}-s{self.seed}")
