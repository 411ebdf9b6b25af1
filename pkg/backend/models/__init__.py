# backend/models/__init__.py
"""
Export all models
"""
# NOTE: array containers live in models.bundles and need numpy/torch;
# import them directly from there.

from .enums import (
    ObjectiveKind,
    LocalLoss,
    EncoderFamily,
    Estimator,
    AggregationMode,
    PoolTap,
    PreprocessMode,
    ReportTable,
)
from .models import (
    ConvLayerSpec,
    EncoderSpec,
    FeatureGeometry,
    ObjectiveConfig,
    TrainBudget,
    SyntheticSpec,
    ProtoConfig,
    ProbeConfig,
    MineBudget,
    TREBudget,
    ZslResult,
    F1Report,
    TREReport,
    RunRecord,
    ExperimentGrid,
    RunConfig,
)

__all__ = [
    # Enums
    "ObjectiveKind",
    "LocalLoss",
    "EncoderFamily",
    "Estimator",
    "AggregationMode",
    "PoolTap",
    "PreprocessMode",
    "ReportTable",

    # Configs
    "ConvLayerSpec",
    "EncoderSpec",
    "FeatureGeometry",
    "ObjectiveConfig",
    "TrainBudget",
    "SyntheticSpec",
    "ProtoConfig",
    "ProbeConfig",
    "MineBudget",
    "TREBudget",

    # Results
    "ZslResult",
    "F1Report",
    "TREReport",
    "RunRecord",
    "ExperimentGrid",
    "RunConfig",
]
