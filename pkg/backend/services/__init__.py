# services/__init__.py
"""
Export services
"""
from .datasets import load_zsl_dataset, write_zsl_dataset, preprocess, preprocess_batch
from .part_maps import build_part_maps, project_part_maps, feature_part_maps
from .synthetic import generate_synthetic
from .encoders import Encoder, build_encoder, receptive_field, extract_features, load_checkpoint, save_checkpoint
from .objectives import build_objective, cmdim_pairing, infomax_bound, local_aux_loss
from .zsl_eval import ProtoModel, fit_protonet, predict_zsl, evaluate_encoder, evaluate_local_modes
from .trainer import train_encoder, pn_end_to_end
from .probes import PartProbeSet, train_part_probes, parts_f1
from .mi_analysis import StatisticsNetwork, train_mine, estimate_mi, pmi_heatmap, ssim, ratio_correlation_study
from .compositionality import binarize_attributes, fit_tre, tre_ratio
from .results_store import ResultsStore
from .reporting import report_table, emit_figures

__all__ = [
    "load_zsl_dataset",
    "write_zsl_dataset",
    "preprocess",
    "preprocess_batch",
    "build_part_maps",
    "project_part_maps",
    "feature_part_maps",
    "generate_synthetic",
    "Encoder",
    "build_encoder",
    "receptive_field",
    "extract_features",
    "load_checkpoint",
    "save_checkpoint",
    "build_objective",
    "cmdim_pairing",
    "infomax_bound",
    "local_aux_loss",
    "ProtoModel",
    "fit_protonet",
    "predict_zsl",
    "evaluate_encoder",
    "evaluate_local_modes",
    "train_encoder",
    "pn_end_to_end",
    "PartProbeSet",
    "train_part_probes",
    "parts_f1",
    "StatisticsNetwork",
    "train_mine",
    "estimate_mi",
    "pmi_heatmap",
    "ssim",
    "ratio_correlation_study",
    "binarize_attributes",
    "fit_tre",
    "tre_ratio",
    "ResultsStore",
    "report_table",
    "emit_figures",
]
