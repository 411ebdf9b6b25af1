# backend/controllers/experiments_controller.py
"""
Controllers for train, eval-zsl, probe-parts and tre. Each returns a summary
dict and appends its metrics to the results store.
"""
import logging
import time
from typing import Any, Dict, Optional

from core.container import ServiceContainer
from models.enums import AggregationMode, ObjectiveKind, PoolTap
from models.models import RunConfig
from services.compositionality import binarize_attributes, tre_ratio
from services.encoders import extract_features, freeze_encoder
from services.part_maps import feature_part_maps
from services.probes import format_f1_table, parts_f1, train_part_probes
from services.reporting import LOCAL_METRIC_PREFIX, METRIC_PARTS_F1, METRIC_TRE_RATIO, METRIC_ZSL, POOL_METRIC_PREFIX
from services.trainer import classifier_accuracy, train_encoder
from services.zsl_eval import ProtoModel, evaluate_encoder, evaluate_local_modes, pool_variant_eval, predict_zsl
from utils.errors import ConfigError, TapUnavailableError
from utils.run_logger import RunLogger

logger = logging.getLogger(__name__)


def train_command(config: RunConfig, container: ServiceContainer,
                  init_checkpoint: Optional[str] = None) -> Dict[str, Any]:
    started = time.time()
    data = container.load_dataset(config)
    run_dir = container.run_dir(config)
    result = train_encoder(
        config.objective, data, config.training, config.encoder_spec(), config.seed, run_dir,
        zfs_strict=config.zfs_strict, init_checkpoint=init_checkpoint, proto_config=config.protonet,
        progress=True,
    )
    metrics = {"final_total_loss": next(v for s, n, v in reversed(result.curve) if n == "total")}
    if config.objective.kind == ObjectiveKind.FC:
        metrics["train_accuracy"] = classifier_accuracy(result, data)
    container.record(config, metrics, started)
    return {"checkpoint": str(result.checkpoint_path), "run_dir": str(run_dir), **metrics}


def _pn_model(provenance_extras: Dict[str, Any], feature_dim: int, attribute_dim: int, config: RunConfig) -> ProtoModel:
    state = {k[len("model."):]: v for k, v in provenance_extras["objective"].items() if k.startswith("model.")}
    model = ProtoModel(feature_dim, attribute_dim, config.protonet.embed_dim, config.protonet.hidden_dim)
    model.load_state_dict(state)
    return model.eval()


def eval_zsl_command(config: RunConfig, container: ServiceContainer, checkpoint: Optional[str] = None,
                     local: bool = True) -> Dict[str, Any]:
    """Global-feature ZSL plus, optionally, the local-aggregation and pool-tap variants."""
    started = time.time()
    data = container.load_dataset(config)
    encoder, provenance = container.load_encoder_with_provenance(config, checkpoint)
    freeze_encoder(encoder)

    if config.objective.kind == ObjectiveKind.PN:
        test = extract_features(encoder, data, data.test_indices)
        model = _pn_model(provenance["extras"], encoder.spec.global_dim, data.num_attributes, config)
        result = predict_zsl(model, test.global_features, test.labels, data.attributes,
                             data.split.test_classes, data.split.train_classes)
    else:
        result = evaluate_encoder(encoder, data, config.protonet)
    metrics = {METRIC_ZSL: 100.0 * result.top1}

    pool_variants: Dict[str, Any] = {}
    if local:
        for mode, local_result in evaluate_local_modes(encoder, data, config.protonet).items():
            metrics[f"{LOCAL_METRIC_PREFIX}{mode.value}"] = 100.0 * local_result.top1
        for tap in PoolTap:
            try:
                for mode in AggregationMode:
                    pooled = pool_variant_eval(encoder, tap, data, config.protonet, mode)
                    metrics[f"{POOL_METRIC_PREFIX}{tap.value}:{mode.value}"] = 100.0 * pooled.top1
                    pool_variants[f"{tap.value}:{mode.value}"] = pooled.model_dump(
                        mode="json", include={"top1", "receptive_field", "quoted_receptive_field"})
            except TapUnavailableError as e:
                logger.info(f"[Protonet] skipping pool variants: {e}")
                break

    container.record(config, metrics, started)
    RunLogger(container.run_dir(config)).write_metadata({"zsl": result.model_dump(mode="json"),
                                                         "pool_variants": pool_variants})
    return {"top1": result.top1, "per_class_accuracy": result.per_class_accuracy, **metrics}


def probe_parts_command(config: RunConfig, container: ServiceContainer,
                        checkpoint: Optional[str] = None) -> Dict[str, Any]:
    """Probes fit on train-split images, scored on test-split images."""
    started = time.time()
    data = container.load_dataset(config)
    if data.parts is None:
        raise ConfigError(f"{data.name} has no part annotations")
    encoder = freeze_encoder(container.load_encoder(config, checkpoint))
    sizes = data.image_sizes()

    train = extract_features(encoder, data, data.train_indices)
    test = extract_features(encoder, data, data.test_indices)
    train_maps = feature_part_maps(data.parts, sizes, train.geometry, data.train_indices)
    test_maps = feature_part_maps(data.parts, sizes, test.geometry, data.test_indices)

    probes = train_part_probes(train.local_features, train_maps, config.probes, encoder)
    report = parts_f1(probes, test.local_features, test_maps, config.probes.threshold)

    run_dir = container.run_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "parts_f1.txt").write_text(format_f1_table(report, data.parts.part_names) + "\n", encoding="utf-8")
    container.record(config, {METRIC_PARTS_F1: report.mean_f1}, started)
    RunLogger(run_dir).write_metadata({"parts_f1": report.model_dump(mode="json")})
    return report.model_dump(mode="json")


def tre_command(config: RunConfig, container: ServiceContainer,
                checkpoint: Optional[str] = None) -> Dict[str, Any]:
    started = time.time()
    data = container.load_dataset(config)
    encoder = freeze_encoder(container.load_encoder(config, checkpoint))
    raw = data.raw_attributes if data.raw_attributes is not None else data.attributes
    binary = binarize_attributes(raw, data.split.train_classes)

    train = extract_features(encoder, data, data.train_indices)
    test = extract_features(encoder, data, data.test_indices)
    report = tre_ratio(train.global_features.double(), train.labels, test.global_features.double(), test.labels,
                       binary.matrix, config.tre)
    report.flags.extend(binary.flags)

    metrics = {METRIC_TRE_RATIO: report.ratio, f"{METRIC_TRE_RATIO}_train": report.ratio_train}
    container.record(config, metrics, started)
    RunLogger(container.run_dir(config)).write_metadata({"tre": report.model_dump(mode="json")})
    return report.model_dump(mode="json")
