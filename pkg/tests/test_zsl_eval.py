"""
Tests for prototypical-network zero-shot evaluation.
"""
import numpy as np
import pytest
import torch
import torch.nn as nn

from constants import QUOTED_ALEXNET_POOL_RF
from models.enums import AggregationMode
from models.models import EncoderSpec, ProtoConfig
from services.encoders import build_encoder, extract_features, freeze_encoder, is_frozen, parameter_checksum
from services.zsl_eval import (
    ProtoModel, aggregate_local, evaluate_encoder, evaluate_local_modes, fit_local_protonet, fit_protonet,
    nearest_prototype, pool_variant_eval, predict_zsl, prototypical_loss,
)
from utils.errors import DegenerateTaskError, MissingAttributeError, TapUnavailableError, ZFSViolationError

SMALL = ProtoConfig(steps=300, batch_size=64, lr=1e-3, embed_dim=32, hidden_dim=64, seed=0)


def identity_model(dim: int) -> ProtoModel:
    """Both embedders are the identity on non-negative inputs."""
    model = ProtoModel(dim, dim, embed_dim=dim, hidden_dim=dim)
    with torch.no_grad():
        for embedder in (model.image_embedder, model.attribute_embedder):
            for layer in embedder:
                if isinstance(layer, nn.Linear):
                    layer.weight.copy_(torch.eye(dim))
                    layer.bias.zero_()
    return model


@pytest.fixture
def attribute_task():
    """30 classes with unique binary attributes; features are noisy attribute vectors."""
    rng = np.random.default_rng(0)
    codes = rng.permutation(1023)[:30] + 1
    attributes = ((codes[:, None] >> np.arange(10)) & 1).astype(float)
    train_classes, test_classes = np.arange(20), np.arange(20, 30)
    labels = np.repeat(np.arange(30), 10)
    features = attributes[labels] + 0.05 * rng.standard_normal((labels.size, 10))
    return attributes, train_classes, test_classes, labels, features


# =====================================================================
# Prediction
# =====================================================================

class TestPredict:

    def test_identity_embedders_are_perfect(self, attribute_task):
        attributes, train_classes, test_classes, labels, _ = attribute_task
        mask = np.isin(labels, test_classes)
        result = predict_zsl(identity_model(10), attributes[labels[mask]], labels[mask], attributes,
                             test_classes, train_classes)
        assert result.top1 == 1.0
        assert result.per_class_accuracy == [1.0] * 10
        assert result.classes == list(range(20, 30))
        assert result.num_images == 100

    def test_ties_go_to_lowest_column(self):
        model = identity_model(2)
        protos = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        assert nearest_prototype(model, torch.tensor([[0.5, 0.5]]), protos).tolist() == [0]

    def test_missing_attribute_row(self, attribute_task):
        attributes, *_ = attribute_task
        with pytest.raises(MissingAttributeError):
            predict_zsl(identity_model(10), attributes[:2], [0, 1], attributes, [0, 40])

    def test_test_class_order_does_not_matter(self, attribute_task):
        attributes, train_classes, test_classes, labels, features = attribute_task
        seen = np.isin(labels, train_classes)
        model = fit_protonet(features[seen], labels[seen], attributes, train_classes,
                             SMALL.model_copy(update={"steps": 20}))
        ordered = predict_zsl(model, features[~seen], labels[~seen], attributes, test_classes, train_classes)
        shuffled = np.random.default_rng(1).permutation(test_classes)
        permuted = predict_zsl(model, features[~seen], labels[~seen], attributes, shuffled, train_classes)
        assert permuted.classes == ordered.classes
        assert permuted.per_class_accuracy == ordered.per_class_accuracy
        assert permuted.top1 == ordered.top1

    def test_scaled_embeddings_pick_the_same_prototype(self):
        torch.manual_seed(0)
        model = ProtoModel(6, 4, embed_dim=5, hidden_dim=8)
        scaled = ProtoModel(6, 4, embed_dim=5, hidden_dim=8)
        scaled.load_state_dict(model.state_dict())
        with torch.no_grad():
            for embedder in (scaled.image_embedder, scaled.attribute_embedder):
                embedder[-1].weight.mul_(3.0)
                embedder[-1].bias.mul_(3.0)
        features, protos = torch.randn(50, 6), torch.randn(7, 4)
        torch.testing.assert_close(scaled.distances(features, protos), 9.0 * model.distances(features, protos))
        np.testing.assert_array_equal(nearest_prototype(scaled, features, protos),
                                      nearest_prototype(model, features, protos))

    def test_unseen_overlapping_seen(self, attribute_task):
        attributes, train_classes, *_ = attribute_task
        with pytest.raises(DegenerateTaskError):
            predict_zsl(identity_model(10), attributes[:2], [0, 1], attributes, [0, 25], train_classes)


# =====================================================================
# Fitting
# =====================================================================

class TestFitProtonet:

    def test_loss_is_softmax_over_present_prototypes(self):
        model = identity_model(2)
        protos = torch.tensor([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
        loss = prototypical_loss(model, torch.tensor([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([0, 1]), protos)
        expected = torch.log1p(torch.exp(torch.tensor(-2.0)))
        torch.testing.assert_close(loss, expected)

    def test_generalizes_to_unseen_classes(self, attribute_task):
        attributes, train_classes, test_classes, labels, features = attribute_task
        seen = np.isin(labels, train_classes)
        model = fit_protonet(features[seen], labels[seen], attributes, train_classes, SMALL)
        result = predict_zsl(model, features[~seen], labels[~seen], attributes, test_classes, train_classes)
        assert result.top1 > 0.25

    def test_same_seed_same_model(self, attribute_task):
        attributes, train_classes, _, labels, features = attribute_task
        seen = np.isin(labels, train_classes)
        config = SMALL.model_copy(update={"steps": 10})
        a = fit_protonet(features[seen], labels[seen], attributes, train_classes, config)
        b = fit_protonet(features[seen], labels[seen], attributes, train_classes, config)
        for pa, pb in zip(a.parameters(), b.parameters()):
            torch.testing.assert_close(pa, pb)

    def test_needs_two_classes(self, attribute_task):
        attributes, train_classes, *_ = attribute_task
        with pytest.raises(DegenerateTaskError):
            fit_protonet(np.zeros((4, 10)), [0, 0, 0, 0], attributes, train_classes, SMALL)

    def test_refuses_unseen_labels(self, attribute_task):
        attributes, train_classes, *_ = attribute_task
        with pytest.raises(DegenerateTaskError):
            fit_protonet(np.zeros((2, 10)), [0, 25], attributes, train_classes, SMALL)

    def test_refuses_trainable_encoder(self, attribute_task):
        attributes, train_classes, *_ = attribute_task
        encoder = build_encoder(EncoderSpec.basic(width=0.125), seed=0)
        with pytest.raises(ZFSViolationError):
            fit_protonet(np.zeros((2, 10)), [0, 1], attributes, train_classes, SMALL, encoder=encoder)


# =====================================================================
# Local features
# =====================================================================

class TestLocalAggregation:

    def test_modes_agree_on_constant_grids(self, attribute_task):
        attributes, _, test_classes, *_ = attribute_task
        vectors = torch.as_tensor(attributes[test_classes], dtype=torch.float32)
        grid = vectors[:, :, None, None].expand(-1, -1, 3, 3)
        model = identity_model(10)
        reps = aggregate_local(grid, "average_representations", model, attributes, test_classes)
        preds = aggregate_local(grid, "average_predictions", model, attributes, test_classes)
        np.testing.assert_allclose(reps.scores, preds.scores, atol=1e-6)
        np.testing.assert_array_equal(reps.predicted, test_classes)

    def test_single_cell_grid_matches_global_path(self, attribute_task):
        attributes, _, test_classes, labels, features = attribute_task
        torch.manual_seed(0)
        model = ProtoModel(10, 10, embed_dim=8, hidden_dim=16).eval()
        vectors = torch.as_tensor(features[np.isin(labels, test_classes)], dtype=torch.float32)
        prediction = aggregate_local(vectors[:, :, None, None], "average_representations", model,
                                     attributes, test_classes)
        class_attributes = torch.as_tensor(attributes[test_classes], dtype=torch.float32)
        with torch.no_grad():
            expected = torch.softmax(model(vectors, class_attributes), dim=1).numpy()
        np.testing.assert_array_equal(prediction.scores, expected)
        np.testing.assert_array_equal(prediction.predicted,
                                      test_classes[nearest_prototype(model, vectors, class_attributes)])

    def test_average_predictions_averages_probabilities(self):
        attributes = np.eye(2)
        grid = torch.zeros(1, 2, 1, 2)
        grid[0, :, 0, 0] = torch.tensor([1.0, 0.0])
        grid[0, :, 0, 1] = torch.tensor([0.0, 1.0])
        prediction = aggregate_local(grid, "average_predictions", identity_model(2), attributes, [0, 1])
        np.testing.assert_allclose(prediction.scores, [[0.5, 0.5]], atol=1e-6)

    def test_local_fit_samples_locations(self, attribute_task):
        attributes, train_classes, _, labels, features = attribute_task
        seen = np.isin(labels, train_classes)
        grid = torch.as_tensor(features[seen], dtype=torch.float32)[:, :, None, None].expand(-1, -1, 4, 4)
        config = SMALL.model_copy(update={"steps": 5, "local_samples_per_image": 3})
        model = fit_local_protonet(grid, labels[seen], attributes, train_classes, "average_predictions", config)
        assert isinstance(model, ProtoModel)


# =====================================================================
# Encoder-level evaluation
# =====================================================================

class TestEvaluateEncoder:

    @pytest.fixture
    def encoder(self):
        return build_encoder(EncoderSpec.basic(width=0.125), seed=0)

    def test_global_evaluation(self, encoder, tiny_bundle):
        config = ProtoConfig(steps=5, batch_size=16, embed_dim=16, hidden_dim=16)
        result = evaluate_encoder(encoder, tiny_bundle, config, batch_size=16)
        assert result.classes == tiny_bundle.split.test_classes.tolist()
        assert result.num_images == len(tiny_bundle.test_indices)
        assert 0.0 <= result.top1 <= 1.0
        assert is_frozen(encoder)

    def test_fitting_leaves_encoder_untouched(self, encoder, tiny_bundle):
        freeze_encoder(encoder)
        before = parameter_checksum(encoder)
        train = extract_features(encoder, tiny_bundle, tiny_bundle.train_indices, batch_size=16)
        fit_protonet(train.global_features, train.labels, tiny_bundle.attributes, tiny_bundle.split.train_classes,
                     ProtoConfig(steps=5, batch_size=16, embed_dim=16, hidden_dim=16), encoder=encoder)
        assert parameter_checksum(encoder) == before

    def test_local_modes(self, encoder, tiny_bundle):
        config = ProtoConfig(steps=5, batch_size=16, embed_dim=16, hidden_dim=16, local_samples_per_image=4)
        results = evaluate_local_modes(encoder, tiny_bundle, config, batch_size=16)
        assert set(results) == set(AggregationMode)
        assert all(r.mode == mode for mode, r in results.items())

    def test_pool_variants_report_computed_and_quoted_fields(self, tiny_bundle):
        alexnet = build_encoder(EncoderSpec.alexnet(width=0.0625), seed=0)
        config = ProtoConfig(steps=5, batch_size=16, embed_dim=16, hidden_dim=16)
        pre = pool_variant_eval(alexnet, "pre_pool", tiny_bundle, config, batch_size=16)
        post = pool_variant_eval(alexnet, "post_pool", tiny_bundle, config, batch_size=16)
        assert (pre.receptive_field, post.receptive_field) == (61, 77)
        assert (pre.quoted_receptive_field, post.quoted_receptive_field) == QUOTED_ALEXNET_POOL_RF

    def test_pool_variant_needs_pooling_encoder(self, encoder, tiny_bundle):
        with pytest.raises(TapUnavailableError):
            pool_variant_eval(encoder, "pre_pool", tiny_bundle)
