"""
Tests for the pretraining objectives: pairing, MI bounds, auxiliary losses.
"""
import logging
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from models.bundles import PairingPlan
from models.enums import Estimator, ObjectiveKind
from models.models import EncoderSpec, ObjectiveConfig, ProtoConfig
from services.encoders import build_encoder
from services.objectives import (
    Decoder, Discriminator, InfoMaxHead, TrainingBatch, aae_loss, attribute_targets, build_objective, cmdim_pairing,
    gaussian_kl, global_aux_loss, identity_plan, infomax_bound, infomax_loss, local_aux_loss, supervised_loss,
    vae_loss,
)
from utils.errors import EmptyBatchError, LabelOutOfRangeError


# =====================================================================
# Pairing
# =====================================================================

class TestCmdimPairing:

    def test_p_zero_is_identity(self, rng):
        labels = rng.integers(0, 4, size=64)
        plan = cmdim_pairing(labels, 0.0, rng)
        np.testing.assert_array_equal(plan.positive, np.arange(64))
        assert not plan.intra_class.any()

    def test_p_one_always_picks_a_sibling(self, rng):
        labels = np.repeat(np.arange(8), 4)
        plan = cmdim_pairing(labels, 1.0, rng)
        assert plan.intra_class.all()
        assert (plan.positive != np.arange(32)).all()
        np.testing.assert_array_equal(labels[plan.positive], labels)

    def test_singletons_keep_themselves(self, rng):
        labels = np.array([0, 1, 1, 2])
        plan = cmdim_pairing(labels, 1.0, rng)
        assert plan.positive[0] == 0 and plan.positive[3] == 3
        assert not plan.intra_class[[0, 3]].any()
        assert plan.positive[1] == 2 and plan.positive[2] == 1

    def test_intra_fraction_tracks_p(self):
        """Batches of 64 over 4 classes: every anchor has siblings, so P(intra) = p."""
        rng = np.random.default_rng(0)
        for p in (0.1, 0.5):
            draws = [cmdim_pairing(rng.integers(0, 4, size=64), p, rng).intra_class.mean() for _ in range(500)]
            # 32000 Bernoulli(p) draws; 5 standard errors
            assert abs(np.mean(draws) - p) < 5 * math.sqrt(p * (1 - p) / 32000)

    def test_siblings_are_uniform(self):
        rng = np.random.default_rng(1)
        labels = np.array([0, 0, 0, 0, 1])
        counts = np.zeros(5)
        for _ in range(6000):
            counts[cmdim_pairing(labels, 1.0, rng).positive[0]] += 1
        assert counts[0] == 0 and counts[4] == 0
        np.testing.assert_allclose(counts[1:4] / 6000, 1 / 3, atol=0.03)

    def test_negatives_are_other_classes(self, rng):
        labels = np.array([0, 0, 1, 2])
        mask = cmdim_pairing(labels, 0.5, rng).negative_mask
        np.testing.assert_array_equal(mask[0], [False, False, True, True])
        np.testing.assert_array_equal(mask[2], [True, True, False, True])

    def test_single_class_batch_has_no_negatives(self, rng):
        mask = cmdim_pairing(np.zeros(3, dtype=int), 1.0, rng).negative_mask
        assert not mask.any()

    def test_empty_batch(self, rng):
        with pytest.raises(EmptyBatchError):
            cmdim_pairing([], 0.5, rng)
        with pytest.raises(EmptyBatchError):
            identity_plan([])


# =====================================================================
# MI bounds
# =====================================================================

class TestInfomaxBound:

    def _scores(self, n=4, cells=3, diag=2.0):
        scores = torch.zeros(n, n, cells)
        scores[torch.arange(n), torch.arange(n)] = diag
        return scores

    def test_dv_value(self):
        plan = identity_plan(np.arange(4))
        bound = infomax_bound(self._scores(), plan, "dv")
        torch.testing.assert_close(bound, torch.tensor(2.0))

    def test_nce_value(self):
        plan = identity_plan(np.arange(4))
        bound = infomax_bound(self._scores(), plan, "nce")
        expected = 2.0 - math.log(math.exp(2.0) + 3.0) + math.log(4.0)
        torch.testing.assert_close(bound, torch.tensor(expected))

    def test_jsd_value(self):
        plan = identity_plan(np.arange(4))
        bound = infomax_bound(self._scores(), plan, "jsd")
        expected = -math.log1p(math.exp(-2.0)) - math.log(2.0)
        torch.testing.assert_close(bound, torch.tensor(expected))

    def test_uninformative_scores_give_zero_dv(self):
        plan = identity_plan(np.arange(5))
        torch.testing.assert_close(infomax_bound(torch.full((5, 5, 2), 0.7), plan, "dv"), torch.tensor(0.0))

    def test_positive_index_is_respected(self):
        scores = torch.zeros(2, 2, 1)
        scores[1, 0] = 3.0  # global 1 scored against anchor 0
        plan = PairingPlan(positive=np.array([1, 1]), intra_class=np.array([True, False]),
                           labels=np.array([0, 0]))
        # anchor 0: positive 3, negative set {global 1} -> 3 - 3; anchor 1: 0 - log mean exp(scores[0, 1])
        torch.testing.assert_close(infomax_bound(scores, plan, "dv"), torch.tensor(0.0))

    def test_needs_a_negative(self):
        with pytest.raises(EmptyBatchError):
            infomax_bound(torch.zeros(1, 1, 2), identity_plan([0]), "dv")

    @pytest.mark.parametrize("estimator", ["dv", "nce", "jsd"])
    def test_single_class_batch_is_never_contrasted(self, rng, caplog, estimator):
        scores = torch.randn(3, 3, 2, requires_grad=True)
        plan = cmdim_pairing(np.zeros(3, dtype=int), 1.0, rng)
        with caplog.at_level(logging.WARNING, logger="services.objectives"):
            bound = infomax_bound(scores, plan, estimator)
        assert bound.item() == 0.0
        bound.backward()
        assert torch.count_nonzero(scores.grad) == 0
        assert "share one class" in caplog.text

    def test_anchors_without_negatives_are_left_out(self):
        scores = self._scores(n=3, diag=2.0)
        plan = identity_plan(np.arange(3))
        mask = plan.negative_mask.copy()
        mask[2] = False
        plan.__dict__["negative_mask"] = mask
        # anchors 0 and 1: positive 2, negatives score 0 -> 2 - log mean exp(0)
        torch.testing.assert_close(infomax_bound(scores, plan, "dv"), torch.tensor(2.0))


# =====================================================================
# Auxiliary losses
# =====================================================================

class TestAuxiliaryLosses:

    def test_attribute_targets_centre_on_train_mean(self):
        attributes = np.array([[1.0, 0.2], [0.0, 0.4], [0.5, 0.9]])
        targets = attribute_targets(attributes, train_classes=[0, 1])
        np.testing.assert_array_equal(targets, [[1, 0], [0, 1], [0, 1]])

    def test_local_ac_matches_manual_average(self):
        torch.manual_seed(0)
        head = nn.Conv2d(4, 3, 1)
        local = torch.randn(2, 4, 2, 2)
        target = torch.tensor([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        loss = local_aux_loss(local, target, "ac", head)
        logits = head(local)
        manual = nn.functional.binary_cross_entropy_with_logits(
            logits, target[:, :, None, None].expand_as(logits))
        torch.testing.assert_close(loss, manual)

    def test_local_lc_equals_global_on_single_cell(self):
        torch.manual_seed(0)
        conv = nn.Conv2d(4, 3, 1)
        linear = nn.Linear(4, 3)
        linear.weight.data.copy_(conv.weight.data.view(3, 4))
        linear.bias.data.copy_(conv.bias.data)
        features = torch.randn(5, 4)
        labels = torch.tensor([0, 1, 2, 1, 0])
        local = local_aux_loss(features[:, :, None, None], labels, "lc", conv)
        torch.testing.assert_close(local, global_aux_loss(features, labels, "lc", linear))

    def test_gradcheck(self):
        torch.manual_seed(0)
        head = nn.Conv2d(3, 2, 1).double()
        local = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert torch.autograd.gradcheck(lambda x: local_aux_loss(x, target, "ac", head), (local,))
        labels = torch.tensor([1, 0])
        assert torch.autograd.gradcheck(lambda x: local_aux_loss(x, labels, "lc", head), (local,))

    def test_label_errors(self):
        head = nn.Conv2d(3, 2, 1)
        with pytest.raises(LabelOutOfRangeError):
            local_aux_loss(torch.randn(2, 3, 2, 2), torch.tensor([0, 5]), "lc", head)
        with pytest.raises(LabelOutOfRangeError):
            local_aux_loss(torch.randn(2, 3, 2, 2), torch.ones(2, 4), "ac", head)
        with pytest.raises(LabelOutOfRangeError):
            supervised_loss(torch.randn(2, 3), torch.tensor([0, 3]), nn.Linear(3, 3))

    def test_gaussian_kl_zero_at_prior(self):
        torch.testing.assert_close(gaussian_kl(torch.zeros(4, 8), torch.zeros(4, 8)), torch.tensor(0.0))


# =====================================================================
# Objective modules
# =====================================================================

@pytest.mark.parametrize("label", ["fc", "vae", "bvae", "aae", "dim", "amdim", "cmdim_p0.5", "pn"])
def test_every_objective_computes_a_finite_loss(label):
    spec = EncoderSpec.basic(width=0.125)
    encoder = build_encoder(spec, seed=0)
    config = ObjectiveConfig.from_label(label)
    attributes = np.eye(4)
    objective = build_objective(config, spec, encoder.local_channels, attributes, lr=1e-4, seed=1,
                                proto_config=ProtoConfig(embed_dim=8, hidden_dim=8))
    torch.manual_seed(0)
    images = torch.randn(4, 3, 112, 112).clamp(-1, 1)
    batch = TrainingBatch(images=images, labels=torch.tensor([0, 0, 1, 2]),
                          second_view=images.flip(-1) if objective.needs_two_views else None)
    out = objective.compute(encoder, batch)
    assert torch.isfinite(out.main)
    out.main.backward()
    assert out.local.shape[1] == encoder.local_channels
    assert objective.needs_two_views == (config.kind == ObjectiveKind.AMDIM)


class TestLossFunctions:

    @pytest.fixture
    def encoded(self):
        encoder = build_encoder(EncoderSpec.basic(width=0.125), seed=0)
        torch.manual_seed(0)
        images = torch.randn(4, 3, 112, 112).clamp(-1, 1)
        return encoder, images

    def test_vae_total_is_recon_plus_weighted_kl(self, encoded):
        encoder, images = encoded
        global_dim = encoder(images)[0].shape[1]
        decoder = Decoder(global_dim, 112, latent_dim=8, base_channels=16)
        out = vae_loss(encoder, decoder, images, beta=4.0)
        torch.testing.assert_close(out.total, out.recon + 4.0 * out.kl)
        assert out.kl.item() >= 0.0

    def test_aae_discriminator_loss_leaves_encoder_alone(self, encoded):
        encoder, images = encoded
        global_dim = encoder(images)[0].shape[1]
        decoder = Decoder(global_dim, 112, latent_dim=8, base_channels=16)
        out = aae_loss(encoder, decoder, Discriminator(latent_dim=8, hidden_dim=16), images)
        assert all(torch.isfinite(t) for t in (out.recon, out.generator, out.discriminator))
        out.discriminator.backward()
        assert all(p.grad is None for p in encoder.parameters())

    def test_infomax_loss_is_negative_bound(self, encoded):
        encoder, images = encoded
        global_features, local_features = encoder(images)
        head = InfoMaxHead(global_features.shape[1], local_features.shape[1], embed_dim=8)
        plan = identity_plan(np.arange(4))
        loss = infomax_loss(global_features, local_features, plan, "jsd", head)
        expected = -infomax_bound(head(global_features, local_features), plan, "jsd")
        torch.testing.assert_close(loss, expected)


def test_estimator_defaults():
    assert ObjectiveConfig.from_label("amdim").resolved_estimator == Estimator.NCE
    assert ObjectiveConfig.from_label("dim").resolved_estimator == Estimator.DV
    assert ObjectiveConfig.from_label("cmdim_p0.1").label == "cmdim_p0.1"
