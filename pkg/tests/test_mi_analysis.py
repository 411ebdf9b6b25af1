"""
Tests for MINE, PMI heatmaps, similarities and the parts-ratio study.
"""
import math

import numpy as np
import pandas as pd
import pytest
import torch
from scipy.signal import correlate2d

from conftest import tiny_spec
from models.bundles import PMIHeatmap
from models.models import EncoderSpec, MineBudget
from services.encoders import build_encoder, freeze_encoder
from services.mi_analysis import (
    PairSampler, StatisticsNetwork, attribute_similarity, dv_bound, estimate_mi, gaussian_window, normalize_scores,
    parts_ratio, pmi_heatmap, ratio_correlation_study, render_heatmap, sample_cross_class_pairs, ssim,
    train_mine, train_mine_on_pairs,
)
from services.synthetic import generate_synthetic
from utils.errors import ConfigError, InputShapeError, ZFSViolationError


def reference_ssim(a: np.ndarray, b: np.ndarray) -> float:
    window = gaussian_window().numpy()
    mu_a, mu_b = correlate2d(a, window, "valid"), correlate2d(b, window, "valid")
    var_a = correlate2d(a * a, window, "valid") - mu_a ** 2
    var_b = correlate2d(b * b, window, "valid") - mu_b ** 2
    cov = correlate2d(a * b, window, "valid") - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    value = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(value.mean())


# =====================================================================
# Bound
# =====================================================================

class TestBound:

    def test_zero_statistic_gives_zero(self):
        torch.testing.assert_close(dv_bound(torch.zeros(16), torch.zeros(16)), torch.tensor(0.0))

    def test_constant_shift_cancels(self):
        joint, marginal = torch.randn(32), torch.randn(32)
        torch.testing.assert_close(dv_bound(joint + 3.0, marginal + 3.0), dv_bound(joint, marginal))

    def test_independent_samples_give_small_estimate(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal(2000), rng.standard_normal(2000)
        statnet = train_mine_on_pairs(x, y, MineBudget(steps=200, batch_size=128, hidden_dim=32))
        assert statnet.steps_trained == 200
        assert abs(estimate_mi(statnet, x, y)) < 0.1

    def test_mismatched_pairs(self):
        with pytest.raises(InputShapeError):
            train_mine_on_pairs(np.zeros(5), np.zeros(6))

    def test_encoder_must_be_frozen(self, tiny_bundle):
        encoder = build_encoder(EncoderSpec.basic(width=0.125), seed=0)
        with pytest.raises(ZFSViolationError):
            train_mine(None, encoder, tiny_bundle, MineBudget(steps=1))


class TestPairSampler:

    def test_marginal_never_returns_the_owner(self, rng):
        x = torch.arange(4, dtype=torch.float32)[:, None]
        owner = np.repeat(np.arange(4), 3)
        sampler = PairSampler(x, torch.zeros(12, 1), owner)
        k = np.tile(np.arange(12), 200)
        drawn, _ = sampler.marginal(k, rng)
        drawn = drawn[:, 0].numpy().astype(int)
        assert (drawn != owner[k]).all()
        for source in range(4):
            assert set(drawn[owner[k] == source]) == set(range(4)) - {source}

    def test_needs_two_source_rows(self):
        with pytest.raises(InputShapeError):
            PairSampler(torch.zeros(1, 2), torch.zeros(3, 2), np.zeros(3, dtype=int))


@pytest.mark.slow
def test_correlated_gaussians_recover_true_mi():
    rho = 0.9
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20000)
    y = rho * x + math.sqrt(1 - rho ** 2) * rng.standard_normal(20000)
    budget = MineBudget(steps=3000, batch_size=512, lr=1e-3, hidden_dim=64)
    statnet = train_mine_on_pairs(x, y, budget)
    true_mi = -0.5 * math.log(1 - rho ** 2)  # 0.8304 nats
    assert estimate_mi(statnet, x, y) == pytest.approx(true_mi, rel=0.15)
    y_shuffled = rng.permutation(y)
    shuffled = train_mine_on_pairs(x, y_shuffled, budget)
    assert abs(estimate_mi(shuffled, x, y_shuffled)) <= 0.05


# =====================================================================
# Heatmaps
# =====================================================================

class TestHeatmap:

    @pytest.fixture
    def statnet(self):
        torch.manual_seed(0)
        return StatisticsNetwork(8, 4, hidden_dim=16)

    def test_normalized_sums_to_one(self, statnet):
        heatmap = pmi_heatmap(statnet, torch.randn(8), torch.randn(4, 3, 5), source_id=1, target_id=2)
        assert heatmap.scores.shape == (3, 5)
        assert heatmap.normalized.sum() == pytest.approx(1.0, abs=1e-6)
        assert (heatmap.source_id, heatmap.target_id) == (1, 2)

    def test_normalization_ignores_constant_shift(self, rng):
        scores = rng.standard_normal((4, 6)) * 3
        np.testing.assert_allclose(normalize_scores(scores + 17.5), normalize_scores(scores), rtol=0, atol=1e-9)
        np.testing.assert_allclose(normalize_scores(np.zeros((2, 2))), np.full((2, 2), 0.25))

    def test_untrained_statnet_is_flagged(self, statnet):
        heatmap = pmi_heatmap(statnet, torch.randn(8), torch.randn(4, 2, 2))
        assert heatmap.flags == ["untrained_statnet"]
        statnet.steps_trained = 10
        assert pmi_heatmap(statnet, torch.randn(8), torch.randn(4, 2, 2)).flags == []

    def test_render_writes_files(self, statnet, tmp_path):
        heatmap = pmi_heatmap(statnet, torch.randn(8), torch.randn(4, 4, 4), 3, 7)
        paths = render_heatmap(heatmap, np.zeros((32, 32, 3)), tmp_path)
        assert all(p.exists() for p in paths.values())
        assert paths["overlay"].name == "pmi_3_7_overlay.png"
        np.testing.assert_allclose(np.loadtxt(paths["scores"]), heatmap.scores, atol=1e-5)


class TestPartsRatio:

    def _heatmap(self, normalized):
        normalized = np.asarray(normalized, dtype=float)
        return PMIHeatmap(scores=normalized, normalized=normalized, source_id=0, target_id=1)

    def test_ratio_of_means(self):
        heatmap = self._heatmap([[0.4, 0.1], [0.1, 0.4]])
        union = np.array([[True, False], [False, False]])
        assert parts_ratio(heatmap, union) == pytest.approx(0.4 / 0.25)

    def test_uniform_heatmap_gives_one(self):
        heatmap = self._heatmap(np.full((3, 3), 1 / 9))
        assert parts_ratio(heatmap, np.eye(3, dtype=bool)) == pytest.approx(1.0)

    def test_empty_union_is_nan_and_flagged(self):
        heatmap = self._heatmap(np.full((2, 2), 0.25))
        assert math.isnan(parts_ratio(heatmap, np.zeros((2, 2), dtype=bool)))
        assert "empty_part_union" in heatmap.flags

    def test_shape_mismatch(self):
        with pytest.raises(InputShapeError):
            parts_ratio(self._heatmap(np.full((2, 2), 0.25)), np.ones((3, 3), dtype=bool))


# =====================================================================
# Similarities
# =====================================================================

class TestSimilarities:

    def test_identical_images_give_one(self, rng):
        image = rng.random((32, 32, 3))
        assert ssim(image, image) == pytest.approx(1.0)

    def test_matches_reference(self, rng):
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-9)

    def test_channel_first_and_uint8_inputs(self, rng):
        image = (rng.random((20, 20, 3)) * 255).astype(np.uint8)
        assert ssim(image, image.transpose(2, 0, 1)) == pytest.approx(1.0)

    def test_ssim_shape_errors(self):
        with pytest.raises(InputShapeError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))
        with pytest.raises(InputShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_attribute_similarity(self):
        attributes = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        assert attribute_similarity(0, 1, attributes) == pytest.approx(1 / math.sqrt(2))
        assert attribute_similarity(0, 2, attributes) == 0.0


# =====================================================================
# Study
# =====================================================================

class TestRatioStudy:

    def test_pairs_cross_classes(self, rng):
        labels = np.array([0, 0, 1, 1, 2])
        pairs = sample_cross_class_pairs(labels, np.arange(5), 50, rng)
        assert pairs.shape == (50, 2)
        assert (labels[pairs[:, 0]] != labels[pairs[:, 1]]).all()

    def test_pairs_need_two_classes(self, rng):
        with pytest.raises(ConfigError):
            sample_cross_class_pairs(np.array([0, 0, 1]), np.array([0, 1]), 5, rng)

    @pytest.fixture(scope="class")
    def study_bundle(self):
        """Five unseen classes, so attribute similarity varies across pairs."""
        return generate_synthetic(tiny_spec(num_test_classes=5))

    def test_study_writes_rows(self, study_bundle, tmp_path):
        encoder = freeze_encoder(build_encoder(EncoderSpec.basic(width=0.125), seed=0))
        statnet = train_mine(None, encoder, study_bundle, MineBudget(steps=5, batch_size=32, hidden_dim=16))
        out_csv = tmp_path / "study" / "pairs.csv"
        study = ratio_correlation_study(statnet, encoder, study_bundle, n_pairs=40, seed=0, out_csv=out_csv)
        frame = pd.read_csv(out_csv)
        assert list(frame.columns) == ["source", "target", "ratio", "sim_attr", "ssim"]
        assert len(frame) == 40
        assert study.num_pairs + study.dropped == 40
        assert -1.0 <= study.r_attr <= 1.0
        test_classes = set(study_bundle.split.test_classes.tolist())
        assert set(study_bundle.labels[frame["source"]].tolist()) <= test_classes
