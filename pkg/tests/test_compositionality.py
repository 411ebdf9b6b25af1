"""
Tests for tree reconstruction error and the TRE ratio.
"""
import logging

import numpy as np
import pytest
import torch

from models.models import TREBudget
from services.compositionality import (
    TREModel, binarize_attributes, datapoint_attributes, density_matched_random, fit_tre, tre, tre_objective,
    tre_ratio, tre_zsl_correlation,
)
from utils.errors import DegenerateSeriesError, DegenerateTaskError, InputShapeError

FIT = TREBudget(steps=1000, lr=0.05, draws=3, seed=0)


@pytest.fixture
def compositional_task():
    """Features that are exact sums of per-attribute vectors plus a little noise."""
    rng = np.random.default_rng(0)
    codes = rng.permutation(63)[:12] + 1
    classes = ((codes[:, None] >> np.arange(6)) & 1).astype(bool)
    eta = rng.standard_normal((6, 16))
    labels = np.repeat(np.arange(12), 5)

    def sample():
        return classes[labels] @ eta + 0.01 * rng.standard_normal((labels.size, 16))

    return classes, eta, labels, sample(), sample()


# =====================================================================
# Attributes
# =====================================================================

class TestAttributes:

    def test_binarize_at_train_mean(self):
        matrix = np.array([[0.9, 0.5], [0.1, 0.5], [0.6, 0.2]])
        result = binarize_attributes(matrix, train_classes=[0, 1])
        np.testing.assert_allclose(result.thresholds, [0.5, 0.5])
        np.testing.assert_array_equal(result.matrix, [[True, False], [False, False], [True, False]])
        assert result.constant_columns == [1]
        assert result.flags == ["constant_attribute:1"]

    def test_datapoint_attributes(self):
        classes = np.array([[1, 0], [0, 1]])
        np.testing.assert_array_equal(datapoint_attributes(classes, [1, 1, 0]),
                                      [[False, True], [False, True], [True, False]])

    def test_random_matrix_keeps_column_density(self, compositional_task):
        classes = compositional_task[0]
        shuffled = density_matched_random(classes, seed=3)
        np.testing.assert_array_equal(shuffled.sum(axis=0), classes.sum(axis=0))
        np.testing.assert_array_equal(shuffled, density_matched_random(classes, seed=3))
        assert not np.array_equal(shuffled, density_matched_random(classes, seed=4))


# =====================================================================
# TRE
# =====================================================================

class TestTRE:

    def test_exact_compositions_have_zero_error(self):
        rng = np.random.default_rng(1)
        eta = torch.as_tensor(rng.standard_normal((3, 5)))
        attributes = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 1], [1, 1, 1]], dtype=bool)
        features = torch.as_tensor(attributes, dtype=torch.float64) @ eta
        model = TREModel(3, 5, dtype=torch.float64)
        with torch.no_grad():
            model.eta.copy_(eta)
        assert tre(model, features, attributes) == pytest.approx(0.0, abs=1e-12)

    def test_objective_gradcheck(self):
        torch.manual_seed(0)
        eta = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        features = torch.randn(5, 4, dtype=torch.float64)
        attributes = torch.tensor([[1, 0, 0], [0, 1, 1], [1, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=torch.bool)
        assert torch.autograd.gradcheck(lambda e: tre_objective(e, features, attributes), (eta,))

    def test_fit_drives_error_down(self, compositional_task):
        classes, _, labels, features, _ = compositional_task
        fit = fit_tre(features, datapoint_attributes(classes, labels), FIT)
        assert fit.final < fit.initial
        assert fit.final < 0.05
        assert fit.history == sorted(fit.history, reverse=True)

    def test_empty_rows_are_excluded(self):
        features = np.random.default_rng(0).standard_normal((3, 4))
        attributes = np.array([[1, 0], [0, 0], [1, 1]], dtype=bool)
        fit = fit_tre(features, attributes, TREBudget(steps=5))
        assert fit.excluded == 1

    def test_all_empty_rows(self):
        with pytest.raises(DegenerateTaskError):
            fit_tre(np.ones((2, 3)), np.zeros((2, 2), dtype=bool), TREBudget(steps=5))

    def test_row_mismatch(self):
        with pytest.raises(InputShapeError):
            fit_tre(np.ones((2, 3)), np.ones((3, 2), dtype=bool), TREBudget(steps=5))


# =====================================================================
# Ratio
# =====================================================================

class TestRatio:

    def test_true_matrix_as_random_gives_one(self, compositional_task):
        classes, _, labels, train, test = compositional_task
        budget = TREBudget(steps=50, lr=0.05)
        report = tre_ratio(train, labels, test, labels, classes, budget, random_matrices=[classes])
        assert report.ratio == pytest.approx(1.0)
        assert report.ratio_train == pytest.approx(1.0)
        assert report.random_matrix_seeds == []

    def test_compositional_features_beat_random(self, compositional_task):
        classes, _, labels, train, test = compositional_task
        report = tre_ratio(train, labels, test, labels, classes, FIT)
        assert report.ratio < 0.5
        assert report.random_matrix_seeds == [1, 2, 3]
        assert report.fit_seed == 0
        assert report.flags == []


def test_tre_zsl_correlation(caplog):
    with caplog.at_level(logging.INFO, logger="services.compositionality"):
        result = tre_zsl_correlation([0.9, 0.8, 0.7, 0.6], [20.0, 25.0, 33.0, 41.0], dataset="cub")
    assert "reference -0.90" in caplog.text
    assert result.r < -0.9
    with pytest.raises(DegenerateSeriesError):
        tre_zsl_correlation([0.5, 0.5, 0.5], [1.0, 2.0, 3.0])


def test_unstructured_features_give_ratio_near_one():
    rng = np.random.default_rng(5)
    codes = rng.permutation(63)[:12] + 1
    classes = ((codes[:, None] >> np.arange(6)) & 1).astype(bool)
    labels = np.repeat(np.arange(12), 20)
    train = rng.standard_normal((labels.size, 16))
    test = rng.standard_normal((labels.size, 16))
    report = tre_ratio(train, labels, test, labels, classes, FIT)
    assert 0.9 <= report.ratio <= 1.1


@pytest.mark.slow
def test_exact_sums_with_default_budget(compositional_task):
    classes, eta, labels, _, _ = compositional_task
    features = classes[labels] @ eta
    fit = fit_tre(features, datapoint_attributes(classes, labels), TREBudget())
    assert fit.final < 1e-3
    report = tre_ratio(features, labels, features, labels, classes, TREBudget())
    assert report.ratio < 0.2
