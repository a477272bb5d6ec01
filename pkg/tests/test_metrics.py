import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import precision_recall_fscore_support

from conftest import numerical_grad, rel_error
from scriptbmi.exceptions import InputError, LabelError
from scriptbmi.layers import softmax
from scriptbmi.metrics import (ConfusionMatrix, confusion, cross_entropy, softmax_ce_backward,
                               weighted_metrics)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy(np.eye(3), [0, 1, 2]) == 0.0

    def test_uniform_48(self):
        assert cross_entropy(np.full((1, 48), 1 / 48), [5]) == pytest.approx(math.log(48), abs=1e-12)
        assert math.log(48) == pytest.approx(3.8712, abs=1e-4)

    def test_batch_mean(self):
        p = np.array([[0.2, 0.8], [0.6, 0.4]])
        a, b = -math.log(0.8), -math.log(0.6)
        assert cross_entropy(p, [1, 0]) == pytest.approx((a + b) / 2, rel=1e-14)

    def test_clamp(self):
        assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))

    def test_label_range(self):
        with pytest.raises(LabelError):
            cross_entropy(np.full((1, 3), 1 / 3), [3])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        p = softmax(rng.normal(scale=5, size=(4, 6)))
        assert cross_entropy(p, rng.integers(0, 6, size=4)) >= 0


class TestSoftmaxCEBackward:
    def test_zero_at_optimum(self):
        assert not np.any(softmax_ce_backward(np.eye(4), [0, 1, 2, 3]))

    def test_rows_sum_to_zero(self, rng):
        p = softmax(rng.normal(scale=3, size=(20, 9)))
        g = softmax_ce_backward(p, rng.integers(0, 9, size=20))
        assert np.max(np.abs(g.sum(axis=1))) <= 1e-12

    def test_finite_differences(self, rng):
        for _ in range(5):
            z = rng.normal(size=(3, 5))
            y = rng.integers(0, 5, size=3)
            num = numerical_grad(lambda: cross_entropy(softmax(z), y), z)
            assert rel_error(softmax_ce_backward(softmax(z), y), num) <= 1e-6


class TestConfusion:
    def test_perfect(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 1]))

    def test_empty(self):
        assert not np.any(confusion([], [], 4).counts)

    def test_hand_count(self):
        cm = confusion([0, 1, 1], [0, 0, 1], 2)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 1]])

    def test_errors(self):
        with pytest.raises(InputError):
            confusion([0, 1], [0], 2)
        with pytest.raises(InputError):
            confusion([0, 2], [0, 1], 2)


def hand_weighted(counts):
    """Exact rational weighted P/R/F1 straight from the definitions."""
    k = len(counts)
    total = sum(sum(r) for r in counts)
    out = [Fraction(0)] * 3
    for c in range(k):
        tp = counts[c][c]
        support = sum(counts[c])
        predicted = sum(counts[r][c] for r in range(k))
        p = Fraction(tp, predicted) if predicted else Fraction(0)
        r = Fraction(tp, support) if support else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        for i, v in enumerate((p, r, f)):
            out[i] += Fraction(support, total) * v
    return out


class TestWeightedMetrics:
    def test_perfect(self):
        m = weighted_metrics(ConfusionMatrix(np.diag([3, 4, 5])))
        assert m.as_row() == (1.0, 1.0, 1.0, 1.0)

    def test_single_class_support(self):
        m = weighted_metrics(ConfusionMatrix(np.array([[5, 0], [0, 0]])))
        assert m.accuracy == 1.0 and m.recall_weighted == 1.0

    def test_two_by_two_hand_oracle(self):
        m = weighted_metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
        p, r, f = hand_weighted([[3, 1], [2, 4]])
        assert (p, r, f) == (Fraction(18, 25), Fraction(7, 10), Fraction(232, 330))
        assert abs(m.accuracy - 0.7) <= 1e-12
        assert abs(m.precision_weighted - float(p)) <= 1e-12
        assert abs(m.recall_weighted - float(r)) <= 1e-12
        assert abs(m.f1_weighted - float(f)) <= 1e-12

    def test_empty_matrix(self):
        with pytest.raises(InputError):
            weighted_metrics(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_csv_row(self):
        m = weighted_metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
        assert m.csv_row() == "70.00,72.00,70.00,70.30"

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_fuzz_against_sklearn_and_identities(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 11))
        counts = rng.integers(0, 20, size=(k, k)) * (rng.random((k, k)) < 0.6)
        if counts.sum() == 0:
            counts[0, 0] = 1
        m = weighted_metrics(ConfusionMatrix(counts))
        assert abs(m.recall_weighted - m.accuracy) <= 1e-12
        for v in m.as_row():
            assert 0.0 <= v <= 1.0
        # micro averages collapse to accuracy; the weighted convention is what is reported
        tp, fp = np.trace(counts), counts.sum() - np.trace(counts)
        assert abs(tp / (tp + fp) - m.accuracy) <= 1e-12
        true = np.repeat(np.repeat(np.arange(k), k), counts.ravel())
        pred = np.repeat(np.tile(np.arange(k), k), counts.ravel())
        p, r, f, _ = precision_recall_fscore_support(true, pred, labels=np.arange(k),
                                                     average="weighted", zero_division=0)
        assert abs(p - m.precision_weighted) <= 1e-12
        assert abs(r - m.recall_weighted) <= 1e-12
        assert abs(f - m.f1_weighted) <= 1e-12

    def test_weighted_differs_from_micro(self):
        # ablation row 3 shape: recall == accuracy but precision does not
        m = weighted_metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
        assert m.recall_weighted == pytest.approx(m.accuracy, abs=1e-12)
        assert m.precision_weighted != pytest.approx(m.accuracy, abs=1e-3)
