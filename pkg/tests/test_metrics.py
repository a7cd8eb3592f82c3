"""Metric formulas, cross-checked against scikit-learn."""

import random

import pytest
from sklearn.metrics import f1_score

from compfreeze.metrics import accuracy, binary_f1, span_f1, weighted_f1


class TestBinaryF1:
    def test_all_correct(self):
        gold = ["spam", "ham", "spam"]
        assert binary_f1(gold, gold, "spam") == 1.0

    def test_complement_predictions(self):
        gold = ["spam", "ham", "spam", "ham"]
        pred = ["ham", "spam", "ham", "spam"]
        assert binary_f1(gold, pred, "spam") == 0.0

    def test_hand_computed_confusion(self):
        # TP=3, FP=1, FN=2 over ten examples -> 2*3 / (2*3 + 1 + 2)
        gold = ["p", "p", "p", "p", "p", "n", "n", "n", "n", "n"]
        pred = ["p", "p", "p", "n", "n", "p", "n", "n", "n", "n"]
        assert binary_f1(gold, pred, "p") == pytest.approx(6 / 9)

    def test_matches_sklearn(self):
        rng = random.Random(0)
        for _ in range(50):
            gold = [rng.choice(["a", "b"]) for _ in range(40)]
            pred = [rng.choice(["a", "b"]) for _ in range(40)]
            want = f1_score(gold, pred, pos_label="a", average="binary")
            assert binary_f1(gold, pred, "a") == pytest.approx(want)


class TestWeightedF1:
    def test_matches_sklearn_multiclass(self):
        rng = random.Random(1)
        labels = ["O", "S-MAL", "B-APT", "E-APT"]
        for _ in range(50):
            gold = [rng.choice(labels) for _ in range(60)]
            pred = [rng.choice(labels) for _ in range(60)]
            want = f1_score(gold, pred, average="weighted")
            assert weighted_f1(gold, pred) == pytest.approx(want)

    def test_perfect(self):
        gold = ["x", "y", "y"]
        assert weighted_f1(gold, gold) == 1.0


class TestAccuracyAndSpans:
    def test_accuracy(self):
        assert accuracy(["a", "b"], ["a", "a"]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy(["a"], ["a", "b"])

    def test_span_f1(self):
        gold = {(0, 1, "APT"), (3, 3, "MAL")}
        pred = {(0, 1, "APT"), (5, 5, "DOM")}
        assert span_f1(gold, pred) == pytest.approx(2 * 1 / (2 * 1 + 1 + 1))
        assert span_f1(set(), set()) == 1.0
