"""F1 and agreement metrics, written out so the formulas are auditable.

The test suite cross-checks these against scikit-learn on random label sets.
"""

from __future__ import annotations

from collections import Counter


def confusion_counts(gold, pred) -> Counter:
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predictions")
    return Counter(zip(gold, pred))


def binary_f1(gold, pred, positive) -> float:
    """F1 of the positive class: 2TP / (2TP + FP + FN); 0 when undefined."""
    counts = confusion_counts(gold, pred)
    tp = counts[(positive, positive)]
    fp = sum(c for (g, p), c in counts.items() if p == positive and g != positive)
    fn = sum(c for (g, p), c in counts.items() if g == positive and p != positive)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def weighted_f1(gold, pred) -> float:
    """Support-weighted mean of per-class F1 over the classes present in gold."""
    counts = confusion_counts(gold, pred)
    support = Counter(gold)
    if not support:
        raise ValueError("empty gold labels")
    total = 0.0
    for label, n in support.items():
        total += n * binary_f1(gold, pred, label)
    return total / sum(support.values())


def accuracy(gold, pred) -> float:
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predictions")
    if not gold:
        raise ValueError("empty label lists")
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


def span_f1(gold_spans: set, pred_spans: set) -> float:
    """Exact-match span F1 over (start, end, type) triples."""
    tp = len(gold_spans & pred_spans)
    denom = 2 * tp + len(pred_spans - gold_spans) + len(gold_spans - pred_spans)
    return 2 * tp / denom if denom else 1.0
