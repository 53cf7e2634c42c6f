"""Metric implementations against brute-force oracles."""

import numpy as np
import pytest

from masm_lwr.evaluation import (
    UndefinedMetricError, evaluate_scores, neg_pr_auc, roc_auc, score_histogram,
)


def brute_force_roc_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def brute_force_neg_pr_auc(scores, labels):
    # average precision of label==0 ranked by ascending score, stable ties
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    hits = 0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 0:
            hits += 1
            total += hits / rank
    return total / (labels == 0).sum()


def test_roc_auc_hand_cases():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5


def test_roc_auc_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


def test_neg_pr_auc_hand_case():
    # perfect separation: all Bad below all Good
    assert neg_pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    with pytest.raises(UndefinedMetricError):
        neg_pr_auc([0.5], [1])


def test_metrics_match_brute_force_with_ties():
    rng = np.random.default_rng(11)
    for _ in range(40):
        n = int(rng.integers(5, 80))
        scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)  # heavy ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == pytest.approx(
            brute_force_roc_auc(scores, labels), abs=1e-12)
        assert neg_pr_auc(scores, labels) == pytest.approx(
            brute_force_neg_pr_auc(scores, labels), abs=1e-12)


def test_histogram_counts_partition():
    scores = [0.01, 0.49, 0.51, 0.99, 1.0]
    labels = [0, 0, 1, 1, 1]
    rows = score_histogram(scores, labels, bins=2)
    assert rows[0][:2] == (0.0, 0.5)
    assert rows[0][2:] == (0, 2)
    assert rows[1][2:] == (3, 0)  # score 1.0 clips into the last bin
    assert sum(r[2] + r[3] for r in rows) == len(scores)


def test_evaluate_scores_report():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    labels = np.array([0, 0, 1, 1])
    types = ["bad", "bad", "good", "good"]
    rep = evaluate_scores(scores, labels, types=types)
    assert rep.roc_auc == 1.0
    assert rep.n_positive == 2 and rep.n_negative == 2
    assert rep.per_type_medians["good"] == pytest.approx(0.85)
    assert rep.per_type_medians["bad"] == pytest.approx(0.15)
