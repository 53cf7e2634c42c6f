"""Evaluation metrics and reports: ROC-AUC, negative PR-AUC, histograms.

ROC-AUC is the Mann-Whitney statistic computed from tied ranks in
O(N log N). The negative PR metric is average precision of retrieving Bad
(label 0) pairs when ranking by negated model score, the right view for
heavily Good-skewed relevance data. The ablation runner retrains with one
data level removed and evaluates on the fixed test set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric needs both classes (or at least one Bad sample)."""


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC-AUC needs both classes (got {n_pos} positive, {n_neg} negative)"
        )
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks within tie groups
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def neg_pr_auc(scores, labels) -> float:
    """Average precision of the Bad class, ranking by negated score.

    Ties are broken by stable input order (documented convention; real
    model scores make ties measure-zero).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    bad = labels == 0
    n_bad = int(bad.sum())
    if n_bad == 0:
        raise UndefinedMetricError("negative PR-AUC needs at least one Bad sample")
    order = np.argsort(scores, kind="stable")  # -score descending == score ascending
    hits = bad[order].astype(np.float64)
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision_at * hits).sum() / n_bad)


def score_histogram(scores, labels, bins: int = 20):
    """Equal-width bins over [0, 1], counts split by label.

    Returns rows of (bin_low, bin_high, count_good, count_bad).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(scores * bins).astype(int), 0, bins - 1)
    rows = []
    for b in range(bins):
        in_bin = idx == b
        rows.append((
            float(edges[b]), float(edges[b + 1]),
            int((in_bin & (labels == 1)).sum()),
            int((in_bin & (labels == 0)).sum()),
        ))
    return rows


def save_histogram_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "count_good", "count_bad"])
        writer.writerows(rows)


@dataclass
class EvalReport:
    roc_auc: float
    neg_pr_auc: float
    n_samples: int
    n_positive: int
    n_negative: int
    histogram: list
    per_type_medians: dict

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, sort_keys=True, separators=(",", ":"))


def evaluate_scores(scores, labels, types=None, bins: int = 20) -> EvalReport:
    """Assemble the full report; `types` optionally maps samples to data levels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    medians = {}
    if types is not None:
        for t in sorted(set(types)):
            sel = np.array([x == t for x in types])
            medians[t] = float(np.median(scores[sel]))
    return EvalReport(
        roc_auc=roc_auc(scores, labels),
        neg_pr_auc=neg_pr_auc(scores, labels),
        n_samples=len(scores),
        n_positive=int((labels == 1).sum()),
        n_negative=int((labels == 0).sum()),
        histogram=score_histogram(scores, labels, bins),
        per_type_medians=medians,
    )


def ablation_run(records: list[dict], drop_type, vocab, model_config, train_config,
                 val, test, init_seed: int):
    """Retrain without one data level from the same initialization; evaluate.

    `records` is the full level-wise dataset; `val`/`test` are EncodedPairs
    with binary labels. Returns (EvalReport, TrainResult).
    """
    from . import model as M
    from .pipeline import RelevanceType
    from .training import encode_lwr_records, train_lwr

    drop = RelevanceType(drop_type) if not isinstance(drop_type, RelevanceType) else drop_type
    kept = [r for r in records if r["type"] != drop.value]
    train = encode_lwr_records(kept, vocab, model_config)
    params = M.MasmParameters.init(model_config, seed=init_seed)
    result = train_lwr(train, val, params, train_config)
    scores = M.score_batch(result.params, test.q_ids, test.q_valid,
                           test.t_ids, test.t_valid)
    report = evaluate_scores(scores, test.target.astype(int))
    return report, result
