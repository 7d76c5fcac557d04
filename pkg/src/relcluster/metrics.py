"""Clustering agreement metrics: B-cubed, V-measure, and the adjusted Rand
index.  All three are invariant to relabeling of either partition.

Entropies use natural logarithms (the base cancels in the ratios); an F1
whose two components are both 0 is defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _as_partitions(pred, gold):
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.ndim != 1 or gold.ndim != 1:
        raise ValidationError("label vectors must be 1-D")
    if pred.shape[0] != gold.shape[0]:
        raise ValidationError(f"length mismatch: {pred.shape[0]} predictions vs {gold.shape[0]} gold labels")
    if pred.shape[0] == 0:
        raise ValidationError("empty label vectors")
    _, pred_idx = np.unique(pred, return_inverse=True)
    _, gold_idx = np.unique(gold, return_inverse=True)
    return pred_idx, gold_idx


def _contingency(pred_idx, gold_idx):
    n_pred = pred_idx.max() + 1
    n_gold = gold_idx.max() + 1
    table = np.zeros((n_pred, n_gold), dtype=np.int64)
    np.add.at(table, (pred_idx, gold_idx), 1)
    return table


def harmonic(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def b_cubed(pred, gold) -> tuple[float, float, float]:
    """Per-item precision/recall over cluster-class overlaps, averaged.

    For item i with predicted cluster p and gold class g holding o items in
    common (i included in both), precision_i = o/|p| and recall_i = o/|g|.
    """
    pred_idx, gold_idx = _as_partitions(pred, gold)
    table = _contingency(pred_idx, gold_idx).astype(np.float64)
    n = pred_idx.shape[0]
    pred_sizes = table.sum(axis=1)
    gold_sizes = table.sum(axis=0)
    # Sum over items of o/|p| groups into sum over cells of o^2/|p|.
    precision = float((table ** 2 / pred_sizes[:, None]).sum() / n)
    recall = float((table ** 2 / gold_sizes[None, :]).sum() / n)
    return precision, recall, harmonic(precision, recall)


def _entropy(sizes: np.ndarray, n: int) -> float:
    probs = sizes[sizes > 0] / n
    return float(-(probs * np.log(probs)).sum())


def v_measure(pred, gold) -> tuple[float, float, float]:
    """Homogeneity, completeness, and their harmonic mean.

    homogeneity = 1 - H(gold|pred)/H(gold), completeness = 1 - H(pred|gold)/H(pred);
    when the reference entropy is 0 the component is 1 by convention.
    """
    pred_idx, gold_idx = _as_partitions(pred, gold)
    table = _contingency(pred_idx, gold_idx).astype(np.float64)
    n = pred_idx.shape[0]
    pred_sizes = table.sum(axis=1)
    gold_sizes = table.sum(axis=0)
    h_gold = _entropy(gold_sizes, n)
    h_pred = _entropy(pred_sizes, n)

    nz = table > 0
    joint = table[nz] / n
    pred_rep = np.broadcast_to(pred_sizes[:, None], table.shape)[nz]
    gold_rep = np.broadcast_to(gold_sizes[None, :], table.shape)[nz]
    h_gold_given_pred = float((joint * (np.log(pred_rep) - np.log(table[nz]))).sum())
    h_pred_given_gold = float((joint * (np.log(gold_rep) - np.log(table[nz]))).sum())

    homogeneity = 1.0 if h_gold == 0 else 1.0 - h_gold_given_pred / h_gold
    completeness = 1.0 if h_pred == 0 else 1.0 - h_pred_given_gold / h_pred
    # Conditional entropy can exceed its marginal by rounding only; keep [0, 1].
    homogeneity = min(1.0, max(0.0, homogeneity))
    completeness = min(1.0, max(0.0, completeness))
    return homogeneity, completeness, harmonic(homogeneity, completeness)


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def adjusted_rand_index(pred, gold) -> float:
    """Pair-counting Rand index corrected for chance via the contingency table."""
    pred_idx, gold_idx = _as_partitions(pred, gold)
    table = _contingency(pred_idx, gold_idx).astype(np.float64)
    n = pred_idx.shape[0]
    index = _comb2(table).sum()
    sum_pred = _comb2(table.sum(axis=1)).sum()
    sum_gold = _comb2(table.sum(axis=0)).sum()
    expected = sum_pred * sum_gold / (n * (n - 1) / 2.0)
    max_index = (sum_pred + sum_gold) / 2.0
    if max_index == expected:
        # Degenerate partitions (all singletons or a single cluster on both
        # sides): the partitions are identical, so perfect agreement.
        return 1.0
    return float((index - expected) / (max_index - expected))


# Shorter alias used throughout the tests and reports.
ari = adjusted_rand_index


@dataclass(frozen=True)
class MetricsReport:
    """One prediction/gold pairing scored by all three metric families."""

    b3: tuple[float, float, float]  # precision, recall, f1
    v: tuple[float, float, float]   # homogeneity, completeness, f1
    ari: float

    @classmethod
    def compute(cls, pred, gold) -> "MetricsReport":
        return cls(b3=b_cubed(pred, gold), v=v_measure(pred, gold),
                   ari=adjusted_rand_index(pred, gold))

    def to_dict(self) -> dict:
        return {
            "b3": {"precision": self.b3[0], "recall": self.b3[1], "f1": self.b3[2]},
            "v": {"homogeneity": self.v[0], "completeness": self.v[1], "f1": self.v[2]},
            "ari": self.ari,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            b3=(obj["b3"]["precision"], obj["b3"]["recall"], obj["b3"]["f1"]),
            v=(obj["v"]["homogeneity"], obj["v"]["completeness"], obj["v"]["f1"]),
            ari=obj["ari"],
        )
