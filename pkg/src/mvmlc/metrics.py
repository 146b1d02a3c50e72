"""Multi-label ranking metrics: average precision, 1 - ranking loss, macro AUC.

All three are invariant to strictly increasing transforms of the scores and
use an explicit tie convention: ties count half in pairwise comparisons, and
average-precision ranks break ties by ascending label index so results are
deterministic.

Degenerate rows/columns (no positive label for AP; missing a positive or a
negative for the pairwise metrics) are skipped and counted rather than
scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoEvaluableLabels, NoEvaluableSamples


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 2:
        raise DimensionMismatch(f"scores {s.shape} and labels {y.shape} must be equal 2-D shapes")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return s, y


def _tie_average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n in ascending order of x, ties sharing their average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    average = (upper - counts + 1 + upper) / 2.0
    return average[inverse]


def _ap_with_counts(scores, labels):
    s, y = _validate(scores, labels)
    n, c = s.shape
    columns = np.arange(c)
    total = 0.0
    evaluated = 0
    for i in range(n):
        positives = np.flatnonzero(y[i] == 1)
        if positives.size == 0:
            continue
        # descending score, ties broken by ascending label index
        order = np.lexsort((columns, -s[i]))
        ranks = np.empty(c)
        ranks[order] = np.arange(1, c + 1)
        pos_ranks = np.sort(ranks[positives])
        precision_at_pos = np.arange(1, positives.size + 1) / pos_ranks
        total += precision_at_pos.mean()
        evaluated += 1
    return total, evaluated, n - evaluated


def average_precision(scores, labels) -> float:
    """Mean over samples of the average precision of their label ranking."""
    total, evaluated, _ = _ap_with_counts(scores, labels)
    if evaluated == 0:
        raise NoEvaluableSamples("no sample has a positive label")
    return total / evaluated


def _rl_with_counts(scores, labels):
    s, y = _validate(scores, labels)
    n, _ = s.shape
    total = 0.0
    evaluated = 0
    for i in range(n):
        pos = y[i] == 1
        neg = ~pos
        n_pos, n_neg = int(pos.sum()), int(neg.sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = _tie_average_ranks(s[i])
        # Mann-Whitney count of concordant (pos above neg) pairs, ties at 0.5
        concordant = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        total += 1.0 - concordant / (n_pos * n_neg)
        evaluated += 1
    return total, evaluated, n - evaluated


def one_minus_ranking_loss(scores, labels) -> float:
    """1 minus the mean fraction of mis-ordered (positive, negative) label
    pairs per sample; a tie counts as half a violation."""
    total, evaluated, _ = _rl_with_counts(scores, labels)
    if evaluated == 0:
        raise NoEvaluableSamples("no sample has both a positive and a negative label")
    return 1.0 - total / evaluated


def _auc_with_counts(scores, labels):
    s, y = _validate(scores, labels)
    _, c = s.shape
    total = 0.0
    evaluated = 0
    for j in range(c):
        pos = y[:, j] == 1
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = _tie_average_ranks(s[:, j])
        total += (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        evaluated += 1
    return total, evaluated, c - evaluated


def macro_auc(scores, labels) -> float:
    """Mean over labels of the Mann-Whitney ROC AUC (ties credited 0.5)."""
    total, evaluated, _ = _auc_with_counts(scores, labels)
    if evaluated == 0:
        raise NoEvaluableLabels("no label has both a positive and a negative sample")
    return total / evaluated


@dataclass
class MetricsReport:
    """Evaluation summary plus degenerate-case bookkeeping and run metadata."""

    ap: float
    one_minus_rl: float
    auc: float
    n_eval: int
    skipped: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "one_minus_rl": self.one_minus_rl,
            "auc": self.auc,
            "n_eval": self.n_eval,
            "skipped": dict(self.skipped),
            "meta": dict(self.meta),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(ap=d["ap"], one_minus_rl=d["one_minus_rl"], auc=d["auc"],
                   n_eval=d["n_eval"], skipped=dict(d.get("skipped", {})),
                   meta=dict(d.get("meta", {})))


def compute_report(scores, labels, meta: dict | None = None) -> MetricsReport:
    """All three metrics over one score matrix, with skip counts."""
    ap_total, ap_eval, ap_skip = _ap_with_counts(scores, labels)
    rl_total, rl_eval, rl_skip = _rl_with_counts(scores, labels)
    auc_total, auc_eval, auc_skip = _auc_with_counts(scores, labels)
    if ap_eval == 0:
        raise NoEvaluableSamples("no sample has a positive label")
    if rl_eval == 0:
        raise NoEvaluableSamples("no sample has both a positive and a negative label")
    if auc_eval == 0:
        raise NoEvaluableLabels("no label has both a positive and a negative sample")
    return MetricsReport(
        ap=ap_total / ap_eval,
        one_minus_rl=1.0 - rl_total / rl_eval,
        auc=auc_total / auc_eval,
        n_eval=np.asarray(scores).shape[0],
        skipped={"ap_samples": ap_skip, "rl_samples": rl_skip, "auc_labels": auc_skip},
        meta=meta or {},
    )
