"""Exact ranking metrics for anomaly detection.

AUROC uses the Mann-Whitney formulation with half credit for ties, AUPR
is average precision with tie groups processed atomically, and balanced
accuracy is maximized over all decision thresholds (score >= threshold
predicts positive). All three are computed from a merged histogram of
(score -> positive/negative counts), so pixel populations can be streamed
image by image without losing exactness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    """Score set violates a metric precondition (e.g. single class)."""


# Compact the pending per-image chunks once this many raw entries pile up.
_COMPACT_LIMIT = 4_000_000


class ScoreAccumulator:
    """Streaming exact (score, label) population.

    Internally keeps sorted unique score values with positive/negative
    counts; adding an image merges its own value histogram, so peak
    memory is one image plus the merged table (bounded by the number of
    distinct score values, e.g. 65536 for 16-bit heatmaps).
    """

    def __init__(self):
        self._chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._pending = 0

    def add(self, scores: np.ndarray, labels: np.ndarray) -> None:
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel()
        if scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} must match")
        if scores.size == 0:
            return
        if not np.all(np.isfinite(scores)):
            raise MetricsError("scores must be finite")
        if not np.isin(labels, (0, 1)).all():
            raise MetricsError("labels must be 0 or 1")
        values, inverse = np.unique(scores, return_inverse=True)
        pos = np.zeros(values.size, dtype=np.int64)
        neg = np.zeros(values.size, dtype=np.int64)
        lab = labels.astype(np.int64)
        np.add.at(pos, inverse, lab)
        np.add.at(neg, inverse, 1 - lab)
        self._chunks.append((values, pos, neg))
        self._pending += values.size
        if self._pending > _COMPACT_LIMIT:
            self._compact()

    def _compact(self) -> None:
        if len(self._chunks) <= 1:
            return
        allv = np.concatenate([c[0] for c in self._chunks])
        allp = np.concatenate([c[1] for c in self._chunks])
        alln = np.concatenate([c[2] for c in self._chunks])
        values, inverse = np.unique(allv, return_inverse=True)
        pos = np.zeros(values.size, dtype=np.int64)
        neg = np.zeros(values.size, dtype=np.int64)
        np.add.at(pos, inverse, allp)
        np.add.at(neg, inverse, alln)
        self._chunks = [(values, pos, neg)]
        self._pending = values.size

    def merged(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ascending unique values, positive counts, negative counts)."""
        self._compact()
        if not self._chunks:
            return (np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64))
        return self._chunks[0]


def _merged_from_set(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    acc = ScoreAccumulator()
    acc.add(np.asarray(scores), np.asarray(labels))
    return acc.merged()


def _require_both_classes(pos: np.ndarray, neg: np.ndarray) -> tuple[int, int]:
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(
            f"need at least one positive and one negative (got {n_pos} pos, {n_neg} neg)"
        )
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties count half.

    Equals the trapezoidal area under the ROC curve.
    """
    values, pos, neg = _merged_from_set(scores, labels)
    return _auroc_merged(values, pos, neg)


def _auroc_merged(values, pos, neg) -> float:
    n_pos, n_neg = _require_both_classes(pos, neg)
    neg_below = np.concatenate([[0], np.cumsum(neg)[:-1]])
    u = float(np.sum(pos * (neg_below + 0.5 * neg)))
    return u / (n_pos * n_neg)


def aupr(scores, labels) -> float:
    """Average precision over descending scores, tie groups atomic.

    Sum over distinct thresholds of (recall gain) * (precision at the
    threshold), which reduces to the rank-sum form when scores are
    distinct.
    """
    values, pos, neg = _merged_from_set(scores, labels)
    return _aupr_merged(values, pos, neg)


def _aupr_merged(values, pos, neg) -> float:
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricsError("need at least one positive")
    pos_d = pos[::-1]
    neg_d = neg[::-1]
    tp = np.cumsum(pos_d)
    fp = np.cumsum(neg_d)
    precision = tp / (tp + fp)
    return float(np.sum(pos_d * precision) / n_pos)


def balanced_accuracy(scores, labels) -> tuple[float, float]:
    """Best (sensitivity + specificity) / 2 over all thresholds.

    Prediction rule is score >= threshold. Returns the maximum and the
    smallest threshold attaining it; predicting everything negative
    (threshold +inf) is always available, so the result is >= 0.5.
    """
    values, pos, neg = _merged_from_set(scores, labels)
    return _balanced_accuracy_merged(values, pos, neg)


def _balanced_accuracy_merged(values, pos, neg) -> tuple[float, float]:
    n_pos, n_neg = _require_both_classes(pos, neg)
    # tp/fp counts for thresholds at each distinct value, ascending
    tp = np.cumsum(pos[::-1])[::-1]
    fp = np.cumsum(neg[::-1])[::-1]
    bacc = 0.5 * (tp / n_pos + 1.0 - fp / n_neg)
    # the threshold at the minimum value scores exactly 0.5, so the sweep
    # never does worse than predicting everything negative
    best_idx = int(np.argmax(bacc))  # argmax takes the first (smallest) value
    return float(bacc[best_idx]), float(values[best_idx])


def _roc_curve(values, pos, neg):
    """(fpr, tpr) at thresholds descending through the distinct values."""
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    tp = np.cumsum(pos[::-1])
    fp = np.cumsum(neg[::-1])
    fpr = np.concatenate([[0.0], fp / max(n_neg, 1)])
    tpr = np.concatenate([[0.0], tp / max(n_pos, 1)])
    return fpr, tpr


def _pr_curve(values, pos, neg):
    """(recall, precision) at thresholds descending through the values."""
    n_pos = int(pos.sum())
    tp = np.cumsum(pos[::-1])
    fp = np.cumsum(neg[::-1])
    recall = tp / max(n_pos, 1)
    precision = tp / (tp + fp)
    return recall, precision


@dataclass
class MetricsReport:
    """The three ranking metrics plus the curves that produced them."""

    auroc: float
    aupr: float
    balanced_acc: float
    threshold_star: float
    n_pos: int
    n_neg: int
    roc: tuple = field(default=(), repr=False)
    pr: tuple = field(default=(), repr=False)

    def to_dict(self, include_curves: bool = False) -> dict:
        out = {
            "auroc": self.auroc,
            "balanced_acc": self.balanced_acc,
            "aupr": self.aupr,
            "threshold_star": self.threshold_star,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }
        if include_curves and len(self.roc) == 2:
            out["roc"] = {"fpr": list(map(float, self.roc[0])),
                          "tpr": list(map(float, self.roc[1]))}
            out["pr"] = {"recall": list(map(float, self.pr[0])),
                         "precision": list(map(float, self.pr[1]))}
        return out

    def to_json(self, include_curves: bool = False) -> str:
        return json.dumps(self.to_dict(include_curves), indent=2, sort_keys=True)

    def table(self) -> str:
        """Fixed-order console table: AUROC, ACC, AUPR."""
        header = f"{'AUROC':>8}  {'ACC':>8}  {'AUPR':>8}"
        row = f"{self.auroc:8.4f}  {self.balanced_acc:8.4f}  {self.aupr:8.4f}"
        return header + "\n" + row


def report_from_accumulator(acc: ScoreAccumulator) -> MetricsReport:
    values, pos, neg = acc.merged()
    n_pos, n_neg = _require_both_classes(pos, neg)
    bacc, thr = _balanced_accuracy_merged(values, pos, neg)
    return MetricsReport(
        auroc=_auroc_merged(values, pos, neg),
        aupr=_aupr_merged(values, pos, neg),
        balanced_acc=bacc,
        threshold_star=thr,
        n_pos=n_pos,
        n_neg=n_neg,
        roc=_roc_curve(values, pos, neg),
        pr=_pr_curve(values, pos, neg),
    )


def image_score(pred: np.ndarray, k: int = 10) -> float:
    """Image-level anomaly score: mean of the k largest pixel values.

    Maps with fewer than k pixels average everything.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if pred.size == 0:
        raise MetricsError("empty prediction map")
    if k < 1:
        raise ValueError("k must be >= 1")
    if pred.size <= k:
        return float(pred.mean())
    return float(np.partition(pred, -k)[-k:].mean())


def eval_pixel(preds, gts, per_image: bool = False) -> MetricsReport:
    """Pixel-level metrics over prediction maps and ground-truth masks.

    By default every pixel of every image joins one pooled population
    (streamed image by image). With ``per_image`` the three metrics are
    instead averaged over images that contain both classes.
    """
    preds = list(preds)
    gts = list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions and {len(gts)} masks")
    if per_image:
        return _eval_pixel_per_image(preds, gts)
    acc = ScoreAccumulator()
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"pair {i}: prediction {p.shape} vs mask {g.shape}")
        acc.add(p, g)
    return report_from_accumulator(acc)


def _eval_pixel_per_image(preds, gts) -> MetricsReport:
    rows = []
    n_pos = n_neg = 0
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p)
        g = np.asarray(g).astype(np.int64)
        if p.shape != g.shape:
            raise ValueError(f"pair {i}: prediction {p.shape} vs mask {g.shape}")
        n_pos += int(g.sum())
        n_neg += int(g.size - g.sum())
        if 0 < g.sum() < g.size:
            bacc, _ = balanced_accuracy(p, g)
            rows.append((auroc(p, g), aupr(p, g), bacc))
    if not rows:
        raise MetricsError("no image contains both classes")
    arr = np.asarray(rows)
    return MetricsReport(
        auroc=float(arr[:, 0].mean()),
        aupr=float(arr[:, 1].mean()),
        balanced_acc=float(arr[:, 2].mean()),
        threshold_star=float("nan"),
        n_pos=n_pos,
        n_neg=n_neg,
    )


def eval_image(preds, labels, k: int = 10) -> MetricsReport:
    """Image-level metrics: top-k mean score per map, then rank metrics."""
    preds = list(preds)
    labels = [int(l) for l in labels]
    if not preds or len(preds) != len(labels):
        raise ValueError(f"got {len(preds)} predictions and {len(labels)} labels")
    scores = np.asarray([image_score(p, k) for p in preds])
    acc = ScoreAccumulator()
    acc.add(scores, np.asarray(labels))
    return report_from_accumulator(acc)
