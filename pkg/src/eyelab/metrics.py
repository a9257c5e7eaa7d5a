"""Evaluation metrics with exact, rank-based definitions.

The ranking metrics are written so a brute-force pairwise oracle gives
bit-identical results: the area under the ROC curve uses average ranks,
whose numerator is a sum of halves, and average precision uses the
step-interpolated sum over distinct thresholds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    CountMismatch,
    NoPositives,
    OutOfRangeClass,
    SingleClass,
    TooFewSamples,
)

__all__ = [
    "roc_auc",
    "roc_curve",
    "pr_curve_and_ap",
    "ovr_auc",
    "confusion_matrix",
    "f1_binary",
    "macro_f1",
    "accuracy",
    "dice",
    "landmark_error",
    "biomarker_accuracy",
    "r_squared",
    "BootstrapCi",
    "bootstrap_ci",
    "TuringResult",
    "turing_score",
    "MetricReport",
]


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) != len(b):
        raise CountMismatch(f"length mismatch: {len(a)} vs {len(b)}")


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a positive outranks a negative, ties counting half.

    Computed from average ranks; equals the pairwise count exactly,
    including in floating point, because the numerator is a sum of
    whole and half units.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_pair(s, y)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise OutOfRangeClass("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = rankdata(s, method="average")
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) stepping through distinct score thresholds, high to low."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_pair(s, y)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("roc curve needs both classes")
    order = np.argsort(-s, kind="stable")
    ys = y[order]
    ss = s[order]
    distinct = np.nonzero(np.diff(ss))[0]
    cut = np.concatenate([distinct, [len(ss) - 1]])
    tp = np.cumsum(ys == 1)[cut]
    fp = np.cumsum(ys == 0)[cut]
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    return fpr, tpr


def pr_curve_and_ap(
    scores: Sequence[float], labels: Sequence[int]
) -> tuple[np.ndarray, np.ndarray, float]:
    """Precision, recall, and step-interpolated average precision.

    AP = sum over thresholds of (recall_i - recall_{i-1}) * precision_i,
    thresholds descending over distinct scores, tie blocks atomic.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_pair(s, y)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    ys = y[order]
    ss = s[order]
    distinct = np.nonzero(np.diff(ss))[0]
    cut = np.concatenate([distinct, [len(ss) - 1]])
    tp = np.cumsum(ys == 1)[cut].astype(np.float64)
    n_at = (cut + 1).astype(np.float64)
    precision = tp / n_at
    recall = tp / n_pos
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precision, recall):
        ap += (r - prev_r) * p
        prev_r = r
    return precision, recall, float(ap)


def ovr_auc(scores: np.ndarray, labels: Sequence[int]) -> list[float]:
    """One-vs-rest AUC per class from a (N, C) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_pair(scores, y)
    return [roc_auc(scores[:, c], (y == c).astype(int)) for c in range(scores.shape[1])]


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    _check_pair(t, p)
    if (t < 0).any() or (t >= n_classes).any() or (p < 0).any() or (p >= n_classes).any():
        raise OutOfRangeClass(f"labels outside [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def f1_binary(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """F1 of the positive class; 0 when the denominator is empty."""
    m = confusion_matrix(y_true, y_pred, 2)
    tp = int(m[1, 1])
    fp = int(m[0, 1])
    fn = int(m[1, 0])
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def macro_f1(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> float:
    m = confusion_matrix(y_true, y_pred, n_classes)
    scores = []
    for c in range(n_classes):
        tp = int(m[c, c])
        fp = int(m[:, c].sum() - tp)
        fn = int(m[c, :].sum() - tp)
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def accuracy(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    _check_pair(t, p)
    if len(t) == 0:
        raise TooFewSamples("accuracy of an empty set")
    return float((t == p).mean())


def dice(pred: np.ndarray, target: np.ndarray, class_index: int = 1) -> float:
    """Overlap coefficient for one class; both-empty counts as 1."""
    p = np.asarray(pred) == class_index
    t = np.asarray(target) == class_index
    if p.shape != t.shape:
        raise CountMismatch(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = int(np.logical_and(p, t).sum())
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def mean_dice(pred: np.ndarray, target: np.ndarray, n_classes: int) -> float:
    return float(np.mean([dice(pred, target, c) for c in range(n_classes)]))


def landmark_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean distance in pixels over (..., K, 2) point arrays."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise CountMismatch(f"point shapes differ: {p.shape} vs {t.shape}")
    d = np.sqrt(((p - t) ** 2).sum(axis=-1))
    return float(d.mean())


def biomarker_accuracy(
    pred: np.ndarray,
    target: np.ndarray,
    rel_tol: float = 0.2,
    abs_tol: float = 1e-6,
) -> float:
    """Fraction of entries within a relative band of the truth.

    A prediction counts when |pred - true| <= max(rel_tol |true|, abs_tol);
    the absolute floor keeps near-zero references meaningful.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise CountMismatch(f"shapes differ: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise TooFewSamples("no biomarker entries")
    band = np.maximum(rel_tol * np.abs(t), abs_tol)
    return float((np.abs(p - t) <= band).mean())


def r_squared(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_pair(p, t)
    if len(t) < 2:
        raise TooFewSamples("r^2 needs at least 2 samples")
    ss_res = float(((t - p) ** 2).sum())
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


class BootstrapCi(NamedTuple):
    lo: float
    point: float
    hi: float
    inverted: bool


def bootstrap_ci(
    values: Sequence[float],
    stat: Callable[[np.ndarray], float] = np.mean,
    n_boot: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapCi:
    """Percentile bootstrap interval for a statistic of one sample.

    ``inverted`` reports that the raw percentile endpoints came out
    reversed (possible for pathological statistics); the returned
    (lo, hi) are always ordered.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise TooFewSamples("bootstrap of an empty sample")
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot, dtype=np.float64)
    for i in range(n_boot):
        stats[i] = stat(v[rng.integers(0, v.size, size=v.size)])
    lo = float(np.percentile(stats, 100.0 * (alpha / 2.0)))
    hi = float(np.percentile(stats, 100.0 * (1.0 - alpha / 2.0)))
    inverted = lo > hi
    if inverted:
        lo, hi = hi, lo
    return BootstrapCi(lo=lo, point=float(stat(v)), hi=hi, inverted=inverted)


class TuringResult(NamedTuple):
    mean_accuracy: float
    std_accuracy: float
    n_raters: int


def turing_score(per_rater_judgments: Mapping[str, Sequence[tuple[int, int]]]) -> TuringResult:
    """Rater accuracy at telling generated images from captured ones.

    Input maps rater id to (judged_synthetic, is_synthetic) pairs. The
    spread is the population standard deviation across raters.
    """
    if not per_rater_judgments:
        raise TooFewSamples("no raters")
    accs = []
    for rater in sorted(per_rater_judgments):
        pairs = per_rater_judgments[rater]
        if not pairs:
            raise TooFewSamples(f"rater {rater!r} has no judgments")
        correct = sum(1 for judged, truth in pairs if int(judged) == int(truth))
        accs.append(correct / len(pairs))
    arr = np.asarray(accs, dtype=np.float64)
    return TuringResult(
        mean_accuracy=float(arr.mean()),
        std_accuracy=float(arr.std(ddof=0)),
        n_raters=len(arr),
    )


@dataclass
class MetricReport:
    """Serializable evaluation summary written next to run outputs."""

    task: str
    metrics: dict[str, float]
    n: int
    seed: int
    config_digest: str
    curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    ci: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "curves": self.curves,
            "ci": self.ci,
            "n": self.n,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        return path

    @staticmethod
    def from_json(obj: dict) -> "MetricReport":
        return MetricReport(
            task=obj["task"],
            metrics=dict(obj["metrics"]),
            curves=dict(obj.get("curves", {})),
            ci=dict(obj.get("ci", {})),
            n=int(obj["n"]),
            seed=int(obj["seed"]),
            config_digest=str(obj["config_digest"]),
        )
