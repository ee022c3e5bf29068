"""Confusion counts, MCC, ROC/AUC, precision-recall and threshold selection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from miattn.errors import DataError


class LengthMismatch(DataError):
    pass


class SingleClass(DataError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    return p, y.astype(np.int64)


def confusion_at_threshold(probs, labels, threshold: float) -> ConfusionMatrix:
    """Predict positive iff ``p >= threshold``."""
    p, y = _pair(probs, labels)
    pred = p >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(pred & (y == 1))),
        tn=int(np.sum(~pred & (y == 0))),
        fp=int(np.sum(pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


def mcc(c: ConfusionMatrix) -> float:
    """Matthews correlation; 0 when any marginal sum vanishes."""
    sums = (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn)
    if 0 in sums:
        return 0.0
    denom = math.sqrt(sums[0] * sums[1] * sums[2] * sums[3])
    return (c.tp * c.tn - c.fp * c.fn) / denom


@dataclass(frozen=True)
class Curve:
    """Operating points for descending thresholds; row ``k`` uses ``thresholds[k]``."""

    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray


def _sweep(p: np.ndarray, y: np.ndarray):
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(ps))[0], ps.size - 1]
    tps = np.cumsum(ys)[distinct]
    fps = (distinct + 1) - tps
    return ps[distinct], tps, fps


def roc_curve(probs, labels) -> tuple[Curve, float]:
    """ROC over all distinct scores with a leading ``(0, 0)`` point at ``+inf``."""
    p, y = _pair(probs, labels)
    n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes present")
    thr, tps, fps = _sweep(p, y)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, thr]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve(thresholds, fpr, tpr), auc


def roc_auc(probs, labels) -> float:
    return roc_curve(probs, labels)[1]


def pr_curve(probs, labels) -> Curve:
    """Precision (``y``) against recall (``x``) at each distinct score."""
    p, y = _pair(probs, labels)
    n_pos = int(y.sum())
    thr, tps, fps = _sweep(p, y)
    recall = tps / n_pos if n_pos else np.zeros_like(tps, dtype=np.float64)
    precision = tps / (tps + fps)
    return Curve(thr, recall.astype(np.float64), precision)


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    distance: float
    fpr: float
    tpr: float
    precision_recall_gap: float


def select_threshold(roc: Curve, pr: Curve | None = None) -> ThresholdChoice:
    """Threshold whose ROC point lies nearest ``(0, 1)``; ties go to the larger threshold.

    The ``+inf`` sentinel point is excluded. When a PR curve is supplied,
    ``|precision - recall|`` at the chosen threshold is reported.
    """
    finite = np.isfinite(roc.thresholds)
    if not finite.any():
        raise SingleClass("ROC curve has no finite operating points")
    thr, fpr, tpr = roc.thresholds[finite], roc.x[finite], roc.y[finite]
    dist = np.hypot(fpr, 1.0 - tpr)
    best = np.flatnonzero(dist == dist.min())
    k = best[np.argmax(thr[best])]
    gap = float("nan")
    if pr is not None:
        match = np.flatnonzero(pr.thresholds == thr[k])
        if match.size:
            gap = float(abs(pr.y[match[0]] - pr.x[match[0]]))
    return ThresholdChoice(float(thr[k]), float(dist[k]), float(fpr[k]), float(tpr[k]), gap)


@dataclass
class MetricReport:
    loss: float
    sensitivity: float
    specificity: float
    accuracy: float
    mcc: float
    auc: float
    threshold: float
    confusion: ConfusionMatrix | None = None

    def as_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = None if self.confusion is None else self.confusion.as_dict()
        return d


METRIC_FIELDS = ("loss", "sensitivity", "specificity", "accuracy", "mcc", "auc")


def evaluate(probs, labels, threshold: float, loss: float) -> MetricReport:
    c = confusion_at_threshold(probs, labels, threshold)
    return MetricReport(
        loss=float(loss),
        sensitivity=c.sensitivity,
        specificity=c.specificity,
        accuracy=c.accuracy,
        mcc=mcc(c),
        auc=roc_auc(probs, labels),
        threshold=float(threshold),
        confusion=c,
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    means = {f: float(np.mean([getattr(r, f) for r in reports])) for f in METRIC_FIELDS}
    thresholds = {r.threshold for r in reports}
    thr = reports[0].threshold if len(thresholds) == 1 else float(np.mean([r.threshold for r in reports]))
    return MetricReport(threshold=thr, **means)
