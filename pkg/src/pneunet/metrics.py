"""Evaluation artifacts: confusion matrix, derived metrics, ROC curve, AUC.

Conventions fixed here: a score exactly at the threshold counts as a
positive prediction; zero-denominator metrics return 0.0 (flagged in the
report object, not serialized); ROC groups tied scores at one threshold,
which makes trapezoidal AUC equal the Mann-Whitney statistic with the
half-tie convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class RocCurve:
    points: tuple  # ((fpr, tpr), ...) with fpr non-decreasing
    thresholds: tuple  # aligned; +inf sentinel for the (0,0) corner

    def __post_init__(self):
        if len(self.points) != len(self.thresholds):
            raise ValueError("points and thresholds must align")
        if self.points[0] != (0.0, 0.0) or self.points[-1] != (1.0, 1.0):
            raise ValueError("ROC must begin at (0,0) and end at (1,1)")
        fprs = [p[0] for p in self.points]
        if any(b < a for a, b in zip(fprs, fprs[1:])):
            raise ValueError("FPR must be non-decreasing along the curve")


@dataclass
class EvalReport:
    cm: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    threshold: float
    n: int
    # names of metrics that hit the zero-denominator convention; not serialized
    degenerate: tuple = field(default=(), compare=False)

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "auc": self.auc,
                "threshold": self.threshold, "n": self.n,
                "cm": self.cm.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "EvalReport":
        return EvalReport(cm=ConfusionMatrix(**obj["cm"]),
                          accuracy=obj["accuracy"], precision=obj["precision"],
                          recall=obj["recall"], f1=obj["f1"], auc=obj["auc"],
                          threshold=obj["threshold"], n=obj["n"])


# ---------------------------------------------------------------------------
# Confusion + derived metrics


def _validate_pairs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise ValueError("empty input")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold: float) -> ConfusionMatrix:
    """Tally predictions at a fixed threshold; score >= threshold is positive."""
    scores, labels = _validate_pairs(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(tp=int(np.sum(pred & pos)),
                           fp=int(np.sum(pred & ~pos)),
                           tn=int(np.sum(~pred & ~pos)),
                           fn=int(np.sum(~pred & pos)))


def _safe_div(num: float, den: float):
    return (num / den, False) if den else (0.0, True)


def precision(cm: ConfusionMatrix) -> float:
    return _safe_div(cm.tp, cm.tp + cm.fp)[0]


def recall(cm: ConfusionMatrix) -> float:
    return _safe_div(cm.tp, cm.tp + cm.fn)[0]


def accuracy(cm: ConfusionMatrix) -> float:
    return _safe_div(cm.tp + cm.tn, cm.total)[0]


def f1_score(cm: ConfusionMatrix) -> float:
    p, r = precision(cm), recall(cm)
    return _safe_div(2 * p * r, p + r)[0]


# ---------------------------------------------------------------------------
# ROC / AUC


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores, descending, ties grouped."""
    scores, labels = _validate_pairs(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]

    points = [(0.0, 0.0)]
    thresholds = [float("inf")]
    tp = fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(np.sum(sorted_labels[i:j] == 1))
        fp += int(np.sum(sorted_labels[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos))
        thresholds.append(float(sorted_scores[i]))
        i = j
    return RocCurve(points=tuple(points), thresholds=tuple(thresholds))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area over FPR."""
    total = 0.0
    pts = curve.points
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        total += (x1 - x0) * (y0 + y1) / 2.0
    return total


def evaluate_scores(scores, labels, threshold: float = 0.5) -> EvalReport:
    """Full report: confusion at the threshold plus threshold-free AUC."""
    cm = confusion(scores, labels, threshold)
    degenerate = []
    prec, flag = _safe_div(cm.tp, cm.tp + cm.fp)
    if flag:
        degenerate.append("precision")
    rec, flag = _safe_div(cm.tp, cm.tp + cm.fn)
    if flag:
        degenerate.append("recall")
    acc, _ = _safe_div(cm.tp + cm.tn, cm.total)
    f1, flag = _safe_div(2 * prec * rec, prec + rec)
    if flag:
        degenerate.append("f1")
    try:
        area = auc(roc_curve(scores, labels))
    except ValueError:
        area = 0.0
        degenerate.append("auc")
    return EvalReport(cm=cm, accuracy=acc, precision=prec, recall=rec, f1=f1,
                      auc=area, threshold=threshold, n=cm.total,
                      degenerate=tuple(degenerate))


# ---------------------------------------------------------------------------
# Export


def export_report(report: EvalReport, curve: RocCurve | None, out_dir) -> dict:
    """Write report.json (and roc.csv when a curve is given); returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    report_path = out_dir / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["report"] = report_path
    if curve is not None:
        roc_path = out_dir / "roc.csv"
        with open(roc_path, "w") as fh:
            fh.write("fpr,tpr,threshold\n")
            for (fpr, tpr), thr in zip(curve.points, curve.thresholds):
                fh.write(f"{fpr:.6f},{tpr:.6f},{thr:.6f}\n")
        paths["roc"] = roc_path
    return paths
