"""Keypoint-transfer evaluation: PCK and transfer average precision.

A prediction is correct when it lands within ``alpha * max(h, w)`` of the
ground truth (boundary inclusive).  PCK counts only keypoints with ground
truth present; the AP metric sweeps confidence thresholds (strictly-above
comparison) and additionally penalizes confident predictions for
keypoints that do not exist in the target.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EvalRecord",
    "PRCurve",
    "MetricsError",
    "pck",
    "apk",
    "write_pr_curve",
    "read_pr_curve",
    "trapezoid_ap",
]


class MetricsError(ValueError):
    """Raised when a metric is undefined for the given records."""


@dataclass
class EvalRecord:
    """One transferred keypoint: prediction, confidence and ground truth.

    ``gt`` is None when the keypoint has no correspondence in the target
    image; ``height``/``width`` are the target image dimensions that set
    the correctness radius.
    """

    keypoint_id: str
    pred: np.ndarray
    confidence: float
    gt: object            # (2,) array or None
    height: int
    width: int

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=float).reshape(2)
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=float).reshape(2)
        if not math.isfinite(self.confidence):
            raise MetricsError("record confidence must be finite")

    def radius(self, alpha):
        return alpha * max(self.height, self.width)

    def correct(self, alpha):
        if self.gt is None:
            return False
        return float(np.linalg.norm(self.pred - self.gt)) <= self.radius(alpha)


@dataclass
class PRCurve:
    """Precision/recall points over descending confidence thresholds."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pck(records, alpha):
    """Fraction of gt-present records predicted within the alpha radius."""
    counted = [r for r in records if r.gt is not None]
    if not counted:
        raise MetricsError("PCK undefined: no records with ground truth")
    hits = sum(1 for r in counted if r.correct(alpha))
    return hits / len(counted)


def trapezoid_ap(recall, precision):
    """Area under precision(recall) by the trapezoid rule."""
    order = np.argsort(recall, kind="stable")
    r = np.asarray(recall, dtype=float)[order]
    p = np.asarray(precision, dtype=float)[order]
    return float(np.trapezoid(p, r))


def apk(records, alpha, n_pair):
    """Transfer AP: precision/recall over confidence thresholds.

    At each threshold t, predictions with confidence strictly above t are
    counted; a counted prediction is a true positive when ground truth is
    present and the error is within the alpha radius, else a false
    positive.  Recall divides by ``n_pair``, the number of ground-truth
    correspondences.  Thresholds sweep the distinct confidences plus a
    sentinel below the minimum so the last point counts every record.
    Returns ``(PRCurve, ap)``.
    """
    if n_pair <= 0:
        raise MetricsError("APK undefined: n_pair must be positive")
    if not records:
        raise MetricsError("APK undefined: no records")
    confs = np.array([r.confidence for r in records])
    correct = np.array([r.correct(alpha) for r in records])
    thresholds = np.concatenate([
        np.unique(confs)[::-1], [confs.min() - 1.0]])
    precision = np.empty(len(thresholds))
    recall = np.empty(len(thresholds))
    for k, t in enumerate(thresholds):
        above = confs > t
        tp = int((above & correct).sum())
        fp = int((above & ~correct).sum())
        precision[k] = tp / (tp + fp) if tp + fp else 1.0
        recall[k] = tp / n_pair
    ap = trapezoid_ap(recall, precision)
    return PRCurve(thresholds, precision, recall, ap), ap


def write_pr_curve(curve, csv_path, summary_path=None, pck_value=None):
    """Write the curve as CSV (threshold, precision, recall) plus a JSON summary."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
    if summary_path is not None:
        summary = {"ap": curve.ap}
        if pck_value is not None:
            summary["pck"] = pck_value
        with open(summary_path, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")


def read_pr_curve(csv_path):
    """Read a PR curve CSV back; ap is recomputed from the points."""
    ts, ps, rs = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["threshold", "precision", "recall"]:
            raise MetricsError("unrecognized PR curve header")
        for row in reader:
            ts.append(float(row[0]))
            ps.append(float(row[1]))
            rs.append(float(row[2]))
    ts, ps, rs = map(np.asarray, (ts, ps, rs))
    ap = trapezoid_ap(rs, ps) if len(ts) else float("nan")
    return PRCurve(ts, ps, rs, ap)
