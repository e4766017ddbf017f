"""Instance-segmentation average precision over point index sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

AP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass
class PredictionRecord:
    point_indices: np.ndarray
    label: Optional[str]
    confidence: float

    def __post_init__(self):
        self.point_indices = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        if len(self.point_indices) == 0:
            raise ValueError("prediction has no points")
        if not np.isfinite(self.confidence):
            raise ValueError("prediction confidence must be finite")


@dataclass
class GTRecord:
    point_indices: np.ndarray
    label: str

    def __post_init__(self):
        self.point_indices = np.unique(np.asarray(self.point_indices, dtype=np.int64))


@dataclass
class MetricsReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap25: Optional[float]
    per_label: dict  # label -> {"ap", "ap50", "ap25"}
    per_group: dict  # group -> {"ap", "ap50", "ap25"}
    coverage: Optional[float]
    num_predictions: int
    num_unlabeled: int
    num_gt: int

    def to_dict(self):
        return {
            "AP": self.ap, "AP50": self.ap50, "AP25": self.ap25,
            "per_label": self.per_label, "per_group": self.per_group,
            "coverage": self.coverage, "num_predictions": self.num_predictions,
            "num_unlabeled_predictions": self.num_unlabeled, "num_gt": self.num_gt,
        }

    def to_table(self) -> str:
        def fmt(x):
            return "   -  " if x is None else f"{100 * x:6.1f}"

        lines = [f"{'':<20}{'AP':>7}{'AP50':>7}{'AP25':>7}",
                 f"{'all':<20}{fmt(self.ap)} {fmt(self.ap50)} {fmt(self.ap25)}"]
        for name, vals in self.per_group.items():
            lines.append(f"{'group:' + name:<20}{fmt(vals['ap'])} {fmt(vals['ap50'])} {fmt(vals['ap25'])}")
        for name, vals in self.per_label.items():
            lines.append(f"{name:<20}{fmt(vals['ap'])} {fmt(vals['ap50'])} {fmt(vals['ap25'])}")
        if self.coverage is not None:
            lines.append(f"coverage of GT points by any prediction: {100 * self.coverage:.1f}%")
        return "\n".join(lines)


def iou(a, b) -> float:
    a = np.unique(np.asarray(a, dtype=np.int64))
    b = np.unique(np.asarray(b, dtype=np.int64))
    if len(a) == 0 and len(b) == 0:
        raise ValueError("IoU of two empty sets is undefined")
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


def rank_predictions(preds):
    """Descending confidence, then larger point set, then input order."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, -len(preds[i].point_indices), i))


def precision_recall_ap(tp_flags, num_gt: int) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(preds, gts, iou_thresh: float) -> float:
    """AP of one label's predictions against that label's ground truth instances.

    Predictions are visited best first and each takes the unmatched GT of
    highest IoU (>= ``iou_thresh``; lower GT index on ties).
    """
    if not 0 < iou_thresh <= 1:
        raise ValueError("iou_thresh must lie in (0, 1]")
    if not gts:
        raise ValueError("no ground truth instances for this label")
    return _greedy_ap(preds, iou_matrix(preds, gts), len(gts), iou_thresh)


def _greedy_ap(preds, ious, num_gt, iou_thresh):
    matched = np.zeros(num_gt, dtype=bool)
    flags = []
    for i in rank_predictions(preds):
        cand = np.where(~matched & (ious[i] >= iou_thresh), ious[i], -1.0)
        j = int(np.argmax(cand)) if len(cand) else -1
        if j >= 0 and cand[j] >= 0:
            matched[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return precision_recall_ap(flags, num_gt)


def iou_matrix(preds, gts) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    if not preds or not gts:
        return out
    # Sparse overlap counting via a shared point index space.
    gt_of = {}
    for j, g in enumerate(gts):
        for p in g.point_indices.tolist():
            gt_of.setdefault(p, []).append(j)
    gt_sizes = np.array([len(g.point_indices) for g in gts])
    for i, pr in enumerate(preds):
        inter = np.zeros(len(gts))
        for p in pr.point_indices.tolist():
            for j in gt_of.get(p, ()):
                inter[j] += 1
        union = len(pr.point_indices) + gt_sizes - inter
        out[i] = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out


def _per_label_ap(preds, gts, thresholds):
    by_label_gt = {}
    for g in gts:
        by_label_gt.setdefault(g.label.casefold(), []).append(g)
    by_label_pred = {}
    for p in preds:
        if p.label is not None:
            by_label_pred.setdefault(p.label.casefold(), []).append(p)
    out = {}
    for label, lab_gts in sorted(by_label_gt.items()):
        lab_preds = by_label_pred.get(label, [])
        ious = iou_matrix(lab_preds, lab_gts)
        out[label] = [_greedy_ap(lab_preds, ious, len(lab_gts), t) for t in thresholds]
    return out


def evaluate(preds, gts, groups: Optional[dict] = None) -> MetricsReport:
    """AP over IoU 0.50:0.05:0.95, AP50, AP25, per label and per label group."""
    labeled = [p for p in preds if p.label is not None]
    unlabeled = len(preds) - len(labeled)
    coverage = None
    if gts:
        gt_points = np.unique(np.concatenate([g.point_indices for g in gts]))
        covered = np.unique(np.concatenate([p.point_indices for p in preds])) if preds else np.zeros(0, np.int64)
        coverage = len(np.intersect1d(gt_points, covered)) / len(gt_points) if len(gt_points) else None
    if not gts:
        return MetricsReport(None, None, None, {}, {}, coverage, len(preds), unlabeled, 0)

    thresholds = list(AP_THRESHOLDS) + [0.25]
    table = _per_label_ap(labeled, gts, thresholds)

    def summary(rows):
        arr = np.array(rows)
        return {"ap": float(arr[:, : len(AP_THRESHOLDS)].mean(axis=1).mean()),
                "ap50": float(arr[:, 0].mean()), "ap25": float(arr[:, -1].mean())}

    per_label = {label: summary([vals]) for label, vals in table.items()}
    overall = summary(list(table.values()))
    per_group = {}
    if groups:
        folded = {k.casefold(): v for k, v in groups.items()}
        for group in sorted(set(folded.values())):
            rows = [vals for label, vals in table.items() if folded.get(label) == group]
            if rows:
                per_group[group] = summary(rows)
    return MetricsReport(overall["ap"], overall["ap50"], overall["ap25"], per_label, per_group,
                         coverage, len(preds), unlabeled, len(gts))
