"""Scoring of labeled instances: mask AP, axis-aligned box AP, top-1 recognition.

Matching is greedy in descending prediction probability against unmatched
ground truth of the same class, and AP is the area under the all-point
interpolated precision/recall curve. Classes absent from the ground truth are
excluded from class means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .scene_io import InstanceMask, PointCloud

AP_STRICT_THRESHOLDS = tuple(np.arange(0.5, 0.96, 0.05).round(2))  # mean -> "AP"


@dataclass
class GroundTruthInstance:
    mask: InstanceMask
    label: str


@dataclass
class PredictedInstance:
    mask: InstanceMask
    label: str
    probability: float


@dataclass
class EvalResult:
    per_class: dict = field(default_factory=dict)   # class -> {metric -> value}
    means: dict = field(default_factory=dict)       # metric -> value
    confusion: dict = field(default_factory=dict)   # recognition mode only

    def classes(self):
        return sorted(self.per_class)


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    """Index-set IoU of two masks over the same cloud."""
    na, nb = len(a), len(b)
    if na == 0 and nb == 0:
        raise DomainError("IoU of two empty masks is undefined")
    inter = len(np.intersect1d(a.point_indices, b.point_indices, assume_unique=True))
    return inter / (na + nb - inter)


def to_aabb(mask: InstanceMask, cloud: PointCloud) -> np.ndarray:
    """(2, 3) [min, max] axis-aligned box over the mask's points."""
    if len(mask) == 0:
        raise DomainError("empty mask has no bounding box")
    pts = cloud.points[mask.point_indices]
    return np.stack([pts.min(axis=0), pts.max(axis=0)])


def box_iou_3d(a: np.ndarray, b: np.ndarray) -> float:
    """Volume IoU of (2, 3) axis-aligned boxes; degenerate boxes match only
    when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    va = float(np.prod(a[1] - a[0]))
    vb = float(np.prod(b[1] - b[0]))
    union = va + vb - inter
    if union <= 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return inter / union


def _average_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from per-prediction hit flags (score order)."""
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # precision envelope: monotone non-increasing from the right
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _greedy_ap(scored, gts, iou_fn, threshold: float) -> dict:
    """Per-class AP via greedy best-IoU matching at one threshold.

    scored: (probability, label, object) predictions; gts: (label, object).
    """
    classes = sorted({lab for lab, _ in gts})
    out = {}
    for cls in classes:
        gt_objs = [obj for lab, obj in gts if lab == cls]
        preds = [(p, obj) for p, lab, obj in scored if lab == cls]
        order = np.argsort([-p for p, _ in preds], kind="stable")
        matched = [False] * len(gt_objs)
        tp = np.zeros(len(preds))
        fp = np.zeros(len(preds))
        for rank, pi in enumerate(order):
            _, pobj = preds[pi]
            best_iou, best_j = 0.0, -1
            for j, gobj in enumerate(gt_objs):
                if matched[j]:
                    continue
                iou = iou_fn(pobj, gobj)
                if iou >= threshold and iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0:
                matched[best_j] = True
                tp[rank] = 1
            else:
                fp[rank] = 1
        out[cls] = _average_precision(tp, fp, len(gt_objs))
    return out


def _ap_result(scored, gts, iou_fn, thresholds=(0.25, 0.5)) -> EvalResult:
    result = EvalResult()
    named = {f"AP{int(round(t * 100))}": t for t in thresholds}
    per_threshold = {name: _greedy_ap(scored, gts, iou_fn, t) for name, t in named.items()}
    strict = [_greedy_ap(scored, gts, iou_fn, t) for t in AP_STRICT_THRESHOLDS]
    classes = sorted({lab for lab, _ in gts})
    for cls in classes:
        entry = {name: per_threshold[name][cls] for name in named}
        entry["AP"] = float(np.mean([ap[cls] for ap in strict]))
        result.per_class[cls] = entry
    for metric in list(named) + ["AP"]:
        vals = [result.per_class[c][metric] for c in classes]
        result.means[metric] = float(np.mean(vals)) if vals else 0.0
    return result


def instance_ap(predictions: list[PredictedInstance], gt: list[GroundTruthInstance],
                thresholds=(0.25, 0.5)) -> EvalResult:
    """Mask-IoU average precision per class, plus class means."""
    scored = [(p.probability, p.label, p.mask) for p in predictions]
    gts = [(g.label, g.mask) for g in gt]
    return _ap_result(scored, gts, mask_iou, thresholds)


def detection_ap25(pred_boxes: list, gt_boxes: list) -> EvalResult:
    """Axis-aligned 3D box AP at IoU 0.25.

    pred_boxes: (box, label, probability); gt_boxes: (box, label).
    """
    scored = [(p, lab, box) for box, lab, p in pred_boxes]
    gts = [(lab, box) for box, lab in gt_boxes]
    return _ap_result(scored, gts, box_iou_3d, thresholds=(0.25,))


def recognition_top1(gt_labels: list[str], predicted: dict[int, str]) -> EvalResult:
    """Per-class accuracy of labeling ground-truth masks.

    predicted maps gt mask index -> assigned label; unlabeled or mislabeled
    masks count against the class.
    """
    result = EvalResult()
    classes = sorted(set(gt_labels))
    for cls in classes:
        idxs = [i for i, lab in enumerate(gt_labels) if lab == cls]
        correct = sum(1 for i in idxs if predicted.get(i) == cls)
        result.per_class[cls] = {"top1": correct / len(idxs),
                                 "correct": correct, "total": len(idxs)}
    accs = [result.per_class[c]["top1"] for c in classes]
    result.means["top1"] = float(np.mean(accs)) if accs else 0.0
    for i, lab in enumerate(gt_labels):
        pred = predicted.get(i, "<none>")
        result.confusion[(lab, pred)] = result.confusion.get((lab, pred), 0) + 1
    return result


# ---------------------------------------------------------------------------
# exports

def save_metrics_csv(result: EvalResult, path):
    metrics = ["AP25", "AP50", "AP"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + metrics)
        for cls in result.classes():
            row = [cls] + [f"{result.per_class[cls].get(m, ''):.6f}"
                           if m in result.per_class[cls] else "" for m in metrics]
            writer.writerow(row)
        writer.writerow(["mean"] + [f"{result.means.get(m, 0.0):.6f}" if m in result.means
                                    else "" for m in metrics])


def save_recognition_csv(result: EvalResult, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "top1", "correct", "total"])
        for cls in result.classes():
            e = result.per_class[cls]
            writer.writerow([cls, f"{e['top1']:.6f}", e["correct"], e["total"]])
        writer.writerow(["mean", f"{result.means.get('top1', 0.0):.6f}", "", ""])


def summary_table(result: EvalResult, metrics=("AP25", "AP50", "AP")) -> str:
    lines = []
    width = max([len(c) for c in result.classes()] + [5])
    header = "class".ljust(width) + "".join(m.rjust(10) for m in metrics)
    lines.append(header)
    lines.append("-" * len(header))
    for cls in result.classes():
        row = cls.ljust(width)
        for m in metrics:
            val = result.per_class[cls].get(m)
            row += (f"{val:10.4f}" if val is not None else " " * 10)
        lines.append(row)
    row = "mean".ljust(width)
    for m in metrics:
        row += f"{result.means.get(m, 0.0):10.4f}"
    lines.append(row)
    return "\n".join(lines)
