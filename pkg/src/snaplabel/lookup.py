"""Assign category names to 3D masks by searching detections with projected
footprints.

The global stage matches every mask footprint against the detections of each
view, keeps the best match per view when its IoU clears the gate, and
aggregates matches across views: candidate labels seen in fewer than
min_views views are discarded, surviving labels are scored by their mean IoU,
and scores are normalized into a probability over the candidates. Masks left
unlabeled go through a local stage that re-queries the detector on enlarged
crops of the mask's least-occluded views, then aggregates the same way but
tolerating single-view support. Masks still unlabeled afterwards are dropped
from the final instance set.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .detector import (BOX_REGION, Detection, DetectionRequest, query_detector)
from .errors import DomainError, TransportError
from .projection import Mask2PixelMap, OcclusionReport, top_k_views
from .scene_io import MaskSet

log = logging.getLogger(__name__)

GLOBAL_STAGE = "global"
LOCAL_STAGE = "local"


@dataclass
class LookupConfig:
    iou_gate: float = 0.20
    min_views: int = 2
    lel_top_k: int = 4
    crop_scale: float = 2.0
    lel_min_views: int = 1
    lel_iou_gate: float | None = None  # None = reuse iou_gate

    def __post_init__(self):
        if not 0 < self.iou_gate < 1:
            raise DomainError("iou_gate must lie in (0, 1)")
        if self.min_views < 1:
            raise DomainError("min_views must be >= 1")
        if self.crop_scale < 1:
            raise DomainError("crop_scale must be >= 1")
        if self.lel_top_k < 1:
            raise DomainError("lel_top_k must be >= 1")

    @property
    def local_gate(self) -> float:
        return self.iou_gate if self.lel_iou_gate is None else self.lel_iou_gate


@dataclass
class LabeledMask:
    mask_id: int
    label: str
    probability: float
    supporting_views: list  # (view_id, iou) pairs for the winning label
    stage: str


def pixel_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two sorted unique linear-pixel-index arrays."""
    if len(a) == 0 or len(b) == 0:
        return 0.0
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


def box_iou_2d(a: tuple, b: tuple) -> float:
    """IoU of inclusive pixel boxes (x0, y0, x1, y1)."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    if ix0 > ix1 or iy0 > iy1:
        return 0.0
    inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def _footprint_iou(footprint: np.ndarray, box: tuple | None, det: Detection) -> float:
    """Mask-vs-mask IoU for mask detections, tight-box-vs-box for box detections."""
    if det.region_kind == BOX_REGION:
        if box is None:
            return 0.0
        return box_iou_2d(box, det.box)
    return pixel_iou(footprint, det.pixels)


def match_in_view(m2p: Mask2PixelMap, mask_id: int, detections: list[Detection],
                  iou_gate: float):
    """Best-IoU detection for one mask in one view, or None below the gate.

    Ties resolve to the higher-confidence detection, then the earlier one.
    """
    footprint = m2p.pixels[mask_id]
    box = m2p.boxes[mask_id]
    best = None
    for idx, det in enumerate(detections):
        iou = _footprint_iou(footprint, box, det)
        key = (-iou, -det.confidence, idx)
        if best is None or key < best[0]:
            best = (key, det.label, iou)
    if best is None or best[2] < iou_gate:
        return None
    return best[1], best[2]


def _aggregate(matches: list, min_views: int):
    """Reduce (view_id, label, iou) matches to (label, probability, views).

    Candidate labels below min_views support are discarded; surviving labels
    score their mean IoU, normalized into a probability. Returns None when no
    label survives.
    """
    support: dict[str, list] = {}
    for view_id, label, iou in matches:
        support.setdefault(label, []).append((view_id, iou))
    survivors = {lab: views for lab, views in support.items() if len(views) >= min_views}
    if not survivors:
        return None
    scores = {lab: float(np.mean([iou for _, iou in views]))
              for lab, views in survivors.items()}
    total = sum(scores.values())
    if total <= 0:
        return None
    winner = min(survivors, key=lambda lab: (-scores[lab] / total, -len(survivors[lab]), lab))
    return winner, scores[winner] / total, survivors[winner]


def global_lookup(m2p_maps: dict[int, Mask2PixelMap], clt, masks: MaskSet,
                  config: LookupConfig):
    """Label masks from multi-view matches; returns (labeled, leftover ids)."""
    labeled, leftovers = [], []
    view_ids = sorted(m2p_maps)
    for mask_id in range(len(masks)):
        matches = []
        for vid in view_ids:
            hit = match_in_view(m2p_maps[vid], mask_id, clt.get(vid), config.iou_gate)
            if hit is not None:
                matches.append((vid, hit[0], hit[1]))
        agg = _aggregate(matches, config.min_views)
        if agg is None:
            leftovers.append(mask_id)
        else:
            label, prob, views = agg
            labeled.append(LabeledMask(mask_id, label, prob, views, GLOBAL_STAGE))
    return labeled, leftovers


def scale_box(box: tuple, scale: float, width: int, height: int) -> tuple:
    """Center-preserving box enlargement, clipped to the image."""
    x0, y0, x1, y1 = box
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    hx, hy = 0.5 * (x1 - x0) * scale, 0.5 * (y1 - y0) * scale
    return (int(max(0, np.floor(cx - hx))), int(max(0, np.floor(cy - hy))),
            int(min(width - 1, np.ceil(cx + hx))), int(min(height - 1, np.ceil(cy + hy))))


def _encode_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def local_enforced_lookup(leftovers: list[int], report: OcclusionReport,
                          m2p_maps: dict[int, Mask2PixelMap], views: list,
                          provider, vocabulary: list[str], config: LookupConfig,
                          retries: int = 2, stats: dict | None = None) -> list[LabeledMask]:
    """Re-query the detector on enlarged crops of each leftover mask.

    Crops come from the mask's least-occluded views (top lel_top_k by
    visibility rate, zero-rate views skipped). Per-crop transport failures
    skip the crop; a mask whose crops all fail is skipped with a warning.
    """
    views_by_id = {v.view_id: v for v in views}
    png_cache: dict[int, bytes] = {}
    labeled = []
    if stats is None:
        stats = {}
    stats.setdefault("crop_requests", 0)
    stats.setdefault("crop_failures", 0)
    for mask_id in leftovers:
        ranked = top_k_views(report, mask_id, min(config.lel_top_k, len(report.view_ids)))
        rate_of = dict(zip(report.view_ids, report.rates[mask_id]))
        matches, attempts, failures = [], 0, 0
        for vid in ranked:
            if rate_of[vid] <= 0 or vid not in m2p_maps:
                continue
            m2p = m2p_maps[vid]
            box = m2p.boxes[mask_id]
            if box is None:
                continue
            view = views_by_id[vid]
            crop = scale_box(box, config.crop_scale, m2p.width, m2p.height)
            if vid not in png_cache:
                png_cache[vid] = _encode_png(view.rgb)
            req = DetectionRequest(vocabulary=vocabulary, view_id=vid,
                                   image_bytes=png_cache[vid], crop=crop)
            attempts += 1
            stats["crop_requests"] += 1
            try:
                dets = query_detector(provider, [req], retries=retries)
            except TransportError as exc:
                failures += 1
                stats["crop_failures"] += 1
                log.warning("crop query failed for mask %d view %d: %s", mask_id, vid, exc)
                continue
            hit = match_in_view(m2p, mask_id, dets, config.local_gate)
            if hit is not None:
                matches.append((vid, hit[0], hit[1]))
        if attempts > 0 and failures == attempts:
            log.warning("all %d crop queries failed for mask %d; leaving it unlabeled",
                        attempts, mask_id)
            continue
        agg = _aggregate(matches, config.lel_min_views)
        if agg is not None:
            label, prob, supp = agg
            labeled.append(LabeledMask(mask_id, label, prob, supp, LOCAL_STAGE))
    return labeled


def final_refinement(masks: MaskSet, labeled: list[LabeledMask]) -> list[LabeledMask]:
    """Keep exactly the masks that obtained a label, in mask order."""
    by_id = {lm.mask_id: lm for lm in labeled}
    return [by_id[i] for i in sorted(by_id)]


# ---------------------------------------------------------------------------
# labeled-instance files (JSON-lines)

def save_labeled(labeled: list[LabeledMask], path):
    with open(path, "w", encoding="utf-8") as fh:
        for lm in labeled:
            fh.write(json.dumps({
                "mask_id": lm.mask_id,
                "label": lm.label,
                "prob": round(float(lm.probability), 10),
                "stage": lm.stage,
                "views": [[int(v), round(float(i), 10)] for v, i in lm.supporting_views],
            }) + "\n")


def load_labeled(path) -> list[LabeledMask]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(LabeledMask(rec["mask_id"], rec["label"], rec["prob"],
                                   [(v, i) for v, i in rec["views"]], rec["stage"]))
    return out
