"""Mask footprints in image space and per-view visibility rates.

Two related computations live here:

* Mask2Pixel maps: for one rendered view, the set of pixels each mask owns
  after depth-based occlusion, where splatted mask contributions compete and
  the foremost contribution wins each pixel.
* Occlusion report: the per-mask, per-view visibility rate computed on plain
  center-pixel projections. Per view, points are counted per pixel per mask
  (with a background slot), the foremost point of each pixel determines the
  owning mask, and a mask's rate is the fraction of its points landing on
  pixels it owns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DomainError
from .render import RenderedView, center_pixels, rasterize_keys, unpack_winner
from .scene_io import MaskSet, PointCloud

DEFAULT_DEPTH_TOL = 1e-2


@dataclass
class Mask2PixelMap:
    view_id: int
    width: int
    height: int
    pixels: list[np.ndarray]          # per mask: sorted linear pixel indices it owns
    visible_counts: np.ndarray        # per mask: points passing the depth test
    boxes: list[tuple | None] = field(default_factory=list)  # per mask: (x0, y0, x1, y1) inclusive

    def tight_box(self, mask_id: int):
        return self.boxes[mask_id]

    def label_image(self) -> np.ndarray:
        """(H, W) uint16 debug image: mask index + 1, 0 where unowned."""
        img = np.zeros(self.width * self.height, dtype=np.uint16)
        for k, pix in enumerate(self.pixels):
            img[pix] = k + 1
        return img.reshape(self.height, self.width)


@dataclass
class OcclusionReport:
    rates: np.ndarray         # (M, V) in [0, 1]
    total_points: np.ndarray  # (M,)
    view_ids: list[int]


def _mask_entries(masks: MaskSet):
    """Concatenated (point_index, mask_id) arrays in mask-major order."""
    if len(masks) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    pts = np.concatenate([m.point_indices for m in masks])
    ids = np.concatenate([np.full(len(m), k, np.int64) for k, m in enumerate(masks)])
    return pts, ids


def build_mask2pixel(cloud: PointCloud, masks: MaskSet, view: RenderedView,
                     depth_tol: float = DEFAULT_DEPTH_TOL,
                     splat_radius_px: int = 1) -> Mask2PixelMap:
    """Project masks into one view with the camera that rendered it.

    A mask point contributes to a pixel iff the pixel lies within the splat
    footprint of its projection and the point's depth is within
    (1 + depth_tol) of the scene depth stored at that pixel. Each pixel is
    owned by the foremost contribution; depth ties resolve to the lower mask
    id, then the earlier point. A point counts as visible when its own center
    pixel accepts it.
    """
    cam = view.camera
    W, H = cam.width, cam.height
    M = len(masks)
    pt_idx, mask_ids = _mask_entries(masks)
    iu, iv, zf, valid = center_pixels(cam, cloud.points[pt_idx] if len(pt_idx) else
                                      np.empty((0, 3)))
    depth_flat = view.depth.ravel()
    limit_scale = np.float32(1.0 + depth_tol)

    # visibility at the center pixel
    lin_center = np.where(valid, iv * W + iu, 0)
    center_ok = valid & (zf <= depth_flat[lin_center] * limit_scale)
    visible_counts = np.bincount(mask_ids[center_ok], minlength=M) if M else np.zeros(0, np.int64)

    # splatted contributions, depth-tested per target pixel
    r = splat_radius_px
    offs = np.arange(-r, r + 1)
    du, dv = np.meshgrid(offs, offs, indexing="xy")
    du, dv = du.ravel(), dv.ravel()
    src = np.nonzero(valid)[0]
    pu = iu[src][:, None] + du[None, :]
    pv = iv[src][:, None] + dv[None, :]
    n_off = len(du)
    ent_z = np.broadcast_to(zf[src][:, None], pu.shape)
    ent_seq = (src[:, None] * n_off + np.arange(n_off)[None, :]).astype(np.uint64)
    inb = (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    lin = (pv * W + pu)[inb]
    ent_z = ent_z[inb]
    ent_seq = ent_seq[inb]
    passing = ent_z <= depth_flat[lin] * limit_scale
    lin, ent_z, ent_seq = lin[passing], ent_z[passing], ent_seq[passing]

    keys = (ent_z.view(np.uint32).astype(np.uint64) << np.uint64(32)) | ent_seq
    buf = np.full(W * H, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    if len(lin):
        order = np.argsort(keys, kind="stable")
        buf[lin[order][::-1]] = keys[order][::-1]
    hit = np.flatnonzero(buf != np.uint64(0xFFFFFFFFFFFFFFFF))
    win_entry = (buf[hit] & np.uint64(0xFFFFFFFF)).astype(np.int64)
    win_mask = mask_ids[win_entry // n_off] if len(hit) else np.empty(0, np.int64)

    pixels: list[np.ndarray] = [np.empty(0, np.int64) for _ in range(M)]
    if len(hit):
        order = np.argsort(win_mask, kind="stable")
        sorted_masks = win_mask[order]
        sorted_pix = hit[order]
        starts = np.searchsorted(sorted_masks, np.arange(M))
        ends = np.searchsorted(sorted_masks, np.arange(M), side="right")
        for k in range(M):
            pixels[k] = sorted_pix[starts[k]:ends[k]]

    boxes = []
    for pix in pixels:
        if len(pix) == 0:
            boxes.append(None)
        else:
            us, vs = pix % W, pix // W
            boxes.append((int(us.min()), int(vs.min()), int(us.max()), int(vs.max())))

    return Mask2PixelMap(view_id=view.view_id, width=W, height=H, pixels=pixels,
                         visible_counts=visible_counts, boxes=boxes)


def build_mask2pixel_all(cloud, masks, views, depth_tol=DEFAULT_DEPTH_TOL,
                         splat_radius_px=1) -> dict[int, Mask2PixelMap]:
    return {v.view_id: build_mask2pixel(cloud, masks, v, depth_tol, splat_radius_px)
            for v in views}


def point_to_mask(masks: MaskSet, n_points: int) -> np.ndarray:
    """Lowest containing mask id per point; M (background) where none."""
    M = len(masks)
    owner = np.full(n_points, M, dtype=np.int64)
    for k in range(M - 1, -1, -1):
        owner[masks.masks[k].point_indices] = k
    return owner


def visibility_counts(cloud: PointCloud, masks: MaskSet,
                      views: list[RenderedView]) -> np.ndarray:
    """(M, V) integer numerators of the visibility rates.

    Per view: project every cloud point to its center pixel, find the
    foremost point of each pixel (nearest depth, earliest point on ties), and
    attribute the pixel to that point's mask (lowest id when masks overlap;
    background otherwise). Entry (k, j) counts mask k's points landing on
    pixels attributed to k in view j; a point in several masks counts toward
    each containing mask.
    """
    M = len(masks)
    counts = np.zeros((M, len(views)), dtype=np.int64)
    owner_of_point = point_to_mask(masks, len(cloud))
    for j, view in enumerate(views):
        cam = view.camera
        W = cam.width
        winner = unpack_winner(rasterize_keys(cloud.points, cam, 0)).ravel()
        fp = np.where(winner >= 0, owner_of_point[np.clip(winner, 0, None)], -1)
        iu, iv, _, valid = center_pixels(cam, cloud.points)
        lin = iv * W + iu
        for k, m in enumerate(masks):
            pidx = m.point_indices
            ok = valid[pidx]
            if np.any(ok):
                counts[k, j] = np.count_nonzero(fp[lin[pidx[ok]]] == k)
    return counts


def occlusion_report(cloud: PointCloud, masks: MaskSet, views: list[RenderedView],
                     depth_tol: float = DEFAULT_DEPTH_TOL) -> OcclusionReport:
    """Visibility rate of every mask in every view.

    Rates are the integer visibility counts divided by each mask's point
    total. The computation is exact and does not use depth_tol; the parameter
    is kept for interface symmetry with build_mask2pixel.
    """
    if len(views) < 1:
        raise DomainError("occlusion report requires at least one view")
    totals = np.array([len(m) for m in masks], dtype=np.int64)
    if np.any(totals == 0):
        raise DomainError("mask with zero points")
    counts = visibility_counts(cloud, masks, views)
    rates = counts / totals[:, None] if len(masks) else np.zeros((0, len(views)))
    return OcclusionReport(rates=rates, total_points=totals,
                           view_ids=[v.view_id for v in views])


def top_k_views(report: OcclusionReport, mask_id: int, k: int) -> list[int]:
    """View ids sorted by descending rate for one mask; ties by ascending id."""
    V = len(report.view_ids)
    if not 1 <= k <= V:
        raise DomainError(f"k must lie in [1, {V}]")
    row = report.rates[mask_id]
    order = sorted(range(V), key=lambda j: (-row[j], report.view_ids[j]))
    return [report.view_ids[j] for j in order[:k]]


# ---------------------------------------------------------------------------
# debug exports

def save_label_image(m2p: Mask2PixelMap, path):
    Image.fromarray(m2p.label_image()).save(path, format="PNG")


def save_occlusion_csv(report: OcclusionReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask_id", "view_id", "rate"])
        for k in range(report.rates.shape[0]):
            for j, vid in enumerate(report.view_ids):
                writer.writerow([k, vid, f"{report.rates[k, j]:.10g}"])
