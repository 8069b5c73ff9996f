"""End-to-end orchestration of the snap / lookup / eval stages.

The CLI is a thin wrapper over these functions; tests drive them directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as me
from .camera import CameraModel, SnapPlan, calibrate_plan, plan_snaps
from .config import PipelineConfig
from .detector import (DetectionRequest, FileProvider, HttpProvider, OracleProvider,
                       build_clt, query_detector)
from .errors import ConfigError, DomainError, TransportError
from .lookup import (final_refinement, global_lookup, local_enforced_lookup,
                     save_labeled)
from .mask_filter import filter_flags
from .projection import (build_mask2pixel_all, occlusion_report, save_label_image,
                         save_occlusion_csv)
from .render import (RenderedView, load_depth, load_image, render_all, save_depth,
                     save_image)
from .scene_io import (MaskSet, PointCloud, compute_bounds, crop_top, load_mask_set,
                       load_point_cloud, remap_masks, surviving_mask_ids)
from .synthetic import load_labels

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    input_masks: int = 0
    filtered_out: int = 0
    global_labeled: int = 0
    local_labeled: int = 0
    dropped: int = 0
    views: int = 0
    provider: str = ""
    provider_requests: int = 0
    notes: list = field(default_factory=list)

    def balanced(self) -> bool:
        return self.input_masks == (self.filtered_out + self.global_labeled
                                    + self.local_labeled + self.dropped)

    def to_dict(self):
        return {
            "input_masks": self.input_masks, "filtered_out": self.filtered_out,
            "global_labeled": self.global_labeled, "local_labeled": self.local_labeled,
            "dropped": self.dropped, "views": self.views, "provider": self.provider,
            "provider_requests": self.provider_requests, "notes": self.notes,
        }


def prepared_scene(cloud: PointCloud, masks: MaskSet, config: PipelineConfig):
    """Apply the configured top crop.

    Returns (cloud, masks, original mask ids, point remap or None).
    """
    masks.validate_against(cloud)
    ids = list(range(len(masks)))
    remap = None
    if config.scene.crop_margin is not None:
        bounds = compute_bounds(cloud, config.scene.up_axis)
        cloud, cropped, remap = crop_top(cloud, masks, bounds, config.scene.crop_margin)
        ids = surviving_mask_ids(masks, remap)
        masks = cropped
    return cloud, masks, ids, remap


def make_plan(cloud: PointCloud, config: PipelineConfig) -> SnapPlan:
    bounds = compute_bounds(cloud, config.scene.up_axis)
    plan = plan_snaps(bounds, config.snap)
    return calibrate_plan(plan, cloud.points, bounds, config.snap)


def run_snap(config: PipelineConfig, scene_path, out_dir,
             masks_path=None) -> list[RenderedView]:
    """Render the planned views and persist PNG + depth + camera per view."""
    cloud = load_point_cloud(scene_path)
    masks = load_mask_set(masks_path) if masks_path else MaskSet()
    cloud, _, _, _ = prepared_scene(cloud, masks, config)
    plan = make_plan(cloud, config)
    views = render_all(cloud, plan, config.snap.splat_radius_px, config.snap.background,
                       workers=config.runtime.workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for view in views:
        stem = out / f"view_{view.view_id:03d}"
        save_image(view, stem.with_suffix(".png"))
        save_depth(view.depth, stem.with_suffix(".dpth"))
        view.camera.save(stem.with_suffix(".camera.json"))
    with open(out / "snap_manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"view_ids": [v.view_id for v in views],
                   "scales": plan.scales}, fh, indent=1)
    return views


def load_views_dir(directory) -> list[RenderedView]:
    """Load posed external views (PNG + depth grid + camera JSON per view).

    Views missing their depth map are excluded with a warning; an image whose
    size disagrees with its camera is a configuration error.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"views directory {directory} does not exist")
    views = []
    for cam_path in sorted(directory.glob("view_*.camera.json")):
        stem = cam_path.name[:-len(".camera.json")]
        view_id = int(stem.split("_")[1])
        png = directory / f"{stem}.png"
        dpth = directory / f"{stem}.dpth"
        if not png.is_file():
            log.warning("view %s lacks an image; excluded", stem)
            continue
        if not dpth.is_file():
            log.warning("view %s lacks a depth map; excluded", stem)
            continue
        camera = CameraModel.load(cam_path)
        rgb = load_image(png)
        if rgb.shape[:2] != (camera.height, camera.width):
            raise ConfigError(
                f"{png}: image is {rgb.shape[1]}x{rgb.shape[0]} but camera says "
                f"{camera.width}x{camera.height}")
        depth = load_depth(dpth)
        if depth.shape != (camera.height, camera.width):
            raise ConfigError(f"{dpth}: depth grid does not match camera size")
        views.append(RenderedView(rgb=rgb, depth=depth, camera=camera, view_id=view_id))
    if not views:
        raise ConfigError(f"no usable views in {directory}")
    return views


def _build_provider(config: PipelineConfig, cloud, views, remap=None,
                    provider_override=None, endpoint=None):
    kind = provider_override or config.detector.provider
    # file/http providers validate detections against the actual view size
    W, H = views[0].camera.width, views[0].camera.height
    if kind == "oracle":
        if not config.detector.gt_masks or not config.detector.gt_labels:
            raise ConfigError("oracle provider needs detector.gt_masks and detector.gt_labels")
        gt = load_mask_set(config.detector.gt_masks)
        labels, vocab = load_labels(config.detector.gt_labels)
        if remap is not None:
            # ground truth indexes the original cloud; apply the same crop
            kept = surviving_mask_ids(gt, remap)
            labels = [labels[i] for i in kept]
            gt = remap_masks(gt, remap)
        provider = OracleProvider.from_scene(cloud, gt, labels, views,
                                             config.projection.depth_tol,
                                             config.snap.splat_radius_px)
        return provider, vocab
    if kind == "file":
        if not config.detector.fixtures_dir:
            raise ConfigError("file provider needs detector.fixtures_dir")
        return FileProvider(config.detector.fixtures_dir, W, H), list(config.detector.vocabulary)
    if kind == "http":
        ep = endpoint or config.detector.endpoint
        if not ep:
            raise ConfigError("http provider needs an endpoint")
        return (HttpProvider(ep, W, H, timeout=config.detector.timeout),
                list(config.detector.vocabulary))
    raise ConfigError(f"unknown provider {kind!r}")


def run_lookup(config: PipelineConfig, scene_path, masks_path, out_path=None,
               views=None, provider=None, vocabulary=None, provider_override=None,
               endpoint=None):
    """Label a mask set; returns (labeled instances, report).

    views: pre-rendered views (posed-image mode); rendered in-process when
    omitted. provider/vocabulary: pass explicit objects to bypass config
    resolution (tests use this).
    """
    cloud = load_point_cloud(scene_path)
    masks = load_mask_set(masks_path)
    cloud, masks, original_ids, remap = prepared_scene(cloud, masks, config)

    report = RunReport(input_masks=len(masks))

    if views is None:
        if config.posed.images_dir:
            views = load_views_dir(config.posed.images_dir)
        else:
            plan = make_plan(cloud, config)
            views = render_all(cloud, plan, config.snap.splat_radius_px,
                               config.snap.background, workers=config.runtime.workers)
    report.views = len(views)

    if provider is None:
        provider, cfg_vocab = _build_provider(config, cloud, views, remap,
                                              provider_override, endpoint)
        if vocabulary is None:
            vocabulary = cfg_vocab
    if config.detector.vocabulary and vocabulary is None:
        vocabulary = list(config.detector.vocabulary)
    if not vocabulary:
        raise ConfigError("no vocabulary: set detector.vocabulary or pass --vocab")
    report.provider = getattr(provider, "name", type(provider).__name__)

    flags = filter_flags(masks, config.filter)
    kept = MaskSet([m for m, f in zip(masks, flags) if f], source=masks.source)
    kept_ids = [i for i, f in zip(original_ids, flags) if f]
    report.filtered_out = len(masks) - len(kept)

    maps = build_mask2pixel_all(cloud, kept, views, config.projection.depth_tol,
                                config.snap.splat_radius_px)

    attach_images = getattr(provider, "needs_images", False)
    requests = []
    for v in views:
        image_bytes = _encode_view_png(v) if attach_images else None
        requests.append(DetectionRequest(vocabulary=vocabulary, view_id=v.view_id,
                                         image_bytes=image_bytes))
    report.provider_requests = len(requests)
    detections = query_detector(provider, requests, retries=config.detector.retries)
    clt = build_clt(detections, vocabulary, valid_views=[v.view_id for v in views])

    labeled_global, leftovers = global_lookup(maps, clt, kept, config.lookup)
    report.global_labeled = len(labeled_global)

    labeled_local = []
    if leftovers and len(kept):
        rep = occlusion_report(cloud, kept, views, config.projection.depth_tol)
        lel_stats = {}
        labeled_local = local_enforced_lookup(leftovers, rep, maps, views, provider,
                                              vocabulary, config.lookup,
                                              retries=config.detector.retries,
                                              stats=lel_stats)
        report.provider_requests += lel_stats.get("crop_requests", 0)
        if lel_stats.get("crop_failures"):
            report.notes.append(f"{lel_stats['crop_failures']} crop queries failed")
    report.local_labeled = len(labeled_local)
    report.dropped = report.input_masks - report.filtered_out - len(labeled_global) \
        - len(labeled_local)

    final = final_refinement(kept, labeled_global + labeled_local)
    # surface original mask ids in the output
    for lm in final:
        lm.mask_id = kept_ids[lm.mask_id]

    if out_path is not None:
        save_labeled(final, out_path)
        with open(str(out_path) + ".report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1)
    return final, report


def _encode_view_png(view: RenderedView) -> bytes:
    import io

    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(view.rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def run_render_debug(config: PipelineConfig, scene_path, masks_path, out_dir):
    """Export per-view mask-ownership PNGs and the occlusion CSV."""
    cloud = load_point_cloud(scene_path)
    masks = load_mask_set(masks_path)
    cloud, masks, _, _ = prepared_scene(cloud, masks, config)
    plan = make_plan(cloud, config)
    views = render_all(cloud, plan, config.snap.splat_radius_px, config.snap.background,
                       workers=config.runtime.workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = build_mask2pixel_all(cloud, masks, views, config.projection.depth_tol,
                                config.snap.splat_radius_px)
    for vid, m2p in maps.items():
        save_label_image(m2p, out / f"labels_{vid:03d}.png")
    rep = occlusion_report(cloud, masks, views, config.projection.depth_tol)
    save_occlusion_csv(rep, out / "occlusion.csv")
    return out


def run_eval(config: PipelineConfig, predictions_path=None, gt_masks_path=None,
             gt_labels_path=None, scene_path=None, out_path=None):
    """Score a labeled-instance file against ground truth."""
    from .lookup import load_labeled

    predictions_path = predictions_path or config.eval.predictions
    gt_masks_path = gt_masks_path or config.eval.gt_masks
    gt_labels_path = gt_labels_path or config.eval.gt_labels
    scene_path = scene_path or config.eval.scene
    for name, p in (("predictions", predictions_path), ("gt_masks", gt_masks_path),
                    ("gt_labels", gt_labels_path)):
        if not p:
            raise ConfigError(f"eval needs a {name} path")
        if not Path(p).is_file():
            raise ConfigError(f"{name} file {p} does not exist")

    labeled = load_labeled(predictions_path)
    gt_masks = load_mask_set(gt_masks_path)
    gt_labels, _ = load_labels(gt_labels_path)
    if len(gt_labels) != len(gt_masks):
        raise ConfigError("gt labels and gt masks disagree in length")

    pred_mask_path = config.eval.pred_masks or gt_masks_path
    pred_masks = gt_masks if pred_mask_path == gt_masks_path else load_mask_set(pred_mask_path)

    gts = [me.GroundTruthInstance(m, lab) for m, lab in zip(gt_masks, gt_labels)]
    preds = []
    for lm in labeled:
        if lm.mask_id >= len(pred_masks):
            raise ConfigError(f"prediction references mask {lm.mask_id} outside the mask file "
                              f"{pred_mask_path}")
        preds.append(me.PredictedInstance(pred_masks.masks[lm.mask_id], lm.label,
                                          lm.probability))
    result = me.instance_ap(preds, gts)

    box_result = None
    if config.eval.detection_boxes:
        if scene_path and Path(scene_path).is_file():
            cloud = load_point_cloud(scene_path)
            pred_boxes = [(me.to_aabb(p.mask, cloud), p.label, p.probability) for p in preds]
            gt_boxes = [(me.to_aabb(g.mask, cloud), g.label) for g in gts]
            box_result = me.detection_ap25(pred_boxes, gt_boxes)
        elif scene_path:
            raise ConfigError(f"scene file {scene_path} does not exist")

    recog = None
    if config.eval.recognition:
        recog = me.recognition_top1(gt_labels, {lm.mask_id: lm.label for lm in labeled})

    if out_path is not None:
        me.save_metrics_csv(result, out_path)
        if box_result is not None:
            me.save_metrics_csv(box_result, str(out_path) + ".boxes.csv")
        if recog is not None:
            me.save_recognition_csv(recog, str(out_path) + ".recognition.csv")
    return result, box_result, recog
