"""Detection wire protocol, class lookup table, and built-in providers.

The engine talks to 2D open-vocabulary detectors through one JSON protocol:

request  ``{"image_b64": ... | "image_path": ..., "vocabulary": [...],
           "crop": [x0, y0, x1, y1]?, "view_id": n?}``
response ``{"detections": [{"label": ..., "confidence": ...,
           "rle": {"size": [H, W], "counts": [...]}} | {..., "box": [...]}]}``

Masks travel as uncompressed run-length counts over row-major pixels,
alternating background/foreground runs and starting with the background run
(possibly 0). Boxes and crops are inclusive pixel boxes in full-image
coordinates; providers answering a crop request translate back to full-image
coordinates themselves.

Three providers ship with the engine: an HTTP client, a file-batch provider
replaying one response JSON per view (``view_{id}.json``), and an oracle that
converts ground-truth mask footprints into perfect detections for tests.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests as _requests

from .errors import DomainError, ProtocolError, TransportError
from .projection import Mask2PixelMap

log = logging.getLogger(__name__)

MASK_REGION = "mask"
BOX_REGION = "box"


# ---------------------------------------------------------------------------
# run-length encoding (row-major)

def rle_encode(pixels: np.ndarray, width: int, height: int) -> dict:
    """Encode sorted linear pixel indices as alternating background/foreground runs."""
    flat = np.zeros(width * height, dtype=bool)
    flat[pixels] = True
    n = flat.size
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [n]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [height, width], "counts": counts}


def rle_decode(rle: dict, width: int, height: int) -> np.ndarray:
    """Sorted linear pixel indices of the foreground."""
    size = rle.get("size")
    if size is None or list(size) != [height, width]:
        raise ProtocolError.from_payload(
            f"rle size {size} does not match image {height}x{width}", rle)
    counts = rle.get("counts")
    if not isinstance(counts, list) or any((not isinstance(c, int)) or c < 0 for c in counts):
        raise ProtocolError.from_payload("rle counts must be non-negative integers", rle)
    if sum(counts) != width * height:
        raise ProtocolError.from_payload(
            f"rle counts sum {sum(counts)} != {width * height}", rle)
    edges = np.cumsum([0] + counts)
    spans = [(edges[i], edges[i + 1]) for i in range(1, len(counts), 2)]
    if not spans:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([np.arange(a, b, dtype=np.int64) for a, b in spans])


# ---------------------------------------------------------------------------
# protocol types

@dataclass
class Detection:
    label: str
    confidence: float
    view_id: int
    region_kind: str                      # MASK_REGION or BOX_REGION
    pixels: np.ndarray | None = None      # sorted linear indices (mask regions)
    box: tuple | None = None              # (x0, y0, x1, y1) inclusive (box regions)
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if not self.label:
            raise ProtocolError("detection label must be non-empty")
        if not 0 <= self.confidence <= 1:
            raise ProtocolError(f"confidence {self.confidence} outside [0, 1]")
        if self.region_kind == MASK_REGION:
            if self.pixels is None or len(self.pixels) == 0:
                raise ProtocolError("mask region must be non-empty")
            if self.pixels[-1] >= self.width * self.height or self.pixels[0] < 0:
                raise ProtocolError("mask region exceeds image bounds")
        elif self.region_kind == BOX_REGION:
            x0, y0, x1, y1 = self.box
            if not (0 <= x0 <= x1 < self.width and 0 <= y0 <= y1 < self.height):
                raise ProtocolError(f"box {self.box} outside {self.width}x{self.height} image")
        else:
            raise ProtocolError(f"unknown region kind {self.region_kind!r}")

    def tight_box(self) -> tuple:
        if self.region_kind == BOX_REGION:
            return self.box
        us, vs = self.pixels % self.width, self.pixels // self.width
        return (int(us.min()), int(vs.min()), int(us.max()), int(vs.max()))

    def clipped_to(self, crop: tuple) -> "Detection | None":
        """Restrict the region to a crop box (full-image coordinates)."""
        x0, y0, x1, y1 = crop
        if self.region_kind == BOX_REGION:
            nx0, ny0 = max(self.box[0], x0), max(self.box[1], y0)
            nx1, ny1 = min(self.box[2], x1), min(self.box[3], y1)
            if nx0 > nx1 or ny0 > ny1:
                return None
            return Detection(self.label, self.confidence, self.view_id, BOX_REGION,
                             box=(nx0, ny0, nx1, ny1), width=self.width, height=self.height)
        us, vs = self.pixels % self.width, self.pixels // self.width
        keep = (us >= x0) & (us <= x1) & (vs >= y0) & (vs <= y1)
        if not np.any(keep):
            return None
        return Detection(self.label, self.confidence, self.view_id, MASK_REGION,
                         pixels=self.pixels[keep], width=self.width, height=self.height)


@dataclass
class DetectionRequest:
    vocabulary: list[str]
    view_id: int
    image_path: str | None = None
    image_bytes: bytes | None = None
    crop: tuple | None = None

    def __post_init__(self):
        if not self.vocabulary:
            raise DomainError("detection request requires a non-empty vocabulary")


@dataclass
class ClassLookupTable:
    by_view: dict[int, list[Detection]] = field(default_factory=dict)
    vocabulary: list[str] = field(default_factory=list)

    def get(self, view_id: int) -> list[Detection]:
        return self.by_view.get(view_id, [])

    def __len__(self):
        return sum(len(v) for v in self.by_view.values())


# ---------------------------------------------------------------------------
# wire serialization

def request_to_wire(req: DetectionRequest) -> dict:
    body: dict = {"vocabulary": list(req.vocabulary), "view_id": req.view_id}
    if req.image_bytes is not None:
        body["image_b64"] = base64.b64encode(req.image_bytes).decode("ascii")
    elif req.image_path is not None:
        body["image_path"] = str(req.image_path)
    if req.crop is not None:
        body["crop"] = [int(c) for c in req.crop]
    return body


def parse_request(body: dict) -> DetectionRequest:
    if "vocabulary" not in body or not body["vocabulary"]:
        raise ProtocolError.from_payload("request lacks a vocabulary", body)
    image_bytes = None
    if "image_b64" in body:
        try:
            image_bytes = base64.b64decode(body["image_b64"])
        except Exception as exc:
            raise ProtocolError.from_payload(f"bad image_b64: {exc}", body) from exc
    crop = tuple(body["crop"]) if "crop" in body else None
    return DetectionRequest(
        vocabulary=list(body["vocabulary"]),
        view_id=int(body.get("view_id", -1)),
        image_path=body.get("image_path"),
        image_bytes=image_bytes,
        crop=crop,
    )


def detection_to_wire(det: Detection) -> dict:
    body: dict = {"label": det.label, "confidence": det.confidence}
    if det.region_kind == MASK_REGION:
        body["rle"] = rle_encode(det.pixels, det.width, det.height)
    else:
        body["box"] = [int(c) for c in det.box]
    return body


def parse_detection(body: dict, width: int, height: int, view_id: int) -> Detection:
    if not isinstance(body, dict):
        raise ProtocolError.from_payload("detection must be an object", body)
    for key in ("label", "confidence"):
        if key not in body:
            raise ProtocolError.from_payload(f"detection lacks {key!r}", body)
    if "rle" in body:
        pixels = rle_decode(body["rle"], width, height)
        if len(pixels) == 0:
            raise ProtocolError.from_payload("mask region is empty", body)
        return Detection(str(body["label"]), float(body["confidence"]), view_id,
                         MASK_REGION, pixels=pixels, width=width, height=height)
    if "box" in body:
        box = body["box"]
        if not isinstance(box, list) or len(box) != 4:
            raise ProtocolError.from_payload("box must be [x0, y0, x1, y1]", body)
        return Detection(str(body["label"]), float(body["confidence"]), view_id,
                         BOX_REGION, box=tuple(int(c) for c in box), width=width, height=height)
    raise ProtocolError.from_payload("detection carries neither 'rle' nor 'box'", body)


def parse_detection_payload(payload: dict, width: int, height: int, view_id: int) -> list[Detection]:
    """Validate a full provider response; the file provider, the HTTP client,
    and external adapters are all held to this same check."""
    if not isinstance(payload, dict) or "detections" not in payload:
        raise ProtocolError.from_payload("response lacks 'detections'", payload)
    if not isinstance(payload["detections"], list):
        raise ProtocolError.from_payload("'detections' must be a list", payload)
    return [parse_detection(d, width, height, view_id) for d in payload["detections"]]


# ---------------------------------------------------------------------------
# providers

class OracleProvider:
    """Perfect detector for tests: replays ground-truth mask footprints.

    Built from the Mask2Pixel maps of a labeled mask set; every non-empty
    footprint in a view becomes a detection with confidence 1.0. Crop
    requests return the footprints clipped to the crop.
    """

    name = "oracle"

    def __init__(self, maps: dict[int, Mask2PixelMap], labels: list[str]):
        self.maps = maps
        self.labels = labels

    @classmethod
    def from_scene(cls, cloud, gt_masks, labels, views, depth_tol=1e-2, splat_radius_px=1):
        from .projection import build_mask2pixel_all
        if len(labels) != len(gt_masks):
            raise DomainError("one label per ground-truth mask required")
        return cls(build_mask2pixel_all(cloud, gt_masks, views, depth_tol, splat_radius_px),
                   list(labels))

    def query(self, reqs: list[DetectionRequest]) -> list[Detection]:
        out = []
        for req in reqs:
            m2p = self.maps.get(req.view_id)
            if m2p is None:
                raise TransportError(f"oracle has no view {req.view_id}")
            for k, pix in enumerate(m2p.pixels):
                if len(pix) == 0:
                    continue
                det = Detection(self.labels[k], 1.0, req.view_id, MASK_REGION,
                                pixels=pix, width=m2p.width, height=m2p.height)
                if req.crop is not None:
                    det = det.clipped_to(req.crop)
                if det is not None:
                    out.append(det)
        return out


class FileProvider:
    """Replays pre-computed responses, one ``view_{id}.json`` per view."""

    name = "file"

    def __init__(self, directory, width: int, height: int):
        self.directory = Path(directory)
        self.width = width
        self.height = height
        if not self.directory.is_dir():
            raise TransportError(f"fixture directory {self.directory} does not exist")

    def query(self, reqs: list[DetectionRequest]) -> list[Detection]:
        out = []
        for req in reqs:
            path = self.directory / f"view_{req.view_id}.json"
            if not path.is_file():
                raise TransportError(f"no fixture response at {path}")
            with open(path, "r", encoding="utf-8") as fh:
                try:
                    payload = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ProtocolError.from_payload(f"bad fixture JSON: {exc}", str(path)) from exc
            dets = parse_detection_payload(payload, self.width, self.height, req.view_id)
            if req.crop is not None:
                dets = [d for d in (det.clipped_to(req.crop) for det in dets) if d is not None]
            out.extend(dets)
        return out


class HttpProvider:
    """POSTs protocol requests to a detector service endpoint."""

    name = "http"
    needs_images = True

    def __init__(self, endpoint: str, width: int, height: int, timeout: float = 60.0,
                 session=None):
        self.endpoint = endpoint
        self.width = width
        self.height = height
        self.timeout = timeout
        self.session = session or _requests.Session()

    def query(self, reqs: list[DetectionRequest]) -> list[Detection]:
        out = []
        for req in reqs:
            try:
                resp = self.session.post(self.endpoint, json=request_to_wire(req),
                                         timeout=self.timeout)
            except _requests.RequestException as exc:
                raise TransportError(f"detector endpoint unreachable: {exc}") from exc
            if resp.status_code != 200:
                raise TransportError(f"detector returned HTTP {resp.status_code}")
            try:
                payload = resp.json()
            except ValueError as exc:
                raise ProtocolError.from_payload(f"response is not JSON: {exc}",
                                                 resp.text) from exc
            out.extend(parse_detection_payload(payload, self.width, self.height, req.view_id))
        return out


class DegradedProvider:
    """Wraps a provider and corrupts its output deterministically.

    A fraction of detections is dropped and a fraction of the survivors is
    relabeled to a different vocabulary entry; used to probe pipeline
    robustness against imperfect detectors.
    """

    name = "degraded"

    def __init__(self, inner, vocabulary: list[str], drop_rate=0.3, relabel_rate=0.1, seed=0):
        self.inner = inner
        self.vocabulary = list(vocabulary)
        self.drop_rate = drop_rate
        self.relabel_rate = relabel_rate
        self.rng = np.random.default_rng(seed)

    def query(self, reqs):
        dets = self.inner.query(reqs)
        out = []
        for det in dets:
            if self.rng.random() < self.drop_rate:
                continue
            if self.rng.random() < self.relabel_rate and len(self.vocabulary) > 1:
                others = [w for w in self.vocabulary if w != det.label]
                det = Detection(str(self.rng.choice(others)), det.confidence, det.view_id,
                                det.region_kind, pixels=det.pixels, box=det.box,
                                width=det.width, height=det.height)
            out.append(det)
        return out


def query_detector(provider, reqs: list[DetectionRequest], retries: int = 2,
                   backoff: float = 0.1) -> list[Detection]:
    """Run requests through a provider, retrying transport failures."""
    for req in reqs:
        if not req.vocabulary:
            raise DomainError("empty vocabulary rejected before dispatch")
    attempt = 0
    while True:
        try:
            return provider.query(reqs)
        except TransportError:
            attempt += 1
            if attempt > retries:
                raise
            log.warning("transport error from %s, retry %d/%d",
                        getattr(provider, "name", "provider"), attempt, retries)
            time.sleep(backoff * attempt)


def build_clt(detections: list[Detection], vocabulary: list[str],
              valid_views=None) -> ClassLookupTable:
    """Group detections by view, each view sorted by descending confidence."""
    if valid_views is not None:
        valid = set(valid_views)
        for det in detections:
            if det.view_id not in valid:
                raise ProtocolError(f"detection references unknown view {det.view_id}")
    by_view: dict[int, list[Detection]] = {}
    for det in detections:
        by_view.setdefault(det.view_id, []).append(det)
    for vid in by_view:
        by_view[vid].sort(key=lambda d: -d.confidence)
    ordered = {vid: by_view[vid] for vid in sorted(by_view)}
    return ClassLookupTable(by_view=ordered, vocabulary=list(vocabulary))
