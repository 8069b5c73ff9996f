"""Z-buffered point splatting.

Each point with camera depth z > Z_NEAR lands on the pixel nearest its
projection; points whose center pixel falls outside the image are skipped.
A point writes its color to every pixel within splat_radius_px (Chebyshev
distance) where its depth is strictly smaller than the stored depth; depth
ties keep the earlier point in cloud order. Depth buffers are float32 with
+inf at background pixels.

Internally a view is rasterized by packing (depth bits, point index) into a
uint64 per center pixel and min-dilating that buffer over the splat
footprint; per-pixel minima of the packed keys reproduce the strict-less /
first-writer-wins semantics exactly.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera import CameraModel, SnapPlan
from .errors import DomainError, FormatError
from .scene_io import PointCloud

Z_NEAR = 1e-4
_MAXKEY = np.uint64(0xFFFFFFFFFFFFFFFF)
_LOW32 = np.uint64(0xFFFFFFFF)
_DEPTH_MAGIC = b"DPTH"


@dataclass
class RenderedView:
    rgb: np.ndarray    # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, +inf where no point was written
    camera: CameraModel
    view_id: int = 0

    @property
    def width(self):
        return self.camera.width

    @property
    def height(self):
        return self.camera.height


def center_pixels(camera: CameraModel, points: np.ndarray):
    """Integer center pixel and float32 depth per point, with validity mask.

    A point is valid when its depth exceeds Z_NEAR and its nearest pixel lies
    inside the image.
    """
    u, v, z = camera.project(points)
    iu = np.floor(u + 0.5).astype(np.int64)
    iv = np.floor(v + 0.5).astype(np.int64)
    valid = (z > Z_NEAR) & (iu >= 0) & (iu < camera.width) & (iv >= 0) & (iv < camera.height)
    return iu, iv, z.astype(np.float32), valid


def _scatter_keys(lin, keys, size):
    """Per-pixel minimum of packed keys via stable sort + reversed write."""
    buf = np.full(size, _MAXKEY, dtype=np.uint64)
    if len(lin):
        order = np.argsort(keys, kind="stable")
        buf[lin[order][::-1]] = keys[order][::-1]
    return buf


def _dilate_min(buf: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return buf
    h, w = buf.shape
    out = buf.copy()
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            if du == 0 and dv == 0:
                continue
            src = buf[max(0, -dv):h - max(0, dv), max(0, -du):w - max(0, du)]
            dst = out[max(0, dv):h - max(0, -dv), max(0, du):w - max(0, -du)]
            np.minimum(dst, src, out=dst)
    return out


def rasterize_keys(points: np.ndarray, camera: CameraModel, splat_radius_px: int) -> np.ndarray:
    """(H, W) uint64 buffer of min (depth_bits << 32 | point_index) per pixel."""
    if splat_radius_px < 0:
        raise DomainError("splat_radius_px must be >= 0")
    iu, iv, zf, valid = center_pixels(camera, points)
    idx = np.nonzero(valid)[0]
    keys = (zf[idx].view(np.uint32).astype(np.uint64) << np.uint64(32)) | idx.astype(np.uint64)
    lin = iv[idx] * camera.width + iu[idx]
    buf = _scatter_keys(lin, keys, camera.width * camera.height)
    return _dilate_min(buf.reshape(camera.height, camera.width), splat_radius_px)


def unpack_depth(keybuf: np.ndarray) -> np.ndarray:
    depth = np.full(keybuf.shape, np.inf, dtype=np.float32)
    hit = keybuf != _MAXKEY
    depth[hit] = (keybuf[hit] >> np.uint64(32)).astype(np.uint32).view(np.float32)
    return depth


def unpack_winner(keybuf: np.ndarray) -> np.ndarray:
    """Point index per pixel, -1 where empty."""
    winner = np.full(keybuf.shape, -1, dtype=np.int64)
    hit = keybuf != _MAXKEY
    winner[hit] = (keybuf[hit] & _LOW32).astype(np.int64)
    return winner


def render(cloud: PointCloud, camera: CameraModel, splat_radius_px: int = 1,
           background=(255, 255, 255), view_id: int = 0) -> RenderedView:
    keybuf = rasterize_keys(cloud.points, camera, splat_radius_px)
    winner = unpack_winner(keybuf)
    rgb = np.empty((camera.height, camera.width, 3), dtype=np.uint8)
    rgb[:] = np.asarray(background, dtype=np.uint8)
    hit = winner >= 0
    rgb[hit] = cloud.colors[winner[hit]]
    return RenderedView(rgb=rgb, depth=unpack_depth(keybuf), camera=camera, view_id=view_id)


def render_all(cloud: PointCloud, plan: SnapPlan, splat_radius_px: int = 1,
               background=(255, 255, 255), workers: int = 1) -> list[RenderedView]:
    """Render every camera in the plan; view ids are plan indices."""
    def job(i):
        return render(cloud, plan.cameras[i], splat_radius_px, background, view_id=i)

    if workers <= 1 or len(plan) <= 1:
        return [job(i) for i in range(len(plan))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(len(plan))))


# ---------------------------------------------------------------------------
# on-disk formats

def save_image(view: RenderedView, path):
    Image.fromarray(view.rgb, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_depth(depth: np.ndarray, path):
    """Raw little-endian float32 grid with a 16-byte header."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != _DEPTH_MAGIC:
            raise FormatError("not a depth grid (bad magic)", path=path, offset=0)
        w, h, _ = struct.unpack("<III", head[4:])
        raw = fh.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise FormatError(f"truncated depth grid ({len(raw)} of {4 * w * h} bytes)",
                              path=path, offset=16 + len(raw))
        return np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
