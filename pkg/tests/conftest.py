"""Shared scene builders and independent reference implementations.

The reference implementations here deliberately use plain per-element loops
so they stay independent of the vectorized code paths they check.
"""

import numpy as np
import pytest

from snaplabel.camera import CameraModel, calibrated_camera, lookat
from snaplabel.render import Z_NEAR
from snaplabel.scene_io import InstanceMask, MaskSet, PointCloud


def rand_cloud(rng, n, lo=0.0, hi=4.0):
    pts = rng.uniform(lo, hi, (n, 3))
    cols = rng.integers(0, 256, (n, 3)).astype(np.uint8)
    return PointCloud(pts, cols)


def rand_camera(rng, cloud, width=16, height=16, margin_px=0.0):
    """A valid camera looking at the cloud from a random outside position."""
    center = cloud.points.mean(axis=0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    spread = float(np.linalg.norm(cloud.points.max(0) - cloud.points.min(0))) + 1.0
    position = center + direction * spread * rng.uniform(1.2, 2.5)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(direction, up)) > 0.98:
        up = np.array([0.0, 1.0, 0.0])
    pose = lookat(position, center, up)
    return calibrated_camera(pose, cloud.points, width, height, margin_px)


def rand_masks(rng, n_points, n_masks, coverage=0.6, overlap=False):
    """Random masks over a cloud; disjoint by default."""
    masks = []
    if overlap:
        for _ in range(n_masks):
            size = rng.integers(1, max(2, int(n_points * coverage / n_masks) + 2))
            idx = rng.choice(n_points, size=min(size, n_points), replace=False)
            masks.append(InstanceMask(np.sort(idx)))
    else:
        perm = rng.permutation(n_points)
        usable = int(n_points * coverage)
        cuts = np.sort(rng.choice(np.arange(1, usable), size=n_masks - 1, replace=False)) \
            if n_masks > 1 else np.array([], dtype=int)
        pieces = np.split(perm[:usable], cuts)
        for piece in pieces:
            if len(piece):
                masks.append(InstanceMask(np.sort(piece)))
    return MaskSet(masks, source="random")


# ---------------------------------------------------------------------------
# reference rasterizer: O(N * splat pixels), sequential strict-less writes

def brute_force_render(cloud, camera, splat_radius_px, background):
    W, H = camera.width, camera.height
    depth = np.full((H, W), np.inf, dtype=np.float32)
    rgb = np.empty((H, W, 3), dtype=np.uint8)
    rgb[:] = np.asarray(background, dtype=np.uint8)
    R = camera.pose[:3, :3]
    t = camera.pose[:3, 3]
    for i in range(len(cloud.points)):
        pc = R @ cloud.points[i] + t
        z = pc[2]
        if z <= Z_NEAR:
            continue
        u = camera.fx * pc[0] / z + camera.cx
        v = camera.fy * pc[1] / z + camera.cy
        iu = int(np.floor(u + 0.5))
        iv = int(np.floor(v + 0.5))
        if not (0 <= iu < W and 0 <= iv < H):
            continue
        zf = np.float32(z)
        r = splat_radius_px
        for dv in range(-r, r + 1):
            for du in range(-r, r + 1):
                pu, pv = iu + du, iv + dv
                if 0 <= pu < W and 0 <= pv < H and zf < depth[pv, pu]:
                    depth[pv, pu] = zf
                    rgb[pv, pu] = cloud.colors[i]
    return rgb, depth


# ---------------------------------------------------------------------------
# literal dense occlusion computation: counts, foremost-point map, rates

def dense_occlusion(cloud, masks, cameras):
    """Per-view PC array (W x H x (M+1)), FP map, and the rate matrix.

    PC[i, j, k] counts the points of mask k landing on pixel (i, j); a point
    belonging to several masks counts in each of their slots, and the
    background slot M counts points belonging to none. FP is the mask number
    of the foremost point of each pixel (lowest containing mask id when masks
    overlap, background M when the point has no mask, -1 for empty pixels).
    """
    M = len(masks)
    owner = np.full(len(cloud), M, dtype=np.int64)  # background slot = M
    for k in range(M - 1, -1, -1):
        owner[masks.masks[k].point_indices] = k
    member = np.zeros((len(cloud), M + 1), dtype=bool)
    for k in range(M):
        member[masks.masks[k].point_indices, k] = True
    member[~member[:, :M].any(axis=1), M] = True
    totals = np.array([len(m) for m in masks], dtype=np.int64)
    counts = np.zeros((M, len(cameras)), dtype=np.int64)
    rates = np.zeros((M, len(cameras)))
    pcs, fps = [], []
    for j, cam in enumerate(cameras):
        W, H = cam.width, cam.height
        pc_arr = np.zeros((W, H, M + 1), dtype=np.int64)
        fp = np.full((W, H), -1, dtype=np.int64)
        fp_depth = np.full((W, H), np.inf, dtype=np.float32)
        R, t = cam.pose[:3, :3], cam.pose[:3, 3]
        for i in range(len(cloud.points)):
            p = R @ cloud.points[i] + t
            z = p[2]
            if z <= Z_NEAR:
                continue
            iu = int(np.floor(cam.fx * p[0] / z + cam.cx + 0.5))
            iv = int(np.floor(cam.fy * p[1] / z + cam.cy + 0.5))
            if not (0 <= iu < W and 0 <= iv < H):
                continue
            for k in range(M + 1):
                if member[i, k]:
                    pc_arr[iu, iv, k] += 1
            zf = np.float32(z)
            if zf < fp_depth[iu, iv]:
                fp_depth[iu, iv] = zf
                fp[iu, iv] = owner[i]
        for k in range(M):
            counted = 0
            for iu in range(W):
                for iv in range(H):
                    if fp[iu, iv] == k:
                        counted += pc_arr[iu, iv, k]
            counts[k, j] = counted
            rates[k, j] = counted / totals[k]
        pcs.append(pc_arr)
        fps.append(fp)
    return pcs, fps, counts, rates


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
