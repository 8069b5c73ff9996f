"""Synthetic room scenes for tests and demos.

A scene is a rectangular floor, four low walls, and a configurable number of
surface-sampled cuboids and cylinders standing on the floor. Every object
contributes one ground-truth mask and a category label; floor and walls are
background. Generation is fully driven by one integer seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .scene_io import InstanceMask, MaskSet, PointCloud

LABEL_PALETTE = [
    "chair", "table", "sofa", "bed", "cabinet", "desk", "shelf", "lamp",
    "monitor", "plant", "box", "stool", "dresser", "bin", "pillar", "crate",
]


@dataclass
class SyntheticScene:
    cloud: PointCloud
    gt_masks: MaskSet
    labels: list[str]
    vocabulary: list[str]


def _sample_box_surface(rng, center, size, density):
    """Uniform points on the 6 faces of an axis-aligned cuboid."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    counts = np.maximum(1, np.round(areas * density)).astype(int)
    pts = []
    for face, n in enumerate(counts):
        a = rng.uniform(-0.5, 0.5, (n, 2))
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        p = np.zeros((n, 3))
        others = [i for i in range(3) if i != axis]
        p[:, axis] = 0.5 * sign
        p[:, others[0]] = a[:, 0]
        p[:, others[1]] = a[:, 1]
        pts.append(p)
    pts = np.concatenate(pts) * np.asarray(size)
    return pts + np.asarray(center)


def _sample_cylinder_surface(rng, center, radius, height, density):
    """Uniform points on the side and top cap of a vertical cylinder."""
    side_area = 2 * np.pi * radius * height
    top_area = np.pi * radius ** 2
    n_side = max(1, int(round(side_area * density)))
    n_top = max(1, int(round(top_area * density)))
    ang = rng.uniform(0, 2 * np.pi, n_side)
    z = rng.uniform(0, height, n_side)
    side = np.stack([radius * np.cos(ang), radius * np.sin(ang), z], axis=1)
    ang = rng.uniform(0, 2 * np.pi, n_top)
    r = radius * np.sqrt(rng.uniform(0, 1, n_top))
    top = np.stack([r * np.cos(ang), r * np.sin(ang), np.full(n_top, height)], axis=1)
    pts = np.concatenate([side, top])
    return pts + np.asarray([center[0], center[1], center[2]])


def _object_color(rng, index, total):
    """Distinct saturated colors, hue-spread with a little jitter."""
    hue = (index / max(total, 1) + rng.uniform(0, 0.02)) % 1.0
    i = int(hue * 6)
    f = hue * 6 - i
    v, p, q, t = 1.0, 0.15, 1.0 - 0.85 * f, 0.15 + 0.85 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array([int(c * 255) for c in rgb], dtype=np.uint8)


def generate_scene(seed: int, n_objects: int = 10, noise: float = 0.005,
                   room_size: float | None = None, density: float = 450.0,
                   floor_density: float = 70.0, wall_height: float = 0.4) -> SyntheticScene:
    """Build a deterministic room scene with labeled objects.

    density is points per square meter of object surface; noise is the std
    of positional jitter in meters.
    """
    if n_objects < 0:
        raise DomainError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    room = room_size if room_size is not None else rng.uniform(7.0, 9.0)

    chunks, colors, mask_ranges, labels = [], [], [], []

    n_floor = max(4, int(room * room * floor_density))
    floor = np.stack([rng.uniform(0, room, n_floor), rng.uniform(0, room, n_floor),
                      np.zeros(n_floor)], axis=1)
    chunks.append(floor)
    colors.append(np.tile(np.array([205, 205, 205], np.uint8), (n_floor, 1)))

    n_wall = max(4, int(room * wall_height * floor_density))
    for side in range(4):
        t = rng.uniform(0, room, n_wall)
        h = rng.uniform(0, wall_height, n_wall)
        if side == 0:
            w = np.stack([t, np.zeros(n_wall), h], axis=1)
        elif side == 1:
            w = np.stack([t, np.full(n_wall, room), h], axis=1)
        elif side == 2:
            w = np.stack([np.zeros(n_wall), t, h], axis=1)
        else:
            w = np.stack([np.full(n_wall, room), t, h], axis=1)
        chunks.append(w)
        colors.append(np.tile(np.array([170, 170, 170], np.uint8), (n_wall, 1)))

    # non-overlapping placements away from the walls
    margin = 1.0
    placements = []
    for k in range(n_objects):
        for _ in range(200):
            cx, cy = rng.uniform(margin, room - margin, 2)
            radius = rng.uniform(0.3, 0.55)
            if all(np.hypot(cx - px, cy - py) > radius + pr + 0.3
                   for px, py, pr in placements):
                placements.append((cx, cy, radius))
                break
        else:
            raise DomainError(f"could not place object {k}; lower n_objects or grow the room")

    offset = sum(len(c) for c in chunks)
    for k, (cx, cy, radius) in enumerate(placements):
        height = rng.uniform(0.4, 1.2)
        if rng.random() < 0.5:
            size = (2 * radius * rng.uniform(0.7, 1.0), 2 * radius * rng.uniform(0.7, 1.0),
                    height)
            pts = _sample_box_surface(rng, (cx, cy, height / 2), size, density)
        else:
            pts = _sample_cylinder_surface(rng, (cx, cy, 0.0), radius * rng.uniform(0.7, 1.0),
                                           height, density)
        chunks.append(pts)
        colors.append(np.tile(_object_color(rng, k, n_objects), (len(pts), 1)))
        mask_ranges.append((offset, offset + len(pts)))
        labels.append(LABEL_PALETTE[k % len(LABEL_PALETTE)])
        offset += len(pts)

    points = np.concatenate(chunks)
    if noise > 0:
        points = points + rng.normal(0, noise, points.shape)
    cloud = PointCloud(points, np.concatenate(colors))
    masks = MaskSet([InstanceMask(np.arange(a, b, dtype=np.int64)) for a, b in mask_ranges],
                    source=f"synthetic(seed={seed})")
    vocabulary = sorted(set(labels)) if labels else list(LABEL_PALETTE[:4])
    return SyntheticScene(cloud, masks, labels, vocabulary)


def write_scene(scene: SyntheticScene, out_dir) -> dict:
    """Write scene.ply, gt_masks.jsonl, labels.json into out_dir."""
    from .scene_io import save_mask_set, save_point_cloud
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "scene": out / "scene.ply",
        "masks": out / "gt_masks.jsonl",
        "labels": out / "labels.json",
    }
    save_point_cloud(scene.cloud, paths["scene"])
    save_mask_set(scene.gt_masks, paths["masks"])
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        json.dump({"labels": scene.labels, "vocabulary": scene.vocabulary}, fh, indent=1)
    return {k: str(v) for k, v in paths.items()}


def load_labels(path) -> tuple[list[str], list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return list(data["labels"]), list(data.get("vocabulary", sorted(set(data["labels"]))))
