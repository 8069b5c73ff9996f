"""Virtual camera placement and intrinsic calibration.

Cameras follow the pinhole convention: +z forward, +x right, +y down.
A point p in world coordinates maps to the camera frame via the 4x4
world-to-camera pose, then to pixels via (fx*x/z + cx, fy*y/z + cy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .scene_io import SceneBounds

GLOBAL, CORNER, WIDE_ANGLE = "global", "corner", "wide_angle"


@dataclass
class CameraModel:
    pose: np.ndarray  # (4, 4) world-to-camera rigid transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise DomainError("pose must be a 4x4 matrix")
        R = self.pose[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise DomainError("pose rotation block must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.pose[:3, :3].T + self.pose[:3, 3]

    def project(self, points: np.ndarray):
        """Continuous pixel coordinates plus camera-frame depth: (u, v, z)."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def to_json_dict(self) -> dict:
        return {
            "pose": self.pose.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraModel":
        return cls(np.array(d["pose"], dtype=np.float64),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "CameraModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class SnapConfig:
    """View-synthesis parameters; counts follow the default 16/4/4 layout."""

    n_global: int = 16
    n_corner: int = 4
    n_wide_angle: int = 4
    width: int = 1000
    height: int = 1000
    margin_px: float = 0.0
    splat_radius_px: int = 1
    height_offset: float | None = None  # meters above scene top; None = 0.3 * scene height
    background: tuple[int, int, int] = (255, 255, 255)


@dataclass
class SnapPlan:
    cameras: list[CameraModel] = field(default_factory=list)
    scales: list[str] = field(default_factory=list)  # per camera: global|corner|wide_angle

    def __len__(self):
        return len(self.cameras)


def lookat(camera_position, target, up) -> np.ndarray:
    """4x4 world-to-camera pose with +z pointing from position to target."""
    camera_position = np.asarray(camera_position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - camera_position
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise DomainError("camera position and target coincide")
    z = fwd / norm
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-12:
        raise DomainError("up vector is parallel to the view direction")
    x = x / xn
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([x, y, z])
    pose[:3, 3] = -pose[:3, :3] @ camera_position
    return pose


def _ring_positions(center2d, radius, n, phase=0.0):
    ang = phase + 2 * math.pi * np.arange(n) / max(n, 1)
    return np.stack([center2d[0] + radius * np.cos(ang),
                     center2d[1] + radius * np.sin(ang)], axis=1)


def plan_snaps(bounds: SceneBounds, config: SnapConfig) -> SnapPlan:
    """Place cameras above the scene at three scales.

    Global: a ring of radius = half the footprint diagonal around the
    footprint center, aimed at the 3D bounds center. Corner: above the
    center, aimed at the floor-level footprint corners. Wide-angle: at the
    interior intersection points of a 3x3 footprint partition, each aimed at
    its farthest floor-level corner. All cameras sit at
    scene top + height_offset.
    """
    up = bounds.up
    a0, a1 = bounds.footprint_axes
    lo, hi = bounds.min_corner, bounds.max_corner
    center2d = np.array([bounds.center[a0], bounds.center[a1]])
    height = hi[up] - lo[up]
    offset = config.height_offset if config.height_offset is not None else 0.3 * height
    cam_h = hi[up] + offset
    up_vec = np.zeros(3)
    up_vec[up] = 1.0

    def lift(p2d, h):
        p = np.zeros(3)
        p[a0], p[a1], p[up] = p2d[0], p2d[1], h
        return p

    corners2d = np.array([[lo[a0], lo[a1]], [hi[a0], lo[a1]],
                          [hi[a0], hi[a1]], [lo[a0], hi[a1]]])
    diag = float(np.linalg.norm(corners2d[2] - corners2d[0]))
    if diag <= 0:
        raise DomainError("scene footprint has zero extent; cannot place cameras")

    plan = SnapPlan()

    target_global = bounds.center
    for p2d in _ring_positions(center2d, 0.5 * diag, config.n_global):
        pose = lookat(lift(p2d, cam_h), target_global, up_vec)
        plan.cameras.append(CameraModel(pose, 1, 1, 0, 0, config.width, config.height))
        plan.scales.append(GLOBAL)

    for i in range(config.n_corner):
        corner = lift(corners2d[i % 4], lo[up])
        pose = lookat(lift(center2d, cam_h), corner, up_vec)
        plan.cameras.append(CameraModel(pose, 1, 1, 0, 0, config.width, config.height))
        plan.scales.append(CORNER)

    grid2d = np.array([
        [lo[a0] + (hi[a0] - lo[a0]) * fi, lo[a1] + (hi[a1] - lo[a1]) * fj]
        for fi in (1 / 3, 2 / 3) for fj in (1 / 3, 2 / 3)
    ])
    for i in range(config.n_wide_angle):
        g2d = grid2d[i % 4]
        far = corners2d[np.argmax(np.linalg.norm(corners2d - g2d, axis=1))]
        pose = lookat(lift(g2d, cam_h), lift(far, lo[up]), up_vec)
        plan.cameras.append(CameraModel(pose, 1, 1, 0, 0, config.width, config.height))
        plan.scales.append(WIDE_ANGLE)

    return plan


def calibrate_intrinsics(pose: np.ndarray, points_of_interest: np.ndarray,
                         width: int, height: int, margin_px: float = 0.0):
    """Fit (fx, fy, cx, cy) so the points of interest fill the usable image area.

    A single scale is applied to both axes (fx == fy), so projected aspect
    ratio is preserved; the tighter axis touches the margins exactly and the
    other axis is centered.
    """
    pts = np.asarray(points_of_interest, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError("points_of_interest must have shape (K, 3)")
    pc = pts @ np.asarray(pose)[:3, :3].T + np.asarray(pose)[:3, 3]
    z = pc[:, 2]
    front = z > 0
    if not np.any(front):
        raise DomainError("no point of interest lies in front of the camera")
    xn = pc[front, 0] / z[front]
    yn = pc[front, 1] / z[front]
    ext_x = float(xn.max() - xn.min())
    ext_y = float(yn.max() - yn.min())
    usable_x = width - 2 * margin_px
    usable_y = height - 2 * margin_px
    if usable_x <= 0 or usable_y <= 0:
        raise DomainError("margin leaves no usable image area")
    if ext_x <= 0 and ext_y <= 0:
        raise DomainError("points of interest have zero projected extent")
    scale_x = usable_x / ext_x if ext_x > 0 else math.inf
    scale_y = usable_y / ext_y if ext_y > 0 else math.inf
    s = min(scale_x, scale_y)
    cx = margin_px + 0.5 * (usable_x - s * ext_x) - s * float(xn.min())
    cy = margin_px + 0.5 * (usable_y - s * ext_y) - s * float(yn.min())
    return s, s, cx, cy


def calibrated_camera(pose: np.ndarray, points_of_interest: np.ndarray,
                      width: int, height: int, margin_px: float = 0.0) -> CameraModel:
    fx, fy, cx, cy = calibrate_intrinsics(pose, points_of_interest, width, height, margin_px)
    return CameraModel(pose, fx, fy, cx, cy, width, height)


def calibrate_plan(plan: SnapPlan, cloud_points: np.ndarray, bounds: SceneBounds,
                   config: SnapConfig) -> SnapPlan:
    """Calibrate every planned camera against its region of interest.

    Global and corner views frame the full cloud; wide-angle views frame the
    half of the footprint the camera faces, which lets them zoom in.
    """
    a0, a1 = bounds.footprint_axes
    out = SnapPlan()
    for cam, scale in zip(plan.cameras, plan.scales):
        poi = cloud_points
        if scale == WIDE_ANGLE:
            R = cam.pose[:3, :3]
            pos = -R.T @ cam.pose[:3, 3]
            fwd = R[2]  # camera +z in world coordinates
            d2 = np.array([fwd[a0], fwd[a1]])
            n = np.linalg.norm(d2)
            if n > 1e-12:
                d2 /= n
                rel = np.stack([cloud_points[:, a0] - pos[a0],
                                cloud_points[:, a1] - pos[a1]], axis=1)
                facing = rel @ d2 >= 0
                if np.any(facing):
                    poi = cloud_points[facing]
        out.cameras.append(calibrated_camera(cam.pose, poi, config.width, config.height,
                                             config.margin_px))
        out.scales.append(scale)
    return out
