"""Scene data types and file I/O.

Point clouds are carried as float64 positions plus uint8 RGB colors.
Supported on-disk formats:

* PLY, ascii or binary little-endian, with vertex properties
  x, y, z (float or double) and red, green, blue (uchar).
* Whitespace-separated text, one ``x y z r g b`` record per line.
* Mask sets as UTF-8 JSON-lines, one mask per line:
  ``{"indices": [...], "soft": [...]?, "score": 0.87?}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

UP_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class PointCloud:
    """Colored point cloud; the sole geometric ground truth of a scene."""

    points: np.ndarray  # (N, 3) float64, meters
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.colors = np.asarray(self.colors)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DomainError("points must have shape (N, 3)")
        if self.colors.shape != self.points.shape:
            raise DomainError("colors must match points in shape")
        if len(self.points) < 1:
            raise DomainError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise DomainError("point coordinates must be finite")
        if self.colors.dtype != np.uint8:
            self.colors = np.clip(np.round(self.colors.astype(np.float64)), 0, 255).astype(np.uint8)

    def __len__(self):
        return len(self.points)


@dataclass
class InstanceMask:
    """One object proposal: a sorted set of point indices."""

    point_indices: np.ndarray  # (K,) int64, strictly increasing
    soft_values: np.ndarray | None = None  # (K,) float64 in [0,1]
    quality_score: float | None = None  # predicted IoU in [0,1]

    def __post_init__(self):
        idx = np.asarray(self.point_indices, dtype=np.int64)
        order = np.argsort(idx, kind="stable")
        if self.soft_values is not None:
            soft = np.asarray(self.soft_values, dtype=np.float64)
            if soft.shape != idx.shape:
                raise DomainError("soft_values must match point_indices in length")
            soft = soft[order]
        else:
            soft = None
        idx = idx[order]
        if len(idx) == 0:
            raise DomainError("mask must contain at least one point index")
        if np.any(idx[1:] == idx[:-1]):
            raise DomainError("mask indices must be unique")
        if idx[0] < 0:
            raise DomainError("mask indices must be non-negative")
        if soft is not None and (np.any(soft < 0) or np.any(soft > 1)):
            raise DomainError("soft values must lie in [0, 1]")
        if self.quality_score is not None and not 0 <= self.quality_score <= 1:
            raise DomainError("quality score must lie in [0, 1]")
        self.point_indices = idx
        self.soft_values = soft

    def __len__(self):
        return len(self.point_indices)


@dataclass
class MaskSet:
    """A list of instance masks; masks may overlap and the list may be empty."""

    masks: list[InstanceMask] = field(default_factory=list)
    source: str = ""

    def validate_against(self, cloud: PointCloud):
        n = len(cloud)
        for i, m in enumerate(self.masks):
            if m.point_indices[-1] >= n:
                raise DomainError(f"mask {i} references point {m.point_indices[-1]} >= N={n}")

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


@dataclass
class SceneBounds:
    min_corner: np.ndarray
    max_corner: np.ndarray
    up_axis: str = "z"

    def __post_init__(self):
        self.min_corner = np.asarray(self.min_corner, dtype=np.float64)
        self.max_corner = np.asarray(self.max_corner, dtype=np.float64)
        if self.up_axis not in UP_AXES:
            raise DomainError(f"up_axis must be one of {sorted(UP_AXES)}")
        # degenerate (equal) extents are tolerated so single-point clouds have
        # exact bounds; consumers needing positive extent check it themselves
        if not np.all(self.min_corner <= self.max_corner):
            raise DomainError("bounds require min_corner <= max_corner componentwise")

    @property
    def up(self) -> int:
        return UP_AXES[self.up_axis]

    @property
    def footprint_axes(self) -> tuple[int, int]:
        return tuple(i for i in range(3) if i != self.up)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def size(self) -> np.ndarray:
        return self.max_corner - self.min_corner


# ---------------------------------------------------------------------------
# point cloud files

_PLY_FLOAT_NAMES = {"float", "float32"}
_PLY_DOUBLE_NAMES = {"double", "float64"}
_PLY_UCHAR_NAMES = {"uchar", "uint8"}


def load_point_cloud(path, format: str | None = None) -> PointCloud:
    """Load a point cloud; format is 'ply' or 'xyzrgb-text' (inferred from suffix)."""
    path = Path(path)
    if format is None:
        format = "ply" if path.suffix.lower() == ".ply" else "xyzrgb-text"
    if format == "ply":
        return _load_ply(path)
    if format == "xyzrgb-text":
        return _load_xyzrgb(path)
    raise FormatError(f"unknown point cloud format {format!r}", path=path)


def save_point_cloud(cloud: PointCloud, path, format: str | None = None, binary: bool = True):
    """Write a cloud. PLY positions are stored as double so save/load is bit-exact."""
    path = Path(path)
    if format is None:
        format = "ply" if path.suffix.lower() == ".ply" else "xyzrgb-text"
    if format == "ply":
        _save_ply(cloud, path, binary=binary)
    elif format == "xyzrgb-text":
        with open(path, "w", encoding="utf-8") as fh:
            for p, c in zip(cloud.points, cloud.colors):
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]}\n")
    else:
        raise FormatError(f"unknown point cloud format {format!r}", path=path)


def _load_xyzrgb(path: Path) -> PointCloud:
    pts, cols = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"expected 6 fields, got {len(parts)}", path=path, line=lineno)
            try:
                pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
                cols.append([float(parts[3]), float(parts[4]), float(parts[5])])
            except ValueError as exc:
                raise FormatError(f"bad number: {exc}", path=path, line=lineno) from exc
    if not pts:
        raise DomainError(f"{path}: empty point cloud")
    return PointCloud(np.array(pts), np.array(cols))


def _parse_ply_header(fh, path):
    """Returns (format, vertex_count, properties, data_offset)."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise FormatError("missing 'ply' magic", path=path, offset=0)
    fmt = None
    count = None
    props = []  # (name, type) for the vertex element
    in_vertex = False
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise FormatError("unexpected EOF in header", path=path, line=lineno)
        line = raw.decode("ascii", errors="replace").strip()
        if line.startswith("comment") or not line:
            continue
        if line.startswith("format"):
            parts = line.split()
            if parts[1] == "ascii":
                fmt = "ascii"
            elif parts[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise FormatError(f"unsupported PLY format {parts[1]!r}", path=path, line=lineno)
        elif line.startswith("element"):
            parts = line.split()
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif line.startswith("property"):
            if in_vertex:
                parts = line.split()
                if parts[1] == "list":
                    raise FormatError("list properties unsupported on vertex", path=path, line=lineno)
                props.append((parts[2], parts[1]))
        elif line == "end_header":
            break
    if fmt is None or count is None:
        raise FormatError("incomplete PLY header", path=path, line=lineno)
    return fmt, count, props, fh.tell()


def _ply_dtype(props, path):
    np_types = {}
    for name, tname in props:
        if tname in _PLY_FLOAT_NAMES:
            np_types[name] = "<f4"
        elif tname in _PLY_DOUBLE_NAMES:
            np_types[name] = "<f8"
        elif tname in _PLY_UCHAR_NAMES:
            np_types[name] = "u1"
        elif tname in ("int", "int32", "uint", "uint32"):
            np_types[name] = "<i4" if tname.startswith("int") else "<u4"
        elif tname in ("short", "int16", "ushort", "uint16"):
            np_types[name] = "<i2" if tname.startswith("short") or tname == "int16" else "<u2"
        elif tname in ("char", "int8"):
            np_types[name] = "i1"
        else:
            raise FormatError(f"unsupported PLY property type {tname!r}", path=path)
    return np.dtype([(name, np_types[name]) for name, _ in props])


def _load_ply(path: Path) -> PointCloud:
    with open(path, "rb") as fh:
        fmt, count, props, offset = _parse_ply_header(fh, path)
        names = [name for name, _ in props]
        for req in ("x", "y", "z", "red", "green", "blue"):
            if req not in names:
                raise FormatError(f"missing vertex property {req!r}", path=path)
        if count == 0:
            raise DomainError(f"{path}: PLY contains no vertices")
        dtype = _ply_dtype(props, path)
        if fmt == "binary":
            raw = fh.read(dtype.itemsize * count)
            if len(raw) != dtype.itemsize * count:
                raise FormatError(
                    f"truncated vertex data ({len(raw)} of {dtype.itemsize * count} bytes)",
                    path=path, offset=offset + len(raw),
                )
            data = np.frombuffer(raw, dtype=dtype, count=count)
        else:
            rows = []
            for lineno, raw in enumerate(fh.read().decode("ascii").splitlines(), start=1):
                raw = raw.strip()
                if not raw:
                    continue
                parts = raw.split()
                if len(parts) != len(props):
                    raise FormatError(
                        f"expected {len(props)} values, got {len(parts)}", path=path, line=lineno
                    )
                rows.append(tuple(parts))
                if len(rows) == count:
                    break
            if len(rows) != count:
                raise FormatError(f"expected {count} vertices, found {len(rows)}", path=path)
            data = np.array(rows, dtype=dtype)
        pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
        cols = np.stack([data["red"], data["green"], data["blue"]], axis=1)
    return PointCloud(pts, cols)


def _save_ply(cloud: PointCloud, path: Path, binary: bool = True):
    n = len(cloud)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    dtype = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    data = np.empty(n, dtype=dtype)
    data["x"], data["y"], data["z"] = cloud.points.T
    data["red"], data["green"], data["blue"] = cloud.colors.T
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write(
                    f"{row['x']:.17g} {row['y']:.17g} {row['z']:.17g} "
                    f"{row['red']} {row['green']} {row['blue']}\n".encode("ascii")
                )


# ---------------------------------------------------------------------------
# mask set files (JSON-lines)

def load_mask_set(path, source: str | None = None) -> MaskSet:
    path = Path(path)
    masks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad JSON: {exc}", path=path, line=lineno) from exc
            if "indices" not in rec:
                raise FormatError("mask record lacks 'indices'", path=path, line=lineno)
            try:
                masks.append(InstanceMask(
                    np.asarray(rec["indices"], dtype=np.int64),
                    soft_values=np.asarray(rec["soft"], dtype=np.float64) if "soft" in rec else None,
                    quality_score=rec.get("score"),
                ))
            except DomainError as exc:
                raise FormatError(str(exc), path=path, line=lineno) from exc
    return MaskSet(masks, source=source if source is not None else str(path))


def save_mask_set(masks: MaskSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        for m in masks:
            rec = {"indices": m.point_indices.tolist()}
            if m.soft_values is not None:
                rec["soft"] = m.soft_values.tolist()
            if m.quality_score is not None:
                rec["score"] = m.quality_score
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# geometry-preserving transforms

def compute_bounds(cloud: PointCloud, up_axis: str = "z") -> SceneBounds:
    """Exact componentwise extrema of the cloud."""
    return SceneBounds(cloud.points.min(axis=0), cloud.points.max(axis=0), up_axis)


def remap_masks(masks: MaskSet, remap: np.ndarray, source_suffix: str = "") -> MaskSet:
    """Re-index masks through an old->new point index map (-1 = removed).

    Masks emptied by the map are dropped.
    """
    out = []
    for m in masks:
        new_idx = remap[m.point_indices]
        keep = new_idx >= 0
        if not np.any(keep):
            continue
        out.append(InstanceMask(
            new_idx[keep],
            soft_values=m.soft_values[keep] if m.soft_values is not None else None,
            quality_score=m.quality_score,
        ))
    return MaskSet(out, source=masks.source + source_suffix)


def surviving_mask_ids(masks: MaskSet, remap: np.ndarray) -> list[int]:
    """Positions of masks that keep at least one point under the remap."""
    return [i for i, m in enumerate(masks) if np.any(remap[m.point_indices] >= 0)]


def crop_top(cloud: PointCloud, masks: MaskSet, bounds: SceneBounds, margin: float):
    """Remove points within `margin` meters of the scene top along the up axis.

    Returns (cloud, masks, remap) where remap maps old point indices to new
    ones (-1 for removed points). Masks emptied by the crop are dropped.
    """
    if margin < 0:
        raise DomainError("crop margin must be >= 0")
    up = bounds.up
    height = bounds.max_corner[up] - bounds.min_corner[up]
    if margin > 0 and margin >= height:
        raise DomainError(f"margin {margin} >= scene height {height}: crop would delete everything")
    cutoff = bounds.max_corner[up] - margin
    keep = cloud.points[:, up] <= cutoff
    if not np.any(keep):
        raise DomainError("crop removed every point")
    remap = np.full(len(cloud), -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    new_cloud = PointCloud(cloud.points[keep], cloud.colors[keep])
    return new_cloud, remap_masks(masks, remap, source_suffix="+crop_top"), remap


def split_patches(cloud: PointCloud, masks: MaskSet, patch_size: float,
                  up_axis: str = "z") -> list[tuple[PointCloud, MaskSet]]:
    """Tile the scene footprint into patch_size x patch_size cells.

    Every point lands in exactly one patch. A mask goes to the patch holding
    the majority of its points (ties to the lower patch id) and is clipped to
    that patch. Patches with no points are omitted.
    """
    if patch_size <= 0:
        raise DomainError("patch_size must be > 0")
    bounds = compute_bounds(cloud, up_axis)
    a0, a1 = bounds.footprint_axes
    lo = bounds.min_corner
    extent0 = bounds.max_corner[a0] - lo[a0]
    extent1 = bounds.max_corner[a1] - lo[a1]
    n0 = max(1, int(np.ceil(extent0 / patch_size)))
    n1 = max(1, int(np.ceil(extent1 / patch_size)))
    if n0 * n1 == 1:
        return [(cloud, masks)]
    i0 = np.clip((cloud.points[:, a0] - lo[a0]) // patch_size, 0, n0 - 1).astype(np.int64)
    i1 = np.clip((cloud.points[:, a1] - lo[a1]) // patch_size, 0, n1 - 1).astype(np.int64)
    patch_of_point = i0 * n1 + i1

    patches = []
    for pid in range(n0 * n1):
        keep = patch_of_point == pid
        if not np.any(keep):
            patches.append(None)
            continue
        remap = np.full(len(cloud), -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        patches.append((PointCloud(cloud.points[keep], cloud.colors[keep]), remap))

    per_patch_masks: dict[int, list[InstanceMask]] = {}
    for m in masks:
        counts = np.bincount(patch_of_point[m.point_indices], minlength=n0 * n1)
        pid = int(np.argmax(counts))  # argmax takes the lowest id on ties
        _, remap = patches[pid]
        new_idx = remap[m.point_indices]
        keep = new_idx >= 0
        per_patch_masks.setdefault(pid, []).append(InstanceMask(
            new_idx[keep],
            soft_values=m.soft_values[keep] if m.soft_values is not None else None,
            quality_score=m.quality_score,
        ))

    out = []
    for pid, entry in enumerate(patches):
        if entry is None:
            continue
        pc, _ = entry
        out.append((pc, MaskSet(per_patch_masks.get(pid, []), source=f"{masks.source}+patch{pid}")))
    return out
