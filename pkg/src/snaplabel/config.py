"""Pipeline configuration: one TOML file with a section per stage.

Every constant the pipeline depends on (snap counts, image size, filter
thresholds, IoU gates, view minimums, crop scale, depth tolerance) is a named
key here so runs are reproducible from the config alone.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .camera import SnapConfig
from .errors import ConfigError
from .lookup import LookupConfig
from .mask_filter import FilterConfig


@dataclass
class SceneConfig:
    up_axis: str = "z"
    crop_margin: float | None = None  # meters off the scene top; None = no crop
    patch_size: float | None = None


@dataclass
class ProjectionConfig:
    depth_tol: float = 1e-2


@dataclass
class DetectorSettings:
    provider: str = "oracle"            # oracle | file | http
    endpoint: str | None = None
    fixtures_dir: str | None = None
    gt_masks: str | None = None         # oracle provider ground truth
    gt_labels: str | None = None
    vocabulary: list[str] = field(default_factory=list)
    retries: int = 2
    timeout: float = 60.0


@dataclass
class EvalSettings:
    predictions: str | None = None
    pred_masks: str | None = None  # mask file predictions index into; gt_masks if unset
    gt_masks: str | None = None
    gt_labels: str | None = None
    scene: str | None = None
    recognition: bool = True
    detection_boxes: bool = True


@dataclass
class PosedSettings:
    images_dir: str | None = None  # use externally supplied views instead of rendering


@dataclass
class RuntimeConfig:
    workers: int = 1
    seed: int = 0


@dataclass
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    snap: SnapConfig = field(default_factory=SnapConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    lookup: LookupConfig = field(default_factory=LookupConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    posed: PosedSettings = field(default_factory=PosedSettings)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)


_SECTIONS = {
    "scene": SceneConfig,
    "snap": SnapConfig,
    "filter": FilterConfig,
    "projection": ProjectionConfig,
    "lookup": LookupConfig,
    "detector": DetectorSettings,
    "eval": EvalSettings,
    "posed": PosedSettings,
    "runtime": RuntimeConfig,
}


def _build_section(cls, values: dict, section: str, path):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)} in [{section}]")
    if "background" in values:
        values = dict(values)
        values["background"] = tuple(values["background"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad [{section}] section: {exc}") from exc


def load_config(path=None) -> PipelineConfig:
    """Parse a TOML config; a missing path yields defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name, path)
    return PipelineConfig(**kwargs)
