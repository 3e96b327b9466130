"""Scene configuration: one JSON file drives every pipeline command.

Relative paths inside the file are resolved against the file's directory.
Command-line flags override individual fields (see ``cli``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, GridSpec

DESK_K = 32
FULL_K = 128

PATH_FIELDS = ("cameras", "features", "logits", "gt_occupancy", "occupancy", "bundle", "weights",
               "render_dir", "tsdf", "mesh", "gt_mesh")


class ConfigError(ValueError):
    """Invalid or incomplete scene configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class SceneConfig:
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    K: int = DESK_K
    s: int = 4
    C_img: int = 16  # MeanVar doubles this, so the volume carries 2 * C_img = 32 channels
    n_samples: int = 64
    tau: float = 0.1
    gamma: float = 2.0
    alpha: float = 1.0
    bands: int = 10
    sampling: str = "stratified"
    tsdf_resolution: int = 256
    tsdf_truncation: float | None = None  # None: two fine-voxel edges
    virtual_shift: float = 25.0
    eval_density: float = 1.0  # surface samples per unit area for Chamfer
    logits_are_probabilities: bool = False
    seed: int = 0
    cameras: str | None = None
    features: str | None = None
    logits: str | None = None
    gt_occupancy: str | None = None
    occupancy: str | None = None
    bundle: str | None = None
    weights: str | None = None
    render_dir: str | None = None
    tsdf: str | None = None
    mesh: str | None = None
    gt_mesh: str | None = None
    views: list = field(default_factory=list)  # [{"depth": ..., "camera": ..., "index": 0}]

    def __post_init__(self):
        problems = []
        try:
            box = BoundingBox(self.bbox_min, self.bbox_max)
        except ValueError as exc:
            problems.append(f"bbox: {exc}")
            box = None
        checks = [
            (self.K >= 1, "K must be >= 1"),
            (self.s >= 1, "s must be >= 1"),
            (self.C_img >= 1, "C_img must be >= 1"),
            (self.n_samples >= 1, "n_samples must be >= 1"),
            (0.0 < self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.gamma >= 0.0, "gamma must be >= 0"),
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.bands >= 0, "bands must be >= 0"),
            (self.sampling in ("uniform", "stratified"), "sampling must be 'uniform' or 'stratified'"),
            (self.tsdf_resolution >= 2, "tsdf_resolution must be >= 2"),
            (self.tsdf_truncation is None or self.tsdf_truncation > 0, "tsdf_truncation must be positive"),
            (np.isfinite(self.virtual_shift), "virtual_shift must be finite"),
            (self.eval_density > 0, "eval_density must be positive"),
        ]
        problems += [msg for ok, msg in checks if not ok]
        if problems:
            raise ConfigError("; ".join(problems))
        object.__setattr__(self, "_box", box)

    # -- derived values -------------------------------------------------------

    @property
    def bbox(self) -> BoundingBox:
        return self._box

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.bbox, self.K, self.s)

    @property
    def truncation(self) -> float:
        if self.tsdf_truncation is not None:
            return float(self.tsdf_truncation)
        return 2.0 * float(np.max(self.grid.fine_edge))

    @property
    def volume_channels(self) -> int:
        return 2 * self.C_img

    def path(self, name: str) -> Path:
        """Configured path for ``name``; raises ConfigError when unset."""
        value = getattr(self, name)
        if not value:
            raise ConfigError(f"config field '{name}' is required for this command")
        return Path(value)

    def full_scale(self) -> "SceneConfig":
        return replace(self, K=FULL_K)

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = {"min": list(d.pop("bbox_min")), "max": list(d.pop("bbox_max"))}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "SceneConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        if "bbox" in data:
            box = data.pop("bbox")
            try:
                data["bbox_min"], data["bbox_max"] = box["min"], box["max"]
            except (KeyError, TypeError):
                raise ConfigError("bbox must be an object with 'min' and 'max'") from None
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        for key in ("bbox_min", "bbox_max"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        if base_dir is not None:
            base = Path(base_dir)
            for key in PATH_FIELDS:
                if data.get(key):
                    data[key] = str(base / data[key])
            views = []
            for v in data.get("views", []):
                v = dict(v)
                for key in ("depth", "camera"):
                    if key in v:
                        v[key] = str(base / v[key])
                views.append(v)
            data["views"] = views
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SceneConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(data, base_dir=p.parent)
