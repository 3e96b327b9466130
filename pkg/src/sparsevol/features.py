"""Multi-view projection features and MeanVar aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Camera, GridSpec, grid_centers


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Image features ``(C_img, H, W)`` for one view.

    ``scale`` is the feature-map / image resolution ratio. Feature pixel
    centers are aligned with image pixel centers, so an image coordinate ``u``
    maps to ``(u + 0.5) * scale - 0.5``.
    """

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise ValueError("feature map must be (C, H, W)")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map contains non-finite values")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"feature scale must be in (0, 1], got {self.scale}")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def bilinear(data: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``(C, H, W)`` at continuous pixel coords ``(P, 2)``; borders clamp."""
    C, H, W = data.shape
    x = np.clip(xy[:, 0], 0.0, W - 1.0)
    y = np.clip(xy[:, 1], 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    d = data.astype(np.float64)
    top = d[:, y0, x0].T * (1 - fx) + d[:, y0, x1].T * fx
    bot = d[:, y1, x0].T * (1 - fx) + d[:, y1, x1].T * fx
    return top * (1 - fy) + bot * fy


def sample_features(fmap: FeatureMap, camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Project ``(P, 3)`` points and sample the map. Returns ``(values (P, C), hit (P,))``.

    Misses (behind the camera or outside the image) get zero rows and ``hit=False``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    proj = camera.project(pts)
    hit = proj.in_image
    out = np.zeros((len(pts), fmap.channels))
    if np.any(hit):
        fxy = (proj.uv[hit] + 0.5) * fmap.scale - 0.5
        out[hit] = bilinear(fmap.data, fxy)
    return out, hit


def sample_feature(fmap: FeatureMap, camera: Camera, point) -> np.ndarray | None:
    values, hit = sample_features(fmap, camera, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return values[0] if hit[0] else None


def meanvar_batch(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and variance over views.

    ``values`` is ``(M, P, C)``, ``valid`` is ``(M, P)``. Returns the ``(P, 2C)``
    concatenation ``[mean, var]`` and the per-point count of valid views.
    Points with no valid view get the zero dummy feature.
    """
    w = valid.astype(np.float64)[..., None]
    n = w.sum(axis=0)
    safe = np.maximum(n, 1.0)
    mean = (values * w).sum(axis=0) / safe
    var = (((values - mean) ** 2) * w).sum(axis=0) / safe
    var = np.maximum(var, 0.0)
    return np.concatenate([mean, var], axis=-1), n[..., 0].astype(np.int64)


def meanvar(views: Sequence[np.ndarray | None], channels: int | None = None) -> tuple[np.ndarray, bool]:
    """Aggregate per-view vectors (``None`` marks a miss). Returns ``(feature, any_valid)``.

    With no valid view the zero dummy of width ``2 * channels`` comes back with
    ``any_valid=False``.
    """
    valid = [np.asarray(v, dtype=np.float64) for v in views if v is not None]
    if not valid:
        if channels is None:
            raise ValueError("no valid view: pass channels to size the dummy feature")
        return np.zeros(2 * channels), False
    stack = np.stack(valid)
    mean = stack.mean(axis=0)
    var = np.maximum(((stack - mean) ** 2).mean(axis=0), 0.0)
    return np.concatenate([mean, var]), True


def aggregate_points(points, maps: Sequence[FeatureMap], cameras: Sequence[Camera]) -> tuple[np.ndarray, np.ndarray]:
    """MeanVar features ``(P, 2*C_img)`` and valid-view counts ``(P,)`` for world points."""
    if len(maps) == 0 or len(maps) != len(cameras):
        raise ValueError("need at least one view and one camera per feature map")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vals, hits = [], []
    for fmap, cam in zip(maps, cameras):
        v, h = sample_features(fmap, cam, pts)
        vals.append(v)
        hits.append(h)
    return meanvar_batch(np.stack(vals), np.stack(hits))


def build_dense_volume(spec: GridSpec, maps: Sequence[FeatureMap], cameras: Sequence[Camera]) -> np.ndarray:
    """Dense feature grid ``(Kx, Ky, Kz, 2*C_img)`` at coarse voxel centers."""
    centers = grid_centers(spec.bbox, spec.K).reshape(-1, 3)
    feats, _ = aggregate_points(centers, maps, cameras)
    return feats.reshape(*spec.K, -1).astype(np.float32)
