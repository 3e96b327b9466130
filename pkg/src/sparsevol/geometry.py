"""Cameras, rays, bounding boxes and the three grid frames.

Grid convention: along each axis voxel ``i`` spans ``[min + i*edge, min + (i+1)*edge)``.
A point on a shared face therefore belongs to the voxel for which that face is
the lower one; the max corner itself is clamped into the last voxel. All coordinate math is float64.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

_W_EPS = 1e-12


def _as_vec3(x, name="value") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# cameras


class Projection(NamedTuple):
    uv: np.ndarray  # (..., 2) continuous pixel coords, NaN when behind camera
    depth: np.ndarray  # (...,) camera-frame depth
    in_front: np.ndarray  # (...,) bool, depth > 0 and w not degenerate
    in_image: np.ndarray  # (...,) bool, in_front and inside the image


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera given by a 3x4 world-to-pixel projection matrix.

    Pixel ``(x, y)`` (column, row) has its center at continuous coordinate
    ``(x, y)``; the image covers ``[-0.5, width - 0.5) x [-0.5, height - 0.5)``.
    """

    projection: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        P = np.asarray(self.projection, dtype=np.float64)
        if P.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValueError("projection must be finite")
        if np.linalg.matrix_rank(P) != 3:
            raise ValueError("projection must have rank 3")
        if np.linalg.matrix_rank(P[:, :3]) != 3:
            raise ValueError("left 3x3 block of projection must be invertible (finite camera)")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "projection", _readonly(P))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    # -- construction -----------------------------------------------------

    @classmethod
    def from_krt(cls, K, R, t, width, height) -> "Camera":
        K = np.asarray(K, dtype=np.float64)
        Rt = np.hstack([np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64).reshape(3, 1)])
        return cls(K @ Rt, width, height)

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height, principal=None) -> "Camera":
        """OpenCV-style camera (x right, y down, z forward) at ``eye`` looking at ``target``."""
        eye, target, up = _as_vec3(eye, "eye"), _as_vec3(target, "target"), _as_vec3(up, "up")
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        if principal is None:
            principal = ((width - 1) / 2.0, (height - 1) / 2.0)
        K = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
        return cls.from_krt(K, R, -R @ eye, width, height)

    # -- derived quantities -----------------------------------------------

    @property
    def _sign(self) -> float:
        return float(np.sign(np.linalg.det(self.projection[:, :3])))

    @property
    def center(self) -> np.ndarray:
        M, p4 = self.projection[:, :3], self.projection[:, 3]
        return -np.linalg.solve(M, p4)

    @property
    def x_axis(self) -> np.ndarray:
        """Unit world direction of the camera's +x axis."""
        M = self.projection[:, :3] * self._sign
        d = np.linalg.solve(M, np.array([1.0, 0.0, 0.0]))
        return d / np.linalg.norm(d)

    @property
    def optical_axis(self) -> np.ndarray:
        m3 = self.projection[2, :3] * self._sign
        return m3 / np.linalg.norm(m3)

    # -- projection ---------------------------------------------------------

    def project(self, points) -> Projection:
        """Project world points ``(..., 3)`` to pixels and camera-frame depth."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape[-1] != 3:
            raise ValueError("points must have a trailing dimension of 3")
        P = self.projection
        h = pts @ P[:, :3].T + P[:, 3]
        w = h[..., 2]
        depth = self._sign * w / np.linalg.norm(P[2, :3])
        in_front = (np.abs(w) > _W_EPS) & (depth > 0) & np.all(np.isfinite(pts), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = h[..., :2] / w[..., None]
        uv = np.where(in_front[..., None], uv, np.nan)
        u, v = uv[..., 0], uv[..., 1]
        in_image = in_front & (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)
        return Projection(uv, depth, in_front, in_image)

    def unproject(self, uv, depth) -> np.ndarray:
        """World points at camera-frame ``depth`` behind pixels ``uv`` (inverse of project)."""
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        P = self.projection
        hom = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        dirs = hom @ np.linalg.inv(P[:, :3]).T
        w = depth * np.linalg.norm(P[2, :3]) * self._sign
        return self.center + w[..., None] * dirs

    def pixel_rays(self, uv) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions of viewing rays through pixels ``uv``."""
        pts = self.unproject(uv, np.ones(np.shape(uv)[:-1]))
        d = pts - self.center
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d

    def translated(self, offset) -> "Camera":
        """Same intrinsics and orientation, optical center moved by ``offset`` (world)."""
        offset = _as_vec3(offset, "offset")
        P = self.projection.copy()
        P[:, 3] -= P[:, :3] @ offset
        return Camera(P, self.width, self.height)

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resized by ``factor`` (pixel centers stay aligned)."""
        S = np.array([[factor, 0, 0.5 * factor - 0.5], [0, factor, 0.5 * factor - 0.5], [0, 0, 1.0]])
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return Camera(S @ self.projection, w, h)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {"projection": self.projection.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(np.asarray(d["projection"], dtype=np.float64).reshape(3, 4), d["width"], d["height"])
        except KeyError as exc:
            raise ValueError(f"camera entry missing field {exc}") from None


def load_cameras(path) -> list[Camera]:
    """Read a camera JSON file: one camera object, a list, or ``{"cameras": [...]}``."""
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict) and "cameras" in data:
        data = data["cameras"]
    if isinstance(data, dict):
        data = [data]
    return [Camera.from_dict(d) for d in data]


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=2))


# ---------------------------------------------------------------------------
# boxes and rays


@dataclass(frozen=True, eq=False)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo, hi = _as_vec3(self.min_corner, "min_corner"), _as_vec3(self.max_corner, "max_corner")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounding box corners must be finite")
        if not np.all(lo < hi):
            raise ValueError(f"min_corner must be < max_corner componentwise: {lo} vs {hi}")
        object.__setattr__(self, "min_corner", _readonly(lo))
        object.__setattr__(self, "max_corner", _readonly(hi))

    @property
    def size(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=-1)

    def to_dict(self) -> dict:
        return {"min": self.min_corner.tolist(), "max": self.max_corner.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BoundingBox":
        return cls(d["min"], d["max"])


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o, d = _as_vec3(self.origin, "origin"), _as_vec3(self.direction, "direction")
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0:
            raise ValueError("ray direction must be a finite non-zero vector")
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "origin", _readonly(o))
        object.__setattr__(self, "direction", _readonly(d))

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def ray_aabb(ray: Ray, box: BoundingBox) -> tuple[float, float] | None:
    """Slab test. Returns ``(t_enter, t_exit)`` clamped to ``t >= 0``, or None on a miss."""
    t0, t1 = 0.0, np.inf
    for a in range(3):
        o, d = ray.origin[a], ray.direction[a]
        lo, hi = box.min_corner[a], box.max_corner[a]
        if d == 0.0:
            if o < lo or o > hi:
                return None
            continue
        ta, tb = (lo - o) / d, (hi - o) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return None
    return float(t0), float(t1)


# ---------------------------------------------------------------------------
# grids


class Frame(enum.Enum):
    GLOBAL = "global"
    OCCUPANCY = "occupancy"
    LOCAL = "local"


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Voxelization of ``bbox`` into ``K`` coarse voxels per axis, each split ``s`` times."""

    bbox: BoundingBox
    K: tuple[int, int, int]
    s: int = 1

    def __post_init__(self):
        K = self.K
        if np.ndim(K) == 0:
            K = (int(K),) * 3
        K = tuple(int(k) for k in K)
        if len(K) != 3 or min(K) <= 0:
            raise ValueError(f"coarse resolution must be positive per axis, got {self.K}")
        if int(self.s) <= 0:
            raise ValueError(f"supersampling factor must be positive, got {self.s}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "s", int(self.s))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.K

    @property
    def fine_shape(self) -> tuple[int, int, int]:
        return tuple(k * self.s for k in self.K)

    @property
    def n_coarse(self) -> int:
        return int(np.prod(self.K))

    @property
    def coarse_edge(self) -> np.ndarray:
        return self.bbox.size / np.asarray(self.K, dtype=np.float64)

    @property
    def fine_edge(self) -> np.ndarray:
        return self.coarse_edge / self.s

    def bounds(self, frame: Frame) -> np.ndarray:
        if frame is Frame.GLOBAL:
            return np.asarray(self.fine_shape)
        if frame is Frame.OCCUPANCY:
            return np.asarray(self.K)
        return np.full(3, self.s)

    def to_dict(self) -> dict:
        return {"bbox": self.bbox.to_dict(), "K": list(self.K), "s": self.s}

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(BoundingBox.from_dict(d["bbox"]), d["K"], d.get("s", 1))

    def with_s(self, s: int) -> "GridSpec":
        return GridSpec(self.bbox, self.K, s)


@dataclass(frozen=True, eq=False)
class GridCoord:
    frame: Frame
    index: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __post_init__(self):
        idx = np.asarray(self.index)
        if idx.shape != (3,) or not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("grid index must be an integer 3-vector")
        idx = idx.astype(np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, "index", idx)

    def __eq__(self, other):
        return isinstance(other, GridCoord) and self.frame is other.frame and np.array_equal(self.index, other.index)

    def __hash__(self):
        return hash((self.frame, tuple(self.index)))

    def __repr__(self):
        return f"GridCoord({self.frame.value}, {tuple(int(i) for i in self.index)})"


def _check_in_frame(spec: GridSpec, coord: GridCoord) -> None:
    hi = spec.bounds(coord.frame)
    if np.any(coord.index < 0) or np.any(coord.index >= hi):
        raise ValueError(f"{coord} out of range for frame bounds {tuple(hi)}")


def voxel_center(spec: GridSpec, coord: GridCoord, parent: GridCoord | None = None) -> np.ndarray:
    """World center of a voxel. Local coordinates need their ``parent`` occupancy voxel."""
    _check_in_frame(spec, coord)
    if coord.frame is Frame.LOCAL:
        if parent is None:
            raise ValueError("a local coordinate needs its parent occupancy coordinate")
        coord = merge_coords(spec, parent, coord)
    edge = spec.fine_edge if coord.frame is Frame.GLOBAL else spec.coarse_edge
    return spec.bbox.min_corner + (coord.index + 0.5) * edge


def split_global(spec: GridSpec, coord: GridCoord) -> tuple[GridCoord, GridCoord]:
    if coord.frame is not Frame.GLOBAL:
        raise ValueError("only global coordinates can be split")
    _check_in_frame(spec, coord)
    occ, loc = np.divmod(coord.index, spec.s)
    return GridCoord(Frame.OCCUPANCY, occ), GridCoord(Frame.LOCAL, loc)


def merge_coords(spec: GridSpec, occ: GridCoord, local: GridCoord) -> GridCoord:
    if occ.frame is not Frame.OCCUPANCY or local.frame is not Frame.LOCAL:
        raise ValueError("merge needs an (occupancy, local) coordinate pair")
    _check_in_frame(spec, occ)
    _check_in_frame(spec, local)
    return GridCoord(Frame.GLOBAL, occ.index * spec.s + local.index)


def convert_frames(spec: GridSpec, coord: GridCoord, target: Frame, local: GridCoord | None = None) -> GridCoord:
    """Global -> Occupancy/Local by splitting; Occupancy (+ ``local``) -> Global by merging."""
    if coord.frame is target:
        _check_in_frame(spec, coord)
        return coord
    if coord.frame is Frame.GLOBAL:
        occ, loc = split_global(spec, coord)
        return occ if target is Frame.OCCUPANCY else loc
    if target is Frame.GLOBAL and coord.frame is Frame.OCCUPANCY and local is not None:
        return merge_coords(spec, coord, local)
    if target is Frame.GLOBAL and coord.frame is Frame.LOCAL and local is not None:
        # tolerate (local, occupancy) argument order
        return merge_coords(spec, local, coord)
    raise ValueError(f"cannot convert {coord.frame.value} -> {target.value} without a partner coordinate")


def world_to_voxel(bbox: BoundingBox, res, points) -> tuple[np.ndarray, np.ndarray]:
    """Voxel indices of world points for a ``res``-per-axis grid over ``bbox``.

    Returns ``(index (..., 3) int64, inside (...,) bool)``. Indices of outside
    points are clipped into range but flagged.
    """
    pts = np.asarray(points, dtype=np.float64)
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,))
    inside = np.all((pts >= bbox.min_corner) & (pts <= bbox.max_corner), axis=-1)
    with np.errstate(invalid="ignore"):
        rel = (pts - bbox.min_corner) / bbox.size * res
        idx = np.floor(np.nan_to_num(rel, nan=-1.0, posinf=-1.0, neginf=-1.0)).astype(np.int64)
    idx = np.clip(idx, 0, res - 1)
    return idx, inside


def coarse_index(spec: GridSpec, points) -> tuple[np.ndarray, np.ndarray]:
    return world_to_voxel(spec.bbox, spec.K, points)


def fine_index(spec: GridSpec, points) -> tuple[np.ndarray, np.ndarray]:
    return world_to_voxel(spec.bbox, spec.fine_shape, points)


def grid_centers(bbox: BoundingBox, res) -> np.ndarray:
    """All voxel centers of a grid, shape ``(Rx, Ry, Rz, 3)`` in C order."""
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,))
    edge = bbox.size / res
    axes = [bbox.min_corner[a] + (np.arange(res[a]) + 0.5) * edge[a] for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
