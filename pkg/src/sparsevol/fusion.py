"""TSDF fusion of depth maps and iso-surface extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .geometry import BoundingBox, Camera
from .tensorio import DepthMap, FormatError, TriangleMesh, read_tensor, write_tensor

DEFAULT_RESOLUTION = 256
VIRTUAL_SHIFT = 25.0  # scene units; 25 mm for millimetre-scale scenes


@dataclass(eq=False)
class TsdfVolume:
    """Truncated signed distance grid; positive in front of surfaces.

    ``tsdf`` holds values in [-1, 1] (distance / truncation), ``weight`` the
    number of observations per voxel. Voxel ``(i, j, k)`` is centered at
    ``bbox.min + (index + 0.5) * edge``.
    """

    bbox: BoundingBox
    resolution: tuple[int, int, int]
    truncation: float
    tsdf: np.ndarray | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        res = self.resolution
        if np.ndim(res) == 0:
            res = (int(res),) * 3
        self.resolution = tuple(int(r) for r in res)
        if min(self.resolution) < 2:
            raise ValueError("TSDF resolution must be at least 2 per axis")
        if not self.truncation > 0:
            raise ValueError("truncation must be positive")
        if self.tsdf is None:
            self.tsdf = np.ones(self.resolution, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.resolution, dtype=np.float64)
        self.tsdf = np.asarray(self.tsdf, dtype=np.float64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.tsdf.shape != self.resolution or self.weight.shape != self.resolution:
            raise ValueError("tsdf / weight shape does not match resolution")

    @classmethod
    def empty(cls, bbox: BoundingBox, resolution=DEFAULT_RESOLUTION, truncation: float | None = None) -> "TsdfVolume":
        """Fresh volume; truncation defaults to two voxel edges."""
        vol = cls(bbox, resolution, 1.0)
        if truncation is None:
            truncation = 2.0 * float(np.max(vol.edge))
        vol.truncation = float(truncation)
        return vol

    @property
    def edge(self) -> np.ndarray:
        return self.bbox.size / np.asarray(self.resolution)

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.bbox.min_corner[axis] + (np.arange(self.resolution[axis]) + 0.5) * self.edge[axis]

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.bbox, self.resolution, self.truncation, self.tsdf.copy(), self.weight.copy())

    # -- persistence: one .svt of shape (2, X, Y, Z) + bbox/truncation sidecar tensor

    def save(self, path) -> None:
        write_tensor(path, np.stack([self.tsdf, self.weight]))
        meta = np.concatenate([self.bbox.min_corner, self.bbox.max_corner, [self.truncation]])
        write_tensor(str(path) + ".meta.svt", meta)

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        data = read_tensor(path)
        meta = read_tensor(str(path) + ".meta.svt")
        if data.ndim != 4 or data.shape[0] != 2 or meta.shape != (7,):
            raise FormatError("not a TSDF volume file")
        return cls(BoundingBox(meta[:3], meta[3:6]), data.shape[1:], float(meta[6]), data[0], data[1])


def integrate(vol: TsdfVolume, depth: DepthMap, camera: Camera, in_place: bool = False) -> TsdfVolume:
    """Fuse one depth map: running average of ``clamp(sd / trunc, -1, 1)`` with unit weights.

    ``sd = depth(pixel) - voxel camera depth`` at the nearest pixel; voxels with
    ``sd < -trunc`` (hidden behind the surface) and invalid pixels are skipped.
    """
    if (depth.width, depth.height) != (camera.width, camera.height):
        raise ValueError("depth map size does not match its camera")
    out = vol if in_place else vol.copy()
    xs, ys = out.axis_centers(0), out.axis_centers(1)
    grid_xy = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)  # (X, Y, 2)
    dvals = depth.values
    trunc = out.truncation
    for k, z in enumerate(out.axis_centers(2)):
        pts = np.concatenate([grid_xy, np.full(grid_xy.shape[:2] + (1,), z)], axis=-1)
        proj = camera.project(pts)
        ok = proj.in_image
        px = np.where(ok, np.floor(np.nan_to_num(proj.uv[..., 0]) + 0.5), 0).astype(np.int64)
        py = np.where(ok, np.floor(np.nan_to_num(proj.uv[..., 1]) + 0.5), 0).astype(np.int64)
        px = np.clip(px, 0, depth.width - 1)
        py = np.clip(py, 0, depth.height - 1)
        d = dvals[py, px].astype(np.float64)
        ok &= d > 0
        sd = d - proj.depth
        ok &= sd >= -trunc
        if not np.any(ok):
            continue
        obs = np.clip(sd / trunc, -1.0, 1.0)
        t, w = out.tsdf[:, :, k], out.weight[:, :, k]
        w_new = w + ok
        t[...] = np.where(ok, (t * w + obs) / np.maximum(w_new, 1.0), t)
        w[...] = w_new
    return out


def virtual_view(camera: Camera, shift: float = VIRTUAL_SHIFT) -> Camera:
    """Camera translated by ``shift`` scene units along its own x-axis; intrinsics unchanged."""
    if not np.isfinite(shift):
        raise ValueError("shift must be finite")
    if shift == 0:
        return camera
    return camera.translated(shift * camera.x_axis)


def marching_cubes(vol: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface of the fused TSDF; cells touching unobserved voxels are skipped.

    Faces are wound so that their normals point along the TSDF gradient
    (outward, from negative inside towards positive free space).
    """
    if not -1.0 < iso < 1.0:
        raise ValueError("iso must lie in (-1, 1)")
    observed = vol.weight > 0
    # cell (i, j, k) spans corners i..i+1 etc. and needs all eight observed
    cell = observed[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cell &= observed[dx:dx + cell.shape[0], dy:dy + cell.shape[1], dz:dz + cell.shape[2]]
    values = np.where(observed, vol.tsdf, 1.0)
    crosses = (values[observed] < iso).any() and (values[observed] > iso).any()
    if not cell.any() or not crosses:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # skimage keys each cell by its upper corner
    mask = np.zeros(vol.resolution, dtype=bool)
    mask[1:, 1:, 1:] = cell
    try:
        verts, faces, _, _ = measure.marching_cubes(values, level=iso, method="lorensen", mask=mask)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = _refine_on_edges(values, verts.astype(np.float64), iso)
    verts = vol.bbox.min_corner + (verts + 0.5) * vol.edge
    faces = faces.astype(np.int64)
    if len(faces):
        faces = _orient_with_gradient(vol, verts, faces)
    return TriangleMesh(verts, faces)


def _refine_on_edges(values: np.ndarray, verts: np.ndarray, iso: float) -> np.ndarray:
    """Recompute edge-vertex positions in float64 (skimage works in float32).

    Each vertex lies on a grid edge; the edge is the axis whose coordinate is
    furthest from an integer among those whose endpoints straddle ``iso``.
    """
    res = np.asarray(values.shape)
    rounded = np.round(verts)
    best = np.full(len(verts), -1)
    best_frac = np.full(len(verts), -1.0)
    new_pos = verts.copy()
    for a in range(3):
        others = [b for b in range(3) if b != a]
        on_line = np.all(np.abs(verts[:, others] - rounded[:, others]) < 1e-3, axis=1)
        lo = np.clip(np.floor(verts[:, a]), 0, res[a] - 2).astype(np.int64)
        c0 = rounded.astype(np.int64)
        c0[:, a] = lo
        c0 = np.clip(c0, 0, res - 1)
        c1 = c0.copy()
        c1[:, a] += 1
        v0 = values[c0[:, 0], c0[:, 1], c0[:, 2]]
        v1 = values[c1[:, 0], c1[:, 1], c1[:, 2]]
        straddle = (v0 - iso) * (v1 - iso) <= 0
        frac = np.abs(verts[:, a] - rounded[:, a])
        pick = on_line & straddle & (v0 != v1) & (frac > best_frac)
        t = np.clip((iso - v0) / np.where(v0 != v1, v1 - v0, 1.0), 0.0, 1.0)
        pos = c0.astype(np.float64)
        pos[:, a] = lo + t
        new_pos[pick] = pos[pick]
        best_frac[pick] = frac[pick]
        best[pick] = a
    return new_pos


def _orient_with_gradient(vol: TsdfVolume, verts, faces) -> np.ndarray:
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    grad = tsdf_gradient(vol, tri.mean(axis=1))
    if np.sum(np.einsum("ij,ij->i", n, grad)) < 0:
        faces = faces[:, [0, 2, 1]]
    return faces


def tsdf_gradient(vol: TsdfVolume, points) -> np.ndarray:
    h = 0.5 * vol.edge
    g = np.zeros_like(points)
    for a in range(3):
        step = np.zeros(3)
        step[a] = h[a]
        g[:, a] = (trilinear_tsdf(vol, points + step) - trilinear_tsdf(vol, points - step)) / (2 * h[a])
    return g


def trilinear_tsdf(vol: TsdfVolume, points) -> np.ndarray:
    """Trilinear interpolation of the TSDF over voxel centers (clamped at the border)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = np.asarray(vol.resolution)
    g = (pts - vol.bbox.min_corner) / vol.edge - 0.5
    g = np.clip(g, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    f = g - i0
    out = np.zeros(len(pts))
    for c in range(8):
        b = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        idx = i0 + b
        w = np.prod(np.where(b.astype(bool), f, 1.0 - f), axis=1)
        out += w * vol.tsdf[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


def mesh_edges_manifold(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    if mesh.n_faces == 0:
        return False
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))
