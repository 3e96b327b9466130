"""Deterministic synthetic scenes: analytic spheres, random occupancy, random features."""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from .features import FeatureMap
from .geometry import BoundingBox, Camera, GridSpec
from .occupancy import Kind, OccupancyField
from .tensorio import DepthMap, TriangleMesh


def sphere_cameras(center=(0.0, 0.0, 0.0), radius: float = 1.0, n_views: int = 8, distance: float = 3.0,
                   size: int = 256, margin: float = 1.15) -> list[Camera]:
    """Cameras looking at the sphere center. Eight views sit on the cube diagonals."""
    center = np.asarray(center, dtype=np.float64)
    if n_views == 8:
        dirs = np.array(list(itertools.product((-1.0, 1.0), repeat=3))) / np.sqrt(3.0)
    else:
        # Fibonacci sphere
        i = np.arange(n_views) + 0.5
        phi = np.arccos(1 - 2 * i / n_views)
        theta = np.pi * (1 + 5 ** 0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    d = distance * radius
    half = np.arcsin(min(0.999, radius / d)) * margin
    focal = (size / 2.0) / np.tan(half)
    cams = []
    for v in dirs:
        up = np.array([0.0, 0.0, 1.0]) if abs(v[2]) < 0.99 else np.array([0.0, 1.0, 0.0])
        cams.append(Camera.look_at(center + d * v, center, up, focal, size, size))
    return cams


def sphere_depth(camera: Camera, center=(0.0, 0.0, 0.0), radius: float = 1.0,
                 backdrop: float | None = None) -> DepthMap:
    """Exact camera-frame depth of a sphere at every pixel center.

    Rays that miss are invalid (0) unless ``backdrop`` is given: then the scene
    sits inside a concentric backdrop sphere of that radius which catches them.
    """
    center = np.asarray(center, dtype=np.float64)
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    uv = np.stack([xs, ys], axis=-1).astype(np.float64)
    o, d = camera.pixel_rays(uv)
    oc = o - center
    b = np.einsum("...i,...i->...", oc, d)
    c = np.einsum("...i,...i->...", oc, oc) - radius ** 2
    disc = b * b - c
    hit = disc >= 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    hit &= t > 0
    if backdrop is not None:
        c_bg = np.einsum("...i,...i->...", oc, oc) - backdrop ** 2
        t_bg = -b + np.sqrt(np.maximum(b * b - c_bg, 0.0))
        t = np.where(hit, t, t_bg)
        hit = hit | (t_bg > 0)
    pts = o + t[..., None] * d
    depth = camera.project(pts).depth
    return DepthMap(np.where(hit, depth, 0.0))


def sphere_points(n: int, center=(0.0, 0.0, 0.0), radius: float = 1.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    return np.asarray(center) + radius * p / np.linalg.norm(p, axis=1, keepdims=True)


def sphere_mesh(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Icosphere with outward-wound faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.asarray(center) + radius * np.array(verts), np.array(faces, dtype=np.int64))


def random_occupancy(spec: GridSpec, fraction: float, seed: int = 0) -> OccupancyField:
    """Exactly ``round(fraction * K^3)`` occupied voxels chosen uniformly at random."""
    rng = np.random.default_rng(seed)
    n = int(round(fraction * spec.n_coarse))
    flat = np.zeros(spec.n_coarse, dtype=np.uint8)
    flat[rng.choice(spec.n_coarse, size=n, replace=False)] = 1
    return OccupancyField(spec, flat.reshape(spec.shape), Kind.BINARY)


def shell_occupancy(spec: GridSpec, center=(0.0, 0.0, 0.0), radius: float = 1.0, thickness: float | None = None) -> OccupancyField:
    """Coarse voxels whose center lies within ``thickness`` of a sphere surface."""
    from .geometry import grid_centers

    c = grid_centers(spec.bbox, spec.K)
    if thickness is None:
        thickness = float(np.max(spec.coarse_edge))
    dist = np.abs(np.linalg.norm(c - np.asarray(center), axis=-1) - radius)
    return OccupancyField(spec, (dist <= thickness).astype(np.uint8), Kind.BINARY)


def random_feature_maps(cameras, channels: int, scale: float = 0.5, seed: int = 0, smooth: bool = True) -> list[FeatureMap]:
    rng = np.random.default_rng(seed)
    maps = []
    for cam in cameras:
        h = max(1, int(round(cam.height * scale)))
        w = max(1, int(round(cam.width * scale)))
        data = rng.normal(size=(channels, h, w))
        if smooth:
            from scipy.ndimage import gaussian_filter

            data = gaussian_filter(data, sigma=(0, 1.5, 1.5))
        maps.append(FeatureMap(data.astype(np.float32), scale))
    return maps


def default_sphere_bbox(radius: float = 1.0, pad: float = 1.25) -> BoundingBox:
    return BoundingBox([-pad * radius] * 3, [pad * radius] * 3)


def write_sphere_scene(directory, size: int = 64, n_views: int = 8, K: int = 32, s: int = 4,
                       C_img: int = 4, radius: float = 1.0, seed: int = 0, logit_noise: float = 0.5,
                       mesh_subdivisions: int = 5) -> Path:
    """Write a complete synthetic scene and its ``scene.json``; returns the config path.

    Contents: cameras, exact depth maps, ground-truth occupancy, noisy occupancy
    logits, random feature maps at half resolution, random renderer weights and
    a fine icosphere as the ground-truth mesh.
    """
    from .config import SceneConfig
    from .geometry import save_cameras
    from .occupancy import gt_occupancy
    from .renderer import RendererWeights
    from .tensorio import write_pfm, write_ply, write_tensor

    out = Path(directory)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    box = default_sphere_bbox(radius)
    spec = GridSpec(box, K, s)
    cams = sphere_cameras(radius=radius, n_views=n_views, size=size)
    save_cameras(out / "cameras.json", cams)
    depths = [sphere_depth(c, radius=radius) for c in cams]
    views = []
    for i, d in enumerate(depths):
        write_pfm(out / "depth" / f"view_{i:03d}.pfm", d)
        views.append({"depth": f"depth/view_{i:03d}.pfm", "camera": "cameras.json", "index": i})

    gt = gt_occupancy(spec, depths, cams)
    write_tensor(out / "gt_occupancy.svt", gt.values)
    rng = np.random.default_rng(seed)
    logits = np.where(gt.mask, 3.0, -4.0) + logit_noise * rng.standard_normal(spec.shape)
    write_tensor(out / "logits.svt", logits.astype(np.float32))

    maps = random_feature_maps(cams, C_img, scale=0.5, seed=seed)
    write_tensor(out / "features.svt", np.stack([m.data for m in maps]))
    bands = 10
    d_in = 2 * C_img + 2 * C_img + 6 * bands
    RendererWeights.random(d_in, d=16, hidden=(16,), bands=bands, seed=seed).save(out / "weights")
    write_ply(out / "gt_mesh.ply", sphere_mesh(radius, mesh_subdivisions))

    cfg = SceneConfig(
        bbox_min=tuple(box.min_corner), bbox_max=tuple(box.max_corner), K=K, s=s, C_img=C_img,
        bands=bands, virtual_shift=0.025 * radius, eval_density=1e4 / radius ** 2, seed=seed,
        cameras="cameras.json", features="features.svt", logits="logits.svt",
        gt_occupancy="gt_occupancy.svt", occupancy="occupancy.svt", bundle="bundle",
        weights="weights", render_dir="render", tsdf="tsdf.svt", mesh="mesh.ply",
        gt_mesh="gt_mesh.ply", views=views,
    )
    path = out / "scene.json"
    cfg.save(path)
    return path
