"""Seeded memory / latency benchmark of the sparse volume.

Byte counts are exact arithmetic for the requested channel count. Timings use
a real volume built with ``timing_channels`` channels, which keeps large grids
within desk memory. Query cost does not depend on the occupied count, and
traversal cost does not depend on channels at all.
"""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from .geometry import BoundingBox, GridSpec, Ray
from .ray_sampling import traverse
from .sparse_volume import SparseFeatureVolume, build_lookup, memory_report
from .synthetic import random_occupancy

CSV_FIELDS = ("resolution", "s", "channels", "occupancy_fraction", "n_occupied", "dense_bytes",
              "sparse_bytes", "ratio", "payload_ratio", "query_ns_per_op", "traversal_rays_per_s")


def random_volume(spec: GridSpec, fraction: float, channels: int, seed: int = 0) -> SparseFeatureVolume:
    occ = random_occupancy(spec, fraction, seed)
    lookup = build_lookup(occ)
    rng = np.random.default_rng(seed + 1)
    n = int((lookup >= 0).sum())
    mv = rng.standard_normal((n, channels, spec.s ** 3), dtype=np.float32)
    return SparseFeatureVolume(spec, lookup, mv)


def time_queries(vol: SparseFeatureVolume, n_points: int = 100_000, repeats: int = 5, seed: int = 0) -> float:
    """Median wall time per query point, in nanoseconds."""
    rng = np.random.default_rng(seed)
    box = vol.spec.bbox
    pts = box.min_corner + rng.random((n_points, 3)) * box.size
    vol.query_points(pts[:1000])  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        vol.query_points(pts)
        samples.append((time.perf_counter() - t0) / n_points * 1e9)
    return float(np.median(samples))


def random_rays(box: BoundingBox, n: int, seed: int = 0) -> list[Ray]:
    """Rays from outside the box aimed at uniform points inside it."""
    rng = np.random.default_rng(seed)
    rays = []
    for _ in range(n):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        target = box.min_corner + rng.random(3) * box.size
        rays.append(Ray(target - box.diagonal * d, d))
    return rays


def time_traversal(occ, n_rays: int = 200, seed: int = 0) -> float:
    rays = random_rays(occ.spec.bbox, n_rays, seed)
    t0 = time.perf_counter()
    for ray in rays:
        traverse(ray, occ)
    return n_rays / (time.perf_counter() - t0)


def run(resolutions, fraction: float = 0.0189, s: int = 4, channels: int = 32, seed: int = 0,
        timing_channels: int = 4, n_queries: int = 100_000, n_rays: int = 200,
        bbox: BoundingBox | None = None) -> list[dict]:
    box = bbox or BoundingBox([-1.0] * 3, [1.0] * 3)
    rows = []
    for K in resolutions:
        spec = GridSpec(box, int(K), s)
        vol = random_volume(spec, fraction, timing_channels, seed)
        rep = memory_report(spec=spec, n_occupied=vol.n_occupied, channels=channels)
        rows.append({
            "resolution": int(K),
            "s": s,
            "channels": channels,
            "occupancy_fraction": rep["occupancy_fraction"],
            "n_occupied": rep["n_occupied"],
            "dense_bytes": rep["dense_equivalent_bytes"],
            "sparse_bytes": rep["sparse_bytes"],
            "ratio": rep["ratio"],
            "payload_ratio": rep["payload_ratio"],
            "query_ns_per_op": time_queries(vol, n_queries, seed=seed),
            "traversal_rays_per_s": time_traversal(vol.occupancy, n_rays, seed),
        })
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
