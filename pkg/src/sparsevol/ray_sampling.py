"""Ray sampling confined to occupied coarse voxels."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import Ray, ray_aabb, world_to_voxel
from .occupancy import OccupancyField

# runs of occupied voxels whose t-intervals touch closer than this are merged
_MERGE_GAP = 1e-9


class Fragment(NamedTuple):
    t_enter: float
    t_exit: float
    coords: np.ndarray  # (k, 3) occupied coarse voxels, front to back

    @property
    def length(self) -> float:
        return self.t_exit - self.t_enter


class Mode(enum.Enum):
    UNIFORM = "uniform"
    STRATIFIED = "stratified"


@dataclass(eq=False)
class RaySampleBatch:
    ray: Ray
    ts: np.ndarray
    fragments: list[Fragment] = field(default_factory=list)

    @property
    def points(self) -> np.ndarray:
        return self.ray.at(self.ts)

    def __len__(self):
        return len(self.ts)


def walk_voxels(ray: Ray, bbox, res):
    """Yield ``(t_enter, t_exit, index)`` for every voxel the ray crosses, front to back.

    Incremental grid traversal: one voxel step per iteration, advancing along the
    axis whose next boundary crossing is nearest.
    """
    hit = ray_aabb(ray, bbox)
    if hit is None:
        return
    t0, t1 = hit
    res = np.broadcast_to(np.asarray(res, dtype=np.int64), (3,))
    lo = bbox.min_corner
    edge = bbox.size / res
    o, d = ray.origin, ray.direction

    tmid = t0 + 0.5 * (t1 - t0) if t1 - t0 < 1e-12 else t0
    idx, _ = world_to_voxel(bbox, res, ray.at(tmid))
    idx = [int(i) for i in idx]
    step = [0, 0, 0]
    t_next = [np.inf, np.inf, np.inf]
    t_delta = [np.inf, np.inf, np.inf]
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_next[a] = (lo[a] + (idx[a] + 1) * edge[a] - o[a]) / d[a]
            t_delta[a] = edge[a] / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_next[a] = (lo[a] + idx[a] * edge[a] - o[a]) / d[a]
            t_delta[a] = -edge[a] / d[a]

    t = t0
    while True:
        a = int(np.argmin(t_next))
        t_out = min(t_next[a], t1)
        if t_out > t:
            yield t, t_out, tuple(idx)
        if t_next[a] >= t1:
            return
        t = t_out
        idx[a] += step[a]
        if not 0 <= idx[a] < res[a]:
            return
        t_next[a] += t_delta[a]


def traverse(ray: Ray, occ: OccupancyField) -> list[Fragment]:
    """Ordered fragments of the ray inside occupied coarse voxels; touching runs merged."""
    mask = occ.mask
    frags: list[list] = []
    for t_in, t_out, idx in walk_voxels(ray, occ.spec.bbox, occ.spec.K):
        if not mask[idx]:
            continue
        if frags and t_in - frags[-1][1] <= _MERGE_GAP:
            frags[-1][1] = t_out
            frags[-1][2].append(idx)
        else:
            frags.append([t_in, t_out, [idx]])
    return [Fragment(float(a), float(b), np.asarray(c, dtype=np.int64)) for a, b, c in frags]


def allocate(lengths, n_samples: int) -> np.ndarray:
    """Split ``n_samples`` proportionally to ``lengths`` with largest-remainder rounding."""
    lengths = np.asarray(lengths, dtype=np.float64)
    total = lengths.sum()
    if len(lengths) == 0 or total <= 0:
        return np.zeros(len(lengths), dtype=np.int64)
    quota = n_samples * lengths / total
    counts = np.floor(quota).astype(np.int64)
    left = n_samples - counts.sum()
    if left > 0:
        # stable sort keeps earlier fragments first on ties
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:left]] += 1
    return counts


def sample(fragments, n_samples: int, mode: Mode | str = Mode.STRATIFIED, seed: int | None = 0,
           ray: Ray | None = None, rng: np.random.Generator | None = None) -> RaySampleBatch:
    """Distribute ``n_samples`` over the fragments and place them inside per-fragment strata."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mode = Mode(mode)
    fragments = [f for f in fragments if f.t_exit > f.t_enter]
    counts = allocate([f.length for f in fragments], n_samples)
    if mode is Mode.STRATIFIED and rng is None:
        rng = np.random.default_rng(seed)
    ts = []
    for frag, m in zip(fragments, counts):
        if m == 0:
            continue
        width = frag.length / m
        if mode is Mode.UNIFORM:
            u = np.full(m, 0.5)
        else:
            u = rng.random(m)
        ts.append(frag.t_enter + (np.arange(m) + u) * width)
    ts = np.concatenate(ts) if ts else np.zeros(0)
    return RaySampleBatch(ray if ray is not None else Ray([0, 0, 0], [0, 0, 1]), ts, fragments)


def sample_ray(ray: Ray, occ: OccupancyField, n_samples: int, mode: Mode | str = Mode.STRATIFIED,
               seed: int | None = 0, rng: np.random.Generator | None = None) -> RaySampleBatch:
    return sample(traverse(ray, occ), n_samples, mode, seed=seed, ray=ray, rng=rng)
