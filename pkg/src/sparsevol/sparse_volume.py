"""Supersampled sparse feature volumes with a dense lookup table.

Each occupied coarse voxel owns an ``s x s x s`` mini-volume of C-channel
features stored at fine-voxel centers. Layout:

* ``lookup``: int32 ``(Kx, Ky, Kz)``; ``-1`` for empty voxels, otherwise the
  mini-volume index. Indices follow C-order (x slowest, z fastest) over the
  occupied voxels.
* ``minivolumes``: float32 ``(N, C, s**3)``; the last axis is the local
  coordinate flattened as ``(lx * s + ly) * s + lz``.

Queries interpolate trilinearly on the global lattice of fine-voxel centers.
Every lattice vertex is resolved on its own through the lookup table, so a
cell straddling an empty coarse voxel blends real features with the zero
dummy feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .features import FeatureMap, aggregate_points
from .geometry import Camera, GridSpec
from .occupancy import Kind, OccupancyField
from .tensorio import FormatError, read_tensor, write_tensor

LOOKUP_DTYPE = np.int32
DEFAULT_DENSIFY_BUDGET = 1 << 31  # bytes


class MemoryBudgetError(MemoryError):
    """Refusal to materialize a dense grid larger than the configured budget."""


def build_lookup(occ: OccupancyField) -> np.ndarray:
    """Number occupied voxels 0..N-1 in C-order scan; everything else is -1."""
    if occ.kind is not Kind.BINARY:
        raise ValueError("lookup needs a binary occupancy field")
    mask = occ.mask
    table = np.full(mask.shape, -1, dtype=LOOKUP_DTYPE)
    table[mask] = np.arange(int(mask.sum()), dtype=LOOKUP_DTYPE)
    return table


def local_offsets(s: int) -> np.ndarray:
    """Local coordinates ``(s**3, 3)`` in storage order (z fastest)."""
    r = np.arange(s)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def local_index(local: np.ndarray, s: int) -> np.ndarray:
    return (local[..., 0] * s + local[..., 1]) * s + local[..., 2]


class QueryResult(NamedTuple):
    feature: np.ndarray
    inside: bool


@dataclass(frozen=True, eq=False)
class SparseFeatureVolume:
    spec: GridSpec
    lookup: np.ndarray
    minivolumes: np.ndarray

    def __post_init__(self):
        lut = np.asarray(self.lookup)
        mv = np.asarray(self.minivolumes, dtype=np.float32)
        if lut.shape != self.spec.shape:
            raise ValueError(f"lookup shape {lut.shape} does not match grid {self.spec.shape}")
        lut = lut.astype(LOOKUP_DTYPE, copy=False)
        if mv.ndim != 3 or mv.shape[2] != self.spec.s ** 3:
            raise ValueError(f"minivolumes must be (N, C, {self.spec.s ** 3}), got {mv.shape}")
        n = mv.shape[0]
        occupied = np.sort(lut[lut >= 0])
        if len(occupied) != n or not np.array_equal(occupied, np.arange(n)):
            raise ValueError("lookup must map occupied voxels one-to-one onto 0..N-1")
        if np.any(lut < -1):
            raise ValueError("lookup entries must be -1 or a mini-volume index")
        if not np.all(np.isfinite(mv)):
            raise ValueError("mini-volume features must be finite")
        lut.flags.writeable = False
        mv.flags.writeable = False
        object.__setattr__(self, "lookup", lut)
        object.__setattr__(self, "minivolumes", mv)

    @property
    def n_occupied(self) -> int:
        return self.minivolumes.shape[0]

    @property
    def channels(self) -> int:
        return self.minivolumes.shape[1]

    @property
    def dummy(self) -> np.ndarray:
        return np.zeros(self.channels, dtype=np.float32)

    @property
    def occupancy(self) -> OccupancyField:
        return OccupancyField(self.spec, (self.lookup >= 0).astype(np.uint8), Kind.BINARY)

    def occupied_coords(self) -> np.ndarray:
        """Coarse coordinates ``(N, 3)`` ordered by mini-volume index."""
        return np.argwhere(self.lookup >= 0)

    # -- querying -----------------------------------------------------------

    def query_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear features ``(P, C)`` and ``inside`` flags ``(P,)`` for world points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        spec = self.spec
        res = np.asarray(spec.fine_shape)
        s = spec.s
        in_box = spec.bbox.contains(pts)

        g = (pts - spec.bbox.min_corner) / spec.fine_edge - 0.5
        g = np.clip(np.nan_to_num(g), 0.0, res - 1.0)
        i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(res - 2, 0))
        frac = g - i0
        i1 = np.minimum(i0 + 1, res - 1)

        out = np.zeros((len(pts), self.channels), dtype=np.float64)
        all_hit = in_box.copy()
        mv = self.minivolumes
        for corner in range(8):
            bits = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], dtype=bool)
            vg = np.where(bits, i1, i0)
            w = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
            vo, vl = np.divmod(vg, s)
            n = self.lookup[vo[:, 0], vo[:, 1], vo[:, 2]]
            hit = n >= 0
            all_hit &= hit
            if self.n_occupied == 0:
                continue
            feat = mv[np.maximum(n, 0), :, local_index(vl, s)]
            out += np.where(hit[:, None], feat * w[:, None], 0.0)
        out[~in_box] = 0.0
        return out, all_hit

    def query(self, point) -> QueryResult:
        f, inside = self.query_points(np.asarray(point, dtype=np.float64).reshape(1, 3))
        return QueryResult(f[0], bool(inside[0]))


def fine_centers(spec: GridSpec, coarse: np.ndarray) -> np.ndarray:
    """World centers ``(len(coarse), s**3, 3)`` of the fine voxels inside coarse voxels."""
    vg = coarse[:, None, :] * spec.s + local_offsets(spec.s)[None]
    return spec.bbox.min_corner + (vg + 0.5) * spec.fine_edge


def build_sparse_volume(
    occ: OccupancyField,
    spec: GridSpec,
    maps: Sequence[FeatureMap],
    cameras: Sequence[Camera],
    chunk: int = 1 << 16,
) -> SparseFeatureVolume:
    """MeanVar features at every fine-voxel center of every occupied coarse voxel."""
    if occ.spec.shape != spec.shape:
        raise ValueError("occupancy grid does not match the volume grid")
    lookup = build_lookup(occ)
    coarse = np.argwhere(lookup >= 0)
    channels = 2 * maps[0].channels if maps else 0
    mv = np.zeros((len(coarse), channels, spec.s ** 3), dtype=np.float32)
    per = max(1, chunk // spec.s ** 3)
    for start in range(0, len(coarse), per):
        block = coarse[start:start + per]
        pts = fine_centers(spec, block).reshape(-1, 3)
        feats, _ = aggregate_points(pts, maps, cameras)
        mv[start:start + len(block)] = feats.reshape(len(block), spec.s ** 3, channels).transpose(0, 2, 1)
    return SparseFeatureVolume(spec, lookup, mv)


def sparsify(dense: np.ndarray, occ: OccupancyField, spec: GridSpec | None = None) -> SparseFeatureVolume:
    """Cut a dense fine grid ``(sKx, sKy, sKz, C)`` down to the occupied mini-volumes."""
    spec = spec or occ.spec
    dense = np.asarray(dense)
    if dense.shape[:3] != spec.fine_shape:
        raise ValueError(f"dense grid {dense.shape[:3]} does not match fine shape {spec.fine_shape}")
    lookup = build_lookup(occ)
    coarse = np.argwhere(lookup >= 0)
    vg = coarse[:, None, :] * spec.s + local_offsets(spec.s)[None]
    mv = dense[vg[..., 0], vg[..., 1], vg[..., 2]]  # (N, s^3, C)
    return SparseFeatureVolume(spec, lookup, mv.transpose(0, 2, 1))


def densify(vol: SparseFeatureVolume, budget_bytes: int = DEFAULT_DENSIFY_BUDGET) -> np.ndarray:
    """Materialize ``(sKx, sKy, sKz, C)`` with zeros in empty space. Test-scale only."""
    shape = vol.spec.fine_shape + (vol.channels,)
    need = int(np.prod(shape, dtype=np.int64)) * 4
    if need > budget_bytes:
        raise MemoryBudgetError(f"dense grid needs {need} bytes, budget is {budget_bytes}")
    dense = np.zeros(shape, dtype=np.float32)
    coarse = vol.occupied_coords()
    vg = coarse[:, None, :] * vol.spec.s + local_offsets(vol.spec.s)[None]
    dense[vg[..., 0], vg[..., 1], vg[..., 2]] = vol.minivolumes.transpose(0, 2, 1)
    return dense


def memory_report(vol: SparseFeatureVolume | None = None, *, spec: GridSpec | None = None,
                  n_occupied: int | None = None, channels: int | None = None, itemsize: int = 4) -> dict:
    """Byte accounting of the sparse layout against an equivalent dense ``(sK)^3 x C`` grid.

    Works from a volume or, for planning, from ``spec``/``n_occupied``/``channels``.
    """
    if vol is not None:
        spec, n_occupied, channels = vol.spec, vol.n_occupied, vol.channels
        itemsize = vol.minivolumes.dtype.itemsize
    if spec is None or n_occupied is None or channels is None:
        raise ValueError("need a volume or spec, n_occupied and channels")
    payload = n_occupied * channels * spec.s ** 3 * itemsize
    lookup = spec.n_coarse * np.dtype(LOOKUP_DTYPE).itemsize
    dense = int(np.prod(spec.fine_shape, dtype=np.int64)) * channels * itemsize
    sparse = payload + lookup
    return {
        "n_occupied": int(n_occupied),
        "occupancy_fraction": n_occupied / spec.n_coarse,
        "payload_bytes": int(payload),
        "lookup_bytes": int(lookup),
        "sparse_bytes": int(sparse),
        "dense_equivalent_bytes": int(dense),
        "ratio": dense / sparse,
        "payload_ratio": dense / payload if payload else float("inf"),
    }


# ---------------------------------------------------------------------------
# bundle directory: spec.json + lookup.svt + minivolumes.svt

BUNDLE_VERSION = 1


def save_bundle(vol: SparseFeatureVolume, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "lookup.svt", vol.lookup.astype(np.int32))
    write_tensor(d / "minivolumes.svt", vol.minivolumes.astype(np.float32))
    meta = {
        "version": BUNDLE_VERSION,
        "grid": vol.spec.to_dict(),
        "channels": vol.channels,
        "n_occupied": vol.n_occupied,
        "layout": {"coarse_order": "C (x slowest)", "local_order": "(lx*s+ly)*s+lz"},
    }
    (d / "spec.json").write_text(json.dumps(meta, indent=2))


def load_bundle(directory) -> SparseFeatureVolume:
    d = Path(directory)
    meta = json.loads((d / "spec.json").read_text())
    spec = GridSpec.from_dict(meta["grid"])
    lookup = read_tensor(d / "lookup.svt")
    mv = read_tensor(d / "minivolumes.svt")
    if mv.ndim == 2 and mv.shape[0] == 0:
        mv = mv.reshape(0, meta["channels"], spec.s ** 3)
    try:
        return SparseFeatureVolume(spec, lookup, mv)
    except ValueError as exc:
        raise FormatError(f"inconsistent sparse volume bundle: {exc}") from None
