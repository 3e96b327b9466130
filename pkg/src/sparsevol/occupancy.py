"""Dense coarse occupancy fields.

Ground truth from depth maps, focal loss, thresholding, the 3x3x3 count
dilation and precision / recall / space-efficiency metrics.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Camera, GridSpec, coarse_index
from .tensorio import DepthMap

FOCAL_EPS = 1e-7
DILATE_FRACTION = 0.1


class Kind(enum.Enum):
    PROBABILITY = "probability"
    BINARY = "binary"


@dataclass(frozen=True, eq=False)
class OccupancyField:
    spec: GridSpec
    values: np.ndarray
    kind: Kind = Kind.BINARY

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.spec.shape:
            raise ValueError(f"occupancy shape {v.shape} does not match grid {self.spec.shape}")
        if self.kind is Kind.BINARY:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("binary occupancy must contain only 0 and 1")
            v = v.astype(np.uint8)
        else:
            v = v.astype(np.float64)
            if not np.all((v >= 0) & (v <= 1)):
                raise ValueError("occupancy probabilities must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def binary(cls, spec: GridSpec, values) -> "OccupancyField":
        return cls(spec, np.asarray(values).astype(bool).astype(np.uint8), Kind.BINARY)

    @classmethod
    def probability(cls, spec: GridSpec, values) -> "OccupancyField":
        return cls(spec, values, Kind.PROBABILITY)

    @property
    def mask(self) -> np.ndarray:
        if self.kind is not Kind.BINARY:
            raise ValueError("mask is only defined for binary fields")
        return self.values.astype(bool)

    @property
    def n_occupied(self) -> int:
        return int(np.count_nonzero(self.values)) if self.kind is Kind.BINARY else int(np.count_nonzero(self.values >= 0.5))


def _require(field: OccupancyField, kind: Kind, what: str) -> None:
    if field.kind is not kind:
        raise ValueError(f"{what} must be a {kind.value} occupancy field, got {field.kind.value}")


def _same_grid(a: OccupancyField, b: OccupancyField) -> None:
    if a.values.shape != b.values.shape:
        raise ValueError(f"grid shapes differ: {a.values.shape} vs {b.values.shape}")


def depth_points(depth: DepthMap, camera: Camera) -> np.ndarray:
    """World points of all valid pixels of a depth map."""
    ys, xs = np.nonzero(depth.valid)
    uv = np.stack([xs, ys], axis=-1).astype(np.float64)
    return camera.unproject(uv, depth.values[ys, xs].astype(np.float64))


def gt_occupancy(spec: GridSpec, depth_maps: Sequence[DepthMap], cameras: Sequence[Camera]) -> OccupancyField:
    """Mark every coarse voxel hit by at least one back-projected valid depth pixel."""
    if len(depth_maps) == 0:
        raise ValueError("at least one view is required")
    if len(depth_maps) != len(cameras):
        raise ValueError("depth maps and cameras must be paired")
    occ = np.zeros(spec.shape, dtype=np.uint8)
    for depth, cam in zip(depth_maps, cameras):
        if (depth.width, depth.height) != (cam.width, cam.height):
            raise ValueError("depth map size does not match its camera")
        pts = depth_points(depth, cam)
        idx, inside = coarse_index(spec, pts)
        idx = idx[inside]
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return OccupancyField(spec, occ, Kind.BINARY)


def focal_loss(pred: OccupancyField, gt: OccupancyField, gamma: float = 2.0) -> float:
    """Summed focal loss ``-sum (1 - p)^gamma log p`` with p the probability of the true class."""
    _require(pred, Kind.PROBABILITY, "pred")
    _require(gt, Kind.BINARY, "gt")
    _same_grid(pred, gt)
    O = np.clip(pred.values, FOCAL_EPS, 1.0 - FOCAL_EPS)
    p = np.where(gt.values == 1, O, 1.0 - O)
    return float(-np.sum((1.0 - p) ** gamma * np.log(p)))


def binarize(pred: OccupancyField, tau: float = 0.1) -> OccupancyField:
    _require(pred, Kind.PROBABILITY, "pred")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    return OccupancyField(pred.spec, (pred.values >= tau).astype(np.uint8), Kind.BINARY)


def neighbor_count(values: np.ndarray) -> np.ndarray:
    """Occupied count over the 3x3x3 neighborhood (center included, zero padded)."""
    v = np.asarray(values, dtype=np.int32)
    p = np.pad(v, 1)
    X, Y, Z = v.shape
    out = np.zeros_like(v)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                out += p[dx:dx + X, dy:dy + Y, dz:dz + Z]
    return out


def dilate(binary: OccupancyField, union_with_input: bool = False) -> OccupancyField:
    """Re-threshold the 3x3x3 neighborhood count at ``27 * 0.1`` (i.e. count >= 3).

    With ``union_with_input`` the input occupancy is kept as well, so the
    operation only ever adds voxels.
    """
    _require(binary, Kind.BINARY, "input")
    out = neighbor_count(binary.values) >= 27 * DILATE_FRACTION
    if union_with_input:
        out |= binary.mask
    return OccupancyField(binary.spec, out.astype(np.uint8), Kind.BINARY)


@dataclass(frozen=True)
class OccupancyMetrics:
    precision: float
    recall: float
    space_efficiency: float
    true_positive: int = 0
    false_positive: int = 0
    false_negative: int = 0

    def as_percentages(self) -> dict:
        """Table-style report (values in percent)."""
        return {
            "Precision": 100.0 * self.precision,
            "Recall": 100.0 * self.recall,
            "Space Efficiency": 100.0 * self.space_efficiency,
        }


def occupancy_metrics(pred: OccupancyField, gt: OccupancyField) -> OccupancyMetrics:
    _require(pred, Kind.BINARY, "pred")
    _require(gt, Kind.BINARY, "gt")
    _same_grid(pred, gt)
    p, g = pred.mask, gt.mask
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return OccupancyMetrics(precision, recall, np.count_nonzero(p) / p.size, tp, fp, fn)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))
