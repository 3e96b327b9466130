"""Library-level pipeline steps behind the CLI commands.

Each function takes in-memory objects and returns results; file handling and
argument parsing live in ``cli``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Sequence

import numpy as np

from .features import FeatureMap
from .fusion import TsdfVolume, integrate
from .geometry import Camera, GridSpec, Ray
from .occupancy import OccupancyField, binarize, dilate, gt_occupancy, occupancy_metrics, focal_loss, sigmoid
from .ray_sampling import Mode, sample_ray
from .renderer import RendererWeights, render_rays, sample_point_features
from .sparse_volume import SparseFeatureVolume
from .tensorio import DepthMap

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# occupancy


def predicted_occupancy(spec: GridSpec, raw: np.ndarray, tau: float, from_logits: bool = True) -> OccupancyField:
    """``dilate(binarize(O, tau))`` from network logits (or probabilities)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != spec.shape:
        raise ValueError(f"occupancy input has shape {raw.shape}, grid is {spec.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("occupancy input contains non-finite values")
    prob = OccupancyField.probability(spec, sigmoid(raw) if from_logits else raw)
    return dilate(binarize(prob, tau))


def occupancy_report(spec: GridSpec, raw: np.ndarray, pred: OccupancyField, gt: OccupancyField | None,
                     gamma: float, from_logits: bool = True) -> dict:
    """Occupied count and space efficiency; precision, recall and focal loss when ``gt`` is given."""
    report = {"n_occupied": pred.n_occupied, "Space Efficiency": 100.0 * pred.n_occupied / spec.n_coarse}
    if gt is not None:
        prob = OccupancyField.probability(spec, sigmoid(raw) if from_logits else raw)
        m = occupancy_metrics(pred, gt)
        report.update(m.as_percentages())
        report.update({"true_positive": m.true_positive, "false_positive": m.false_positive,
                       "false_negative": m.false_negative, "focal_loss": focal_loss(prob, gt, gamma)})
    return report


# ---------------------------------------------------------------------------
# rendering


class RenderedView(NamedTuple):
    camera: Camera
    depth: np.ndarray  # (H, W) camera-frame depth, 0 where nothing was hit
    color: np.ndarray  # (H, W, 3) in [0, 1]
    hit: np.ndarray  # (H, W) bool


def _render_chunk(rows, camera, volume, occ, maps, cameras, weights, n_samples, mode, seed, view_id):
    uv = np.stack([rows % camera.width, rows // camera.width], axis=-1).astype(np.float64)
    origins, dirs = camera.pixel_rays(uv)
    R = len(rows)
    ts = np.zeros((R, n_samples))
    mask = np.zeros((R, n_samples), dtype=bool)
    for i in range(R):
        ray = Ray(origins[i], dirs[i])
        rng = np.random.default_rng((seed, view_id, int(rows[i])))
        batch = sample_ray(ray, occ, n_samples, mode, rng=rng)
        m = len(batch.ts)
        ts[i, :m] = batch.ts
        mask[i, :m] = True
    color = np.zeros((R, 3))
    depth = np.zeros(R)
    hit = mask.any(axis=1)
    if hit.any():
        sel = np.flatnonzero(hit)
        pts = origins[sel, None, :] + ts[sel, :, None] * dirs[sel, None, :]
        feats = sample_point_features(pts.reshape(-1, 3), volume, maps, cameras,
                                      weights.pos_enc_bands, weights.proj_attention).f_r
        out = render_rays(ts[sel], feats.reshape(len(sel), n_samples, -1), weights, mask[sel])
        color[sel] = out.color
        # ray parameter -> camera-frame depth
        depth[sel] = camera.project(origins[sel] + out.depth[:, None] * dirs[sel]).depth
    return depth, color, hit


def render_view(camera: Camera, volume: SparseFeatureVolume, maps: Sequence[FeatureMap],
                cameras: Sequence[Camera], weights: RendererWeights, n_samples: int = 64,
                mode: Mode | str = Mode.STRATIFIED, seed: int = 0, view_id: int = 0,
                threads: int = 1, chunk: int = 4096) -> RenderedView:
    """Render every pixel of ``camera``: occupancy-confined samples, then attention pooling.

    Stratified jitter is seeded per (seed, view, pixel), so the result does not
    depend on ``threads`` or ``chunk``.
    """
    expected = volume.channels + 2 * (maps[0].channels if maps else 0) + 6 * weights.pos_enc_bands
    if expected != weights.d_in:
        raise ValueError(f"renderer weights expect {weights.d_in} input dims, scene provides {expected}")
    occ = volume.occupancy
    mode = Mode(mode)
    n_pix = camera.width * camera.height
    chunks = [np.arange(a, min(a + chunk, n_pix)) for a in range(0, n_pix, chunk)]
    args = (camera, volume, occ, maps, cameras, weights, n_samples, mode, seed, view_id)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda rows: _render_chunk(rows, *args), chunks))
    else:
        parts = [_render_chunk(rows, *args) for rows in chunks]
    depth = np.concatenate([p[0] for p in parts]).reshape(camera.height, camera.width)
    color = np.concatenate([p[1] for p in parts]).reshape(camera.height, camera.width, 3)
    hit = np.concatenate([p[2] for p in parts]).reshape(camera.height, camera.width)
    return RenderedView(camera, depth, color, hit)


# ---------------------------------------------------------------------------
# fusion


def fuse(views: Sequence[tuple[DepthMap, Camera]], tsdf: TsdfVolume) -> TsdfVolume:
    """Integrate the views in order into a copy of ``tsdf``."""
    if not views:
        raise ValueError("no depth maps to fuse")
    out = tsdf.copy()
    for depth, cam in views:
        integrate(out, depth, cam, in_place=True)
    return out


def ground_truth_occupancy(spec: GridSpec, views: Sequence[tuple[DepthMap, Camera]]) -> OccupancyField:
    return gt_occupancy(spec, [d for d, _ in views], [c for _, c in views])
