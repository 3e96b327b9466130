"""Surface metrics: symmetric Chamfer distance and normal-consistency AUC.

AUC@max_angle is the mean over vertices of ``max(0, 1 - angle / max_angle)``,
which equals the area under the cumulative-recall curve on ``[0, max_angle]``
normalized by ``max_angle``, reported in percent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .tensorio import TriangleMesh


@dataclass(frozen=True)
class ChamferReport:
    accuracy: float  # mean pred -> gt distance
    completeness: float  # mean gt -> pred distance
    chamfer: float


@dataclass(frozen=True)
class NormalConsistencyReport:
    angles: np.ndarray  # degrees, per used pred vertex
    auc: float  # percent
    max_angle: float
    n_degenerate: int


def _points(x) -> np.ndarray:
    if isinstance(x, TriangleMesh):
        x = x.vertices
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point set is empty")
    return pts


def chamfer(pred, gt) -> ChamferReport:
    p, g = _points(pred), _points(gt)
    acc = float(cKDTree(g).query(p)[0].mean())
    comp = float(cKDTree(p).query(g)[0].mean())
    return ChamferReport(acc, comp, 0.5 * (acc + comp))


def sample_surface(mesh: TriangleMesh, n_points: int | None = None, density: float | None = None,
                   seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples; ``density`` is points per unit area."""
    if mesh.n_faces == 0:
        return np.asarray(mesh.vertices, dtype=np.float64)
    v = np.asarray(mesh.vertices, dtype=np.float64)
    tri = v[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if n_points is None:
        n_points = max(1, int(round((density if density is not None else 1.0) * area.sum())))
    rng = np.random.default_rng(seed)
    if area.sum() <= 0:
        return v[rng.integers(0, len(v), n_points)]
    face = rng.choice(len(area), size=n_points, p=area / area.sum())
    r1, r2 = rng.random(n_points), rng.random(n_points)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    t = tri[face]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


def vertex_normals(mesh: TriangleMesh, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals and a validity mask (False for degenerate vertices).

    Falls back to stored normals for meshes without faces.
    """
    if mesh.n_faces == 0:
        if mesh.normals is None:
            raise ValueError("mesh has neither faces nor normals")
        n = np.asarray(mesh.normals, dtype=np.float64)
    else:
        v = np.asarray(mesh.vertices, dtype=np.float64)
        tri = v[mesh.faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # length = 2 * area
        n = np.zeros_like(v)
        for c in range(3):
            np.add.at(n, mesh.faces[:, c], fn)
    length = np.linalg.norm(n, axis=1)
    ok = length > eps
    out = np.zeros_like(n)
    out[ok] = n[ok] / length[ok, None]
    return out, ok


def auc_from_angles(angles, max_angle: float = 15.0) -> float:
    angles = np.asarray(angles, dtype=np.float64)
    if len(angles) == 0:
        return 0.0
    return float(100.0 * np.mean(np.clip(1.0 - angles / max_angle, 0.0, 1.0)))


def normal_consistency(pred: TriangleMesh, gt: TriangleMesh, max_angle: float = 15.0,
                       sign_agnostic: bool = False) -> NormalConsistencyReport:
    """Angle between each pred vertex normal and the normal of its closest gt vertex."""
    pn, pok = vertex_normals(pred)
    gn, gok = vertex_normals(gt)
    if not gok.any() or not pok.any():
        raise ValueError("no vertex with a usable normal")
    g_pts = np.asarray(gt.vertices, dtype=np.float64)[gok]
    _, nearest = cKDTree(g_pts).query(np.asarray(pred.vertices, dtype=np.float64)[pok])
    a, b = pn[pok], gn[gok][nearest]
    dots = np.einsum("ij,ij->i", a, b)
    if sign_agnostic:
        dots = np.abs(dots)
    # atan2 stays accurate near 0 degrees, where arccos amplifies rounding in the dot product
    angles = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), dots))
    degenerate = int((~pok).sum())
    return NormalConsistencyReport(angles, auc_from_angles(angles, max_angle), max_angle, degenerate)


def evaluate(pred: TriangleMesh, gt: TriangleMesh, n_points: int | None = None, density: float | None = None,
             seed: int = 0, max_angle: float = 15.0, sign_agnostic: bool = False) -> dict:
    """Chamfer on surface samples (vertices for point clouds) plus AUC when normals exist."""
    p = sample_surface(pred, n_points, density, seed)
    g = sample_surface(gt, n_points, density, seed)
    ch = chamfer(p, g)
    report = {
        "accuracy": ch.accuracy,
        "completeness": ch.completeness,
        "chamfer": ch.chamfer,
        "auc15": None,
        "counts": {"pred_points": len(p), "gt_points": len(g),
                   "pred_vertices": pred.n_vertices, "gt_vertices": gt.n_vertices},
    }
    try:
        nc = normal_consistency(pred, gt, max_angle, sign_agnostic)
    except ValueError:
        return report
    report["auc15"] = nc.auc
    report["counts"]["degenerate_normals"] = nc.n_degenerate
    report["counts"]["matched_vertices"] = len(nc.angles)
    return report
