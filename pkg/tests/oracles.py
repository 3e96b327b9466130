"""Slow, obviously-correct reference implementations shared by the test modules."""

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from sparsevol.sparse_volume import densify


def step_march_membership(origin, direction, lo, hi, mask, step):
    """Occupancy of the ray at ``t = (k + 0.5) * step`` for every step inside the box.

    Independent of the library: its own slab clipping and voxel lookup.
    Returns ``(ts, occupied)``; both empty on a miss.
    """
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    tmin = np.where(d == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), np.minimum(ta, tb))
    tmax = np.where(d == 0, np.where((o >= lo) & (o <= hi), np.inf, -np.inf), np.maximum(ta, tb))
    t0, t1 = max(tmin.max(), 0.0), tmax.min()
    if not t1 > t0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    ts = np.arange(np.floor(t0 / step), np.ceil(t1 / step) + 1) * step + 0.5 * step
    ts = ts[(ts > t0) & (ts < t1)]
    pts = o + ts[:, None] * d
    res = np.array(mask.shape)
    idx = np.clip(np.floor((pts - lo) / (hi - lo) * res).astype(int), 0, res - 1)
    return ts, mask[idx[:, 0], idx[:, 1], idx[:, 2]]


def fragments_agree(fragments, ts, occupied, tol):
    """True when the union of ``fragments`` matches the marched membership within ``tol`` in t.

    Membership may only disagree within ``tol`` of a fragment boundary, and a gap
    between two reported fragments must contain an empty marched sample unless it
    is shorter than ``tol`` (so fragments are maximal).
    """
    bounds = np.array([[f[0], f[1]] for f in fragments]).reshape(-1, 2)
    inside = np.zeros(len(ts), dtype=bool)
    for a, b in bounds:
        inside |= (ts >= a) & (ts <= b)
    edges = bounds.ravel()
    if len(edges):
        near = np.min(np.abs(ts[:, None] - edges[None, :]), axis=1) <= tol
    else:
        near = np.zeros(len(ts), dtype=bool)
    if np.any((inside != occupied) & ~near):
        return False
    for (_, b), (a, _) in zip(bounds[:-1], bounds[1:]):
        if a < b - 1e-12:
            return False  # overlapping or unsorted
        if a - b > tol and not np.any(~occupied[(ts > b) & (ts < a)]):
            return False
    return True


def dilate_oracle(grid, threshold=2.7):
    """Literal neighbourhood count with zero padding, center included."""
    g = np.asarray(grid, dtype=np.int64)
    p = np.pad(g, 1)
    n = np.zeros_like(g)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                n += p[dx:dx + g.shape[0], dy:dy + g.shape[1], dz:dz + g.shape[2]]
    return n >= threshold


def render_oracle(ts, f_r, w):
    """Per-ray loops with explicit q . k^T / sqrt(D) logits and a textbook softmax."""
    ts = np.asarray(ts, float)
    f_r = np.asarray(f_r, float)
    D = w.q_w.shape[0]
    q = w.q_w @ w.token + w.q_b
    colors, depths = [], []
    for t_ray, f_ray in zip(ts, f_r):
        lc, ld, vals = [], [], []
        for f in f_ray:
            f_occ = w.occ_w @ f + w.occ_b
            lc.append(float(q @ (w.k_w @ f_occ + w.k_b)) / np.sqrt(D))
            ld.append(float(q @ (w.k_w @ f + w.k_b)) / np.sqrt(D))
            vals.append(w.v_w @ f + w.v_b)
        ec = np.exp(np.array(lc) - max(lc))
        ed = np.exp(np.array(ld) - max(ld))
        wc, wd = ec / ec.sum(), ed / ed.sum()
        x = sum(a * v for a, v in zip(wc, vals))
        for i, (W, b) in enumerate(w.head):
            x = W @ x + b
            x = np.maximum(x, 0) if i < len(w.head) - 1 else 1 / (1 + np.exp(-x))
        colors.append(x)
        depths.append(float(wd @ t_ray))
    return np.array(colors), np.array(depths)


def random_render_fixture(rng, n_rays=4, n_samples=6, d_in=12):
    ts = np.sort(rng.uniform(0.5, 4.0, (n_rays, n_samples)), axis=1)
    return {
        "ts": ts,
        "f_r": rng.normal(size=(n_rays, n_samples, d_in)),
        "gt_color": rng.random((n_rays, 3)),
        "gt_depth": rng.uniform(0.5, 4.0, n_rays),
        "alpha": 1.0,
    }


def dense_oracle(vol, pts):
    """scipy trilinear interpolation on the densified fine grid, clamped to the center lattice."""
    spec = vol.spec
    dense = densify(vol).astype(np.float64)
    axes = [spec.bbox.min_corner[a] + (np.arange(spec.fine_shape[a]) + 0.5) * spec.fine_edge[a] for a in range(3)]
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    q = np.clip(pts, lo, hi)
    interp = RegularGridInterpolator(axes, dense, method="linear")
    out = interp(q)
    out[~spec.bbox.contains(pts)] = 0.0
    return out
