"""Attention-based volume rendering of per-ray samples into color and depth.

For the samples ``i`` of a ray with features ``f_i``::

    q      = Wq tok + bq
    w_c    = softmax_i( q . k(occ(f_i)) / sqrt(D) )
    w_d    = softmax_i( q . k(f_i)      / sqrt(D) )
    color  = head( sum_i w_c[i] * v(f_i) )
    depth  = sum_i w_d[i] * t_i

``k``, ``v`` and ``occ`` are affine maps; ``head`` is an MLP with ReLU hidden
layers and a sigmoid output so colors stay in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .features import FeatureMap, meanvar_batch, sample_features
from .geometry import BoundingBox, Camera
from .tensorio import FormatError, read_tensor, write_tensor

DEFAULT_BANDS = 10


# ---------------------------------------------------------------------------
# sample features


def positional_encoding(x, bands: int = DEFAULT_BANDS) -> np.ndarray:
    """``[sin(2^j pi x), cos(2^j pi x)]`` for ``j < bands``, per component.

    ``x`` is ``(..., k)`` with coordinates already normalized to [-1, 1]; the
    output is ``(..., 2 * bands * k)`` ordered component-major, then band, then
    (sin, cos).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** np.arange(bands)) * np.pi
    arg = x[..., :, None] * freqs  # (..., k, L)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (..., k, L, 2)
    return enc.reshape(*x.shape[:-1], -1)


def normalize_points(bbox: BoundingBox, points) -> np.ndarray:
    return 2.0 * (np.asarray(points, dtype=np.float64) - bbox.min_corner) / bbox.size - 1.0


def aggregate_projection_feature(points, maps: Sequence[FeatureMap], cameras: Sequence[Camera],
                                 attention_query=None) -> tuple[np.ndarray, np.ndarray]:
    """Projection feature ``(P, 2*C_img)`` per point plus valid-view counts.

    Without ``attention_query`` this is plain MeanVar. With a query vector
    ``a`` of length ``C_img`` the views are weighted by
    ``softmax_m(f_m . a / sqrt(C_img))`` over valid views and the weighted mean
    and weighted variance are returned instead.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vals, hits = [], []
    for fmap, cam in zip(maps, cameras):
        v, h = sample_features(fmap, cam, pts)
        vals.append(v)
        hits.append(h)
    vals, hits = np.stack(vals), np.stack(hits)
    if attention_query is None:
        return meanvar_batch(vals, hits)
    a = np.asarray(attention_query, dtype=np.float64)
    logits = (vals @ a) / np.sqrt(len(a))  # (M, P)
    w = masked_softmax(logits.T, hits.T).T[..., None]  # (M, P, 1)
    mean = (w * vals).sum(axis=0)
    var = np.maximum((w * (vals - mean) ** 2).sum(axis=0), 0.0)
    return np.concatenate([mean, var], axis=-1), hits.sum(axis=0)


class RaySampleFeatures(NamedTuple):
    f_vol: np.ndarray  # (S, C)
    f_proj: np.ndarray  # (S, C_proj)
    beta: np.ndarray  # (S, 6L)

    @property
    def f_r(self) -> np.ndarray:
        return np.concatenate([self.f_vol, self.f_proj, self.beta], axis=-1)


def sample_point_features(points, volume, maps, cameras, bands: int = DEFAULT_BANDS,
                          attention_query=None) -> RaySampleFeatures:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    f_vol, _ = volume.query_points(pts)
    f_proj, _ = aggregate_projection_feature(pts, maps, cameras, attention_query)
    beta = positional_encoding(normalize_points(volume.spec.bbox, pts), bands)
    return RaySampleFeatures(f_vol, f_proj, beta)


# ---------------------------------------------------------------------------
# weights


def _affine(x, w, b):
    return x @ w.T + b


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; masked entries get weight 0. All-masked rows are all 0."""
    z = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


@dataclass(eq=False)
class RendererWeights:
    token: np.ndarray
    q_w: np.ndarray
    q_b: np.ndarray
    k_w: np.ndarray
    k_b: np.ndarray
    v_w: np.ndarray
    v_b: np.ndarray
    occ_w: np.ndarray
    occ_b: np.ndarray
    head: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    pos_enc_bands: int = DEFAULT_BANDS
    proj_attention: np.ndarray | None = None

    def __post_init__(self):
        for name in ("token", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "occ_w", "occ_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.head = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in self.head]
        if self.proj_attention is not None:
            self.proj_attention = np.asarray(self.proj_attention, dtype=np.float64)
        self._check()

    def _check(self):
        ranks = {"token": 1, "q_w": 2, "q_b": 1, "k_w": 2, "k_b": 1, "v_w": 2, "v_b": 1, "occ_w": 2, "occ_b": 1}
        bad = [name for name, r in ranks.items() if getattr(self, name).ndim != r]
        bad += [f"color head layer {i}" for i, (w, b) in enumerate(self.head) if w.ndim != 2 or b.ndim != 1]
        if bad:
            raise ValueError("renderer weights have the wrong rank: " + ", ".join(bad))
        D, d_tok = self.q_w.shape
        d_in = self.k_w.shape[1]
        problems = []
        if self.token.shape != (d_tok,):
            problems.append("token / q input")
        if self.q_b.shape != (D,) or self.k_w.shape != (D, d_in) or self.k_b.shape != (D,):
            problems.append("q / k")
        if self.v_w.shape[1] != d_in or self.v_b.shape != (self.v_w.shape[0],):
            problems.append("v")
        if self.occ_w.shape != (d_in, d_in) or self.occ_b.shape != (d_in,):
            problems.append("occ_transform")
        width = self.v_w.shape[0]
        for i, (w, b) in enumerate(self.head):
            if w.shape[1] != width or b.shape != (w.shape[0],):
                problems.append(f"color head layer {i}")
            width = w.shape[0]
        if not self.head or width != 3:
            problems.append("color head must end in 3 outputs")
        if problems:
            raise ValueError("inconsistent renderer weights: " + ", ".join(problems))
        arrays = [self.token, self.q_w, self.k_w, self.v_w, self.occ_w] + [w for w, _ in self.head]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("renderer weights must be finite")

    @property
    def d_in(self) -> int:
        return self.k_w.shape[1]

    @property
    def d_attn(self) -> int:
        return self.q_w.shape[0]

    @classmethod
    def random(cls, d_in: int, d: int = 32, hidden: Sequence[int] = (32,), bands: int = DEFAULT_BANDS,
               token_dim: int | None = None, seed: int = 0, occ_identity: bool = True,
               proj_channels: int | None = None) -> "RendererWeights":
        """Seeded Glorot-style initialization, for tests and demos."""
        rng = np.random.default_rng(seed)
        token_dim = token_dim or d

        def lin(n_out, n_in):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, (n_out, n_in)), rng.uniform(-0.1, 0.1, n_out)

        q_w, q_b = lin(d, token_dim)
        k_w, k_b = lin(d, d_in)
        v_w, v_b = lin(d, d_in)
        if occ_identity:
            occ_w, occ_b = np.eye(d_in), np.zeros(d_in)
        else:
            occ_w, occ_b = lin(d_in, d_in)
        sizes = [d, *hidden, 3]
        head = [lin(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        proj = rng.normal(size=proj_channels) if proj_channels else None
        return cls(rng.normal(size=token_dim), q_w, q_b, k_w, k_b, v_w, v_b, occ_w, occ_b, head, bands, proj)

    # -- persistence ---------------------------------------------------------

    _TENSORS = ("token", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "occ_w", "occ_b")

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in self._TENSORS:
            write_tensor(d / f"{name}.svt", getattr(self, name))
            files[name] = f"{name}.svt"
        layers = []
        for i, (w, b) in enumerate(self.head):
            write_tensor(d / f"head{i}_w.svt", w)
            write_tensor(d / f"head{i}_b.svt", b)
            layers.append({"weight": f"head{i}_w.svt", "bias": f"head{i}_b.svt"})
        if self.proj_attention is not None:
            write_tensor(d / "proj_attention.svt", self.proj_attention)
            files["proj_attention"] = "proj_attention.svt"
        manifest = {
            "d_in": self.d_in,
            "d": self.d_attn,
            "token_dim": len(self.token),
            "pos_enc_bands": self.pos_enc_bands,
            "color_head": [self.v_w.shape[0]] + [w.shape[0] for w, _ in self.head],
            "tensors": files,
            "head_layers": layers,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path) -> "RendererWeights":
        p = Path(path)
        manifest_path = p / "manifest.json" if p.is_dir() else p
        root = manifest_path.parent
        m = json.loads(manifest_path.read_text())
        try:
            t = {name: read_tensor(root / m["tensors"][name]) for name in cls._TENSORS}
            head = [(read_tensor(root / l["weight"]), read_tensor(root / l["bias"])) for l in m["head_layers"]]
            proj = read_tensor(root / m["tensors"]["proj_attention"]) if "proj_attention" in m["tensors"] else None
            w = cls(**t, head=head, pos_enc_bands=int(m["pos_enc_bands"]), proj_attention=proj)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad renderer weights manifest: {exc}") from None
        if w.d_in != m["d_in"] or w.d_attn != m["d"]:
            raise FormatError("manifest dimensions disagree with tensors")
        return w


# ---------------------------------------------------------------------------
# forward pass


class RenderOutput(NamedTuple):
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    color_weights: np.ndarray  # (R, S)
    depth_weights: np.ndarray  # (R, S)
    hit: np.ndarray  # (R,) bool, False for rays without samples


@dataclass
class _Cache:
    pooled: np.ndarray
    acts: list
    pre: list
    wc: np.ndarray
    f_r: np.ndarray
    mask: np.ndarray


def _head_forward(x, head):
    acts, pre = [x], []
    for i, (w, b) in enumerate(head):
        z = _affine(acts[-1], w, b)
        pre.append(z)
        if i < len(head) - 1:
            acts.append(np.maximum(z, 0.0))
        else:
            acts.append(1.0 / (1.0 + np.exp(-z)))
    return acts, pre


def _forward(ts, f_r, mask, w: RendererWeights):
    ts = np.asarray(ts, dtype=np.float64)
    f_r = np.asarray(f_r, dtype=np.float64)
    if ts.ndim == 1:
        ts, f_r = ts[None], f_r[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(ts.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if f_r.shape[-1] != w.d_in:
        raise ValueError(f"sample features have {f_r.shape[-1]} dims, weights expect {w.d_in}")
    q = _affine(w.token, w.q_w, w.q_b)
    scale = 1.0 / np.sqrt(w.d_attn)
    f_occ = _affine(f_r, w.occ_w, w.occ_b)
    wc = masked_softmax(_affine(f_occ, w.k_w, w.k_b) @ q * scale, mask)
    wd = masked_softmax(_affine(f_r, w.k_w, w.k_b) @ q * scale, mask)
    v = _affine(f_r, w.v_w, w.v_b)
    pooled = np.einsum("rs,rsd->rd", wc, v)
    acts, pre = _head_forward(pooled, w.head)
    hit = mask.any(axis=-1)
    color = np.where(hit[:, None], acts[-1], 0.0)
    depth = np.sum(wd * np.where(mask, ts, 0.0), axis=-1)
    # a convex combination in exact arithmetic; the clip removes last-ulp overshoot
    t_lo = np.min(np.where(mask, ts, np.inf), axis=-1)
    t_hi = np.max(np.where(mask, ts, -np.inf), axis=-1)
    depth = np.where(hit, np.clip(depth, np.where(hit, t_lo, 0.0), np.where(hit, t_hi, 0.0)), 0.0)
    return RenderOutput(color, depth, wc, wd, hit), _Cache(pooled, acts, pre, wc, f_r, mask)


def render_rays(ts, f_r, weights: RendererWeights, mask=None) -> RenderOutput:
    """Batched forward pass. ``ts`` is ``(R, S)``, ``f_r`` ``(R, S, D_in)``, ``mask`` ``(R, S)``."""
    return _forward(ts, f_r, mask, weights)[0]


def render_ray(ts, f_r, weights: RendererWeights) -> RenderOutput:
    """One ray: ``ts`` ``(S,)`` and ``f_r`` ``(S, D_in)``. Zero samples give the background output."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    if len(ts) == 0:
        return RenderOutput(np.zeros((1, 3)), np.zeros(1), np.zeros((1, 0)), np.zeros((1, 0)), np.zeros(1, bool))
    return _forward(ts, np.asarray(f_r).reshape(len(ts), -1), None, weights)[0]


# ---------------------------------------------------------------------------
# loss and gradients


def loss(out: RenderOutput, gt_color, gt_depth, depth_valid=None, alpha: float = 1.0) -> dict:
    """``mean_r ||C - C_gt||_2 + alpha * mean_{valid r} |D - D_gt|``."""
    gt_color = np.asarray(gt_color, dtype=np.float64).reshape(-1, 3)
    gt_depth = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    if depth_valid is None:
        depth_valid = np.ones(len(gt_depth), dtype=bool)
    depth_valid = np.asarray(depth_valid, dtype=bool)
    color_term = float(np.mean(np.linalg.norm(out.color - gt_color, axis=-1)))
    nd = int(depth_valid.sum())
    depth_term = float(np.abs(out.depth - gt_depth)[depth_valid].sum() / nd) if nd else 0.0
    return {"total": color_term + alpha * depth_term, "color": color_term, "depth": depth_term}


def loss_gradients(ts, f_r, mask, weights: RendererWeights, gt_color, gt_depth, depth_valid=None,
                   alpha: float = 1.0) -> dict:
    """Analytic gradients of the loss w.r.t. the value map and the color head.

    Keys: ``v_w``, ``v_b``, ``head{i}_w``, ``head{i}_b``. The depth term does
    not depend on these parameters.
    """
    out, c = _forward(ts, f_r, mask, weights)
    gt_color = np.asarray(gt_color, dtype=np.float64).reshape(-1, 3)
    R = len(out.color)
    diff = out.color - gt_color
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    g = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0) / R
    g = np.where(out.hit[:, None], g, 0.0)

    grads = {}
    n_layers = len(weights.head)
    color = c.acts[-1]
    dz = g * color * (1.0 - color)
    for i in reversed(range(n_layers)):
        w, _ = weights.head[i]
        grads[f"head{i}_w"] = dz.T @ c.acts[i]
        grads[f"head{i}_b"] = dz.sum(axis=0)
        da = dz @ w
        if i > 0:
            dz = da * (c.pre[i - 1] > 0)
    d_pooled = da  # (R, D_v)
    # pooled = sum_i wc_i (v_w f_i + v_b)
    wf = np.einsum("rs,rsd->rd", c.wc, c.f_r)
    grads["v_w"] = d_pooled.T @ wf
    grads["v_b"] = (d_pooled * c.wc.sum(axis=-1, keepdims=True)).sum(axis=0)
    return grads


def _get_param(w: RendererWeights, name: str) -> np.ndarray:
    if name.startswith("head"):
        i, kind = name[4:].split("_")
        return w.head[int(i)][0 if kind == "w" else 1]
    return getattr(w, name)


def grad_check(weights: RendererWeights, fixture: dict, epsilon: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fixture`` holds ``ts``, ``f_r``, ``mask`` (optional), ``gt_color``,
    ``gt_depth``, ``depth_valid`` (optional) and ``alpha``. Relative error per
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    args = (fixture["ts"], fixture["f_r"], fixture.get("mask"))
    targets = (fixture["gt_color"], fixture["gt_depth"], fixture.get("depth_valid"), fixture.get("alpha", 1.0))
    analytic = loss_gradients(*args, weights, *targets)

    def total(wts):
        return loss(render_rays(*args[:2], wts, args[2]), *targets)["total"]

    worst = 0.0
    for name, grad in analytic.items():
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        param = _get_param(weights, name)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + epsilon
            up = total(weights)
            param[idx] = orig - epsilon
            down = total(weights)
            param[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            a = grad[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def scale_values(weights: RendererWeights, c: float) -> RendererWeights:
    """Copy with the value map (weight and bias) scaled by ``c``."""
    return replace(weights, v_w=weights.v_w * c, v_b=weights.v_b * c,
                   head=[(w.copy(), b.copy()) for w, b in weights.head])


def pooled_values(ts, f_r, weights: RendererWeights, mask=None) -> np.ndarray:
    """The attention-pooled value vector fed to the color head."""
    return _forward(ts, f_r, mask, weights)[1].pooled
