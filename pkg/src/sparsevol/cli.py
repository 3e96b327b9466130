"""Command-line interface: ``sparsevol <command> [options]``.

Exit codes: 0 success, 2 configuration error or missing input (the path is
named), 3 malformed or inconsistent data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import pipeline
from .config import ConfigError, SceneConfig
from .features import FeatureMap
from .fusion import TsdfVolume, marching_cubes, mesh_edges_manifold, virtual_view
from .geometry import Camera, GridSpec, Ray, load_cameras, save_cameras
from .metrics import evaluate
from .occupancy import OccupancyField
from .ray_sampling import traverse
from .renderer import RendererWeights
from .sparse_volume import build_sparse_volume, load_bundle, memory_report, save_bundle
from .tensorio import FormatError, read_pfm, read_ply, read_tensor, write_pfm, write_ply, write_ppm, write_tensor

log = logging.getLogger("sparsevol")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class MissingInput(ConfigError):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = str(path)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(p)
    return p


def _threads(args) -> int:
    value = args.threads if args.threads is not None else os.environ.get("SVOL_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _config(args) -> SceneConfig:
    cfg = SceneConfig.load(args.config) if args.config else SceneConfig()
    if args.paper_scale:
        cfg = cfg.full_scale()
    overrides = {}
    for name in ("K", "s", "tau", "seed", "n_samples", "tsdf_resolution", "tsdf_truncation"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def _pick(flag, cfg: SceneConfig, field: str) -> Path:
    return Path(flag) if flag else cfg.path(field)


def _read_tensor(path) -> np.ndarray:
    return read_tensor(_require(path))


def _load_maps(cfg: SceneConfig, cameras, features_path) -> list[FeatureMap]:
    data = _read_tensor(features_path)
    if data.ndim != 4:
        raise ConfigError(f"{features_path}: feature tensor must be [M, C_img, H, W], got {data.shape}")
    if len(data) != len(cameras):
        raise ConfigError(f"{len(data)} feature maps but {len(cameras)} cameras")
    if data.shape[1] != cfg.C_img:
        raise ConfigError(f"feature maps have {data.shape[1]} channels, config C_img is {cfg.C_img}")
    maps = []
    for fm, cam in zip(data, cameras):
        scale = fm.shape[2] / cam.width
        if abs(fm.shape[1] - cam.height * scale) > 1.0 or not 0 < scale <= 1:
            raise ConfigError(f"feature map {fm.shape[1:]} does not match camera {cam.height}x{cam.width}")
        maps.append(FeatureMap(fm, scale))
    return maps


def _load_views(entries) -> list:
    views = []
    for e in entries:
        try:
            depth_path, cam_path = e["depth"], e["camera"]
        except (KeyError, TypeError):
            raise ConfigError("each view needs 'depth' and 'camera'") from None
        cams = load_cameras(_require(cam_path))
        idx = int(e.get("index", 0))
        if not 0 <= idx < len(cams):
            raise ConfigError(f"{cam_path}: camera index {idx} out of range")
        views.append((read_pfm(_require(depth_path)), cams[idx]))
    return views


# ---------------------------------------------------------------------------
# commands; each returns a JSON-serializable dict


def cmd_occupancy(args, cfg):
    spec = GridSpec(cfg.bbox, cfg.K, cfg.s)
    raw = _read_tensor(_pick(args.logits, cfg, "logits"))
    if raw.shape != spec.shape:
        raise ConfigError(f"logits shape {raw.shape} does not match K={cfg.K}")
    from_logits = not (args.probabilities or cfg.logits_are_probabilities)
    pred = pipeline.predicted_occupancy(spec, raw, cfg.tau, from_logits)
    gt = None
    gt_path = args.gt or cfg.gt_occupancy
    if gt_path:
        gt = OccupancyField.binary(spec, _read_tensor(gt_path))
    if pred.n_occupied == 0:
        log.warning("occupancy is empty at tau=%g", cfg.tau)
    out = _pick(args.out, cfg, "occupancy")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, pred.values)
    report = pipeline.occupancy_report(spec, raw, pred, gt, cfg.gamma, from_logits)
    report["output"] = str(out)
    return report


def cmd_build(args, cfg):
    spec = cfg.grid
    occ_raw = _read_tensor(_pick(args.occupancy, cfg, "occupancy"))
    if occ_raw.shape != spec.shape:
        raise ConfigError(f"occupancy shape {occ_raw.shape} does not match K={cfg.K}")
    occ = OccupancyField.binary(spec, occ_raw)
    cams = load_cameras(_require(_pick(args.cameras, cfg, "cameras")))
    maps = _load_maps(cfg, cams, _pick(args.features, cfg, "features"))
    if occ.n_occupied == 0:
        log.warning("occupancy is empty; writing a bundle with N=0")
    vol = build_sparse_volume(occ, spec, maps, cams)
    out = _pick(args.out, cfg, "bundle")
    save_bundle(vol, out)
    report = memory_report(vol)
    report["output"] = str(out)
    return report


def cmd_render(args, cfg):
    vol = load_bundle(_require(_pick(args.bundle, cfg, "bundle")))
    weights = RendererWeights.load(_require(_pick(args.weights, cfg, "weights")))
    cams = load_cameras(_require(_pick(args.cameras, cfg, "cameras")))
    maps = _load_maps(cfg, cams, _pick(args.features, cfg, "features"))
    if vol.channels != cfg.volume_channels:
        raise ConfigError(f"bundle has {vol.channels} channels, config implies {cfg.volume_channels}")
    indices = args.views if args.views else list(range(len(cams)))
    for i in indices:
        if not 0 <= i < len(cams):
            raise ConfigError(f"view index {i} out of range (0..{len(cams) - 1})")
    out_dir = _pick(args.out_dir, cfg, "render_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = _threads(args)
    shifts = [("", 0.0)] if args.no_virtual else [("", 0.0), ("_virtual", cfg.virtual_shift)]
    manifest = []
    for i in indices:
        for suffix, shift in shifts:
            cam = virtual_view(cams[i], shift)
            if args.scale != 1.0:
                cam = cam.scaled(args.scale)
            view_id = 2 * i + (1 if suffix else 0)
            try:
                res = pipeline.render_view(cam, vol, maps, cams, weights, cfg.n_samples, cfg.sampling,
                                           cfg.seed, view_id, threads)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            stem = f"view_{i:03d}{suffix}"
            write_pfm(out_dir / f"{stem}.pfm", res.depth)
            write_ppm(out_dir / f"{stem}.ppm", res.color)
            save_cameras(out_dir / f"{stem}.json", [cam])
            manifest.append({"depth": f"{stem}.pfm", "camera": f"{stem}.json", "color": f"{stem}.ppm",
                             "source_view": i, "shift": shift, "hit_fraction": float(res.hit.mean())})
    (out_dir / "render.json").write_text(json.dumps({"views": manifest}, indent=2))
    return {"output": str(out_dir), "views": manifest}


def cmd_fuse(args, cfg):
    if args.manifest:
        mpath = _require(args.manifest)
        entries = json.loads(mpath.read_text()).get("views", [])
        entries = [{**e, "depth": str(mpath.parent / e["depth"]), "camera": str(mpath.parent / e["camera"])}
                   for e in entries]
    elif args.view:
        entries = [{"depth": d, "camera": c} for d, c in args.view]
    else:
        entries = cfg.views
    if not entries:
        raise ConfigError("no depth maps given to fuse")
    views = _load_views(entries)
    tsdf = TsdfVolume.empty(cfg.bbox, cfg.tsdf_resolution, cfg.truncation)
    fused = pipeline.fuse(views, tsdf)
    out = _pick(args.out, cfg, "tsdf")
    out.parent.mkdir(parents=True, exist_ok=True)
    fused.save(out)
    return {"output": str(out), "n_views": len(views), "resolution": list(fused.resolution),
            "truncation": fused.truncation, "observed_fraction": float((fused.weight > 0).mean())}


def cmd_mesh(args, cfg):
    src = _require(args.tsdf or cfg.path("tsdf"))
    _require(str(src) + ".meta.svt")
    vol = TsdfVolume.load(src)
    mesh = marching_cubes(vol, args.iso)
    if mesh.n_faces == 0:
        log.warning("the fused volume contains no surface")
    out = _pick(args.out, cfg, "mesh")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, mesh, binary=not args.ascii)
    return {"output": str(out), "vertices": mesh.n_vertices, "faces": mesh.n_faces,
            "watertight": mesh_edges_manifold(mesh)}


def cmd_eval(args, cfg):
    pred = read_ply(_require(args.pred or cfg.path("mesh")))
    gt = read_ply(_require(args.gt or cfg.path("gt_mesh")))
    return evaluate(pred, gt, n_points=args.n_points, density=args.density or cfg.eval_density, seed=cfg.seed, max_angle=args.max_angle,
                    sign_agnostic=args.sign_agnostic)


def cmd_bench(args, cfg):
    rows = bench_mod.run(args.resolutions, args.fraction, cfg.s, args.channels, cfg.seed,
                         timing_channels=args.timing_channels, n_queries=args.queries, n_rays=args.rays)
    text = bench_mod.to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    elif not args.json:
        sys.stdout.write(text)
    return {"rows": rows, "_printed": not args.out}


def cmd_inspect(args, cfg):
    p = _require(args.path)
    if p.is_dir():
        vol = load_bundle(p)
        rep = memory_report(vol)
        rep.update({"kind": "sparse volume bundle", "grid": vol.spec.to_dict(), "channels": vol.channels})
        if vol.n_occupied:
            rep["feature_min"] = float(vol.minivolumes.min())
            rep["feature_max"] = float(vol.minivolumes.max())
        return rep
    suffix = p.suffix.lower()
    if suffix == ".svt":
        t = read_tensor(p)
        rep = {"kind": "tensor", "dtype": str(t.dtype), "shape": list(t.shape)}
        if t.size:
            rep.update({"min": float(t.min()), "max": float(t.max()), "nonzero": int(np.count_nonzero(t))})
        return rep
    if suffix == ".pfm":
        d = read_pfm(p)
        return {"kind": "depth map", "width": d.width, "height": d.height, "valid": int(d.valid.sum())}
    if suffix == ".ply":
        m = read_ply(p)
        return {"kind": "mesh", "vertices": m.n_vertices, "faces": m.n_faces,
                "watertight": mesh_edges_manifold(m) if m.n_faces else False}
    raise ConfigError(f"cannot inspect {p}: unknown file type")


def cmd_fragments(args, cfg):
    cams = load_cameras(_require(_pick(args.cameras, cfg, "cameras")))
    if not 0 <= args.camera < len(cams):
        raise ConfigError(f"camera index {args.camera} out of range")
    if args.bundle or not (args.occupancy or cfg.occupancy):
        occ = load_bundle(_require(_pick(args.bundle, cfg, "bundle"))).occupancy
    else:
        occ = OccupancyField.binary(cfg.grid, _read_tensor(_pick(args.occupancy, cfg, "occupancy")))
    cam: Camera = cams[args.camera]
    o, d = cam.pixel_rays(np.array([args.pixel], dtype=np.float64))
    ray = Ray(o[0], d[0])
    frags = traverse(ray, occ)
    return {"origin": ray.origin.tolist(), "direction": ray.direction.tolist(),
            "fragments": [{"t_enter": f.t_enter, "t_exit": f.t_exit, "voxels": f.coords.tolist()} for f in frags]}


def cmd_synth_sphere(args, cfg):
    from .synthetic import write_sphere_scene

    path = write_sphere_scene(args.out_dir, size=args.size, K=cfg.K, s=cfg.s, C_img=args.c_img, seed=cfg.seed)
    return {"config": str(path)}


# ---------------------------------------------------------------------------
# argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="scene config JSON")
    p.add_argument("--json", action="store_true", help="print the result as JSON on stdout")
    p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: $SVOL_THREADS, else 1)")
    p.add_argument("--paper-scale", action="store_true", help="use K=128 instead of the desk default")
    p.add_argument("--K", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--tsdf-resolution", dest="tsdf_resolution", type=int)
    p.add_argument("--tsdf-truncation", dest="tsdf_truncation", type=float)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="sparsevol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("occupancy", parents=[common], help="logits -> binarized, dilated occupancy")
    p.add_argument("--logits")
    p.add_argument("--gt", help="ground-truth occupancy .svt for precision / recall")
    p.add_argument("--probabilities", action="store_true", help="input already holds probabilities")
    p.add_argument("--out")
    p.set_defaults(func=cmd_occupancy)

    p = sub.add_parser("build", parents=[common], help="occupancy + feature maps -> sparse volume bundle")
    p.add_argument("--occupancy")
    p.add_argument("--features")
    p.add_argument("--cameras")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("render", parents=[common], help="render depth (.pfm) and color (.ppm) per view")
    p.add_argument("--bundle")
    p.add_argument("--weights")
    p.add_argument("--features")
    p.add_argument("--cameras")
    p.add_argument("--views", type=int, nargs="*", help="camera indices (default: all)")
    p.add_argument("--scale", type=float, default=1.0, help="image resolution factor")
    p.add_argument("--no-virtual", action="store_true", help="skip the shifted virtual viewpoints")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fuse", parents=[common], help="depth maps + cameras -> TSDF .svt")
    p.add_argument("--view", nargs=2, action="append", metavar=("DEPTH_PFM", "CAMERA_JSON"))
    p.add_argument("--manifest", help="render.json written by the render command")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("mesh", parents=[common], help="TSDF -> .ply by marching cubes")
    p.add_argument("--tsdf")
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", parents=[common], help="Chamfer and normal AUC of pred vs gt mesh")
    p.add_argument("pred", nargs="?")
    p.add_argument("gt", nargs="?")
    p.add_argument("--n-points", type=int, default=None, help="surface samples per mesh (overrides density)")
    p.add_argument("--density", type=float, default=None, help="surface samples per unit area")
    p.add_argument("--max-angle", type=float, default=15.0)
    p.add_argument("--sign-agnostic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="memory / latency benchmark as CSV")
    p.add_argument("--resolutions", type=int, nargs="+", default=[32, 64, 128])
    p.add_argument("--fraction", type=float, default=0.0189)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--timing-channels", type=int, default=4)
    p.add_argument("--queries", type=int, default=100_000)
    p.add_argument("--rays", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", parents=[common], help="summarize a bundle, .svt, .pfm or .ply")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("fragments", parents=[common], help="dump the occupied fragments of one pixel ray")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--pixel", type=float, nargs=2, required=True, metavar=("U", "V"))
    p.add_argument("--cameras")
    p.add_argument("--bundle")
    p.add_argument("--occupancy")
    p.set_defaults(func=cmd_fragments)

    p = sub.add_parser("synth-sphere", parents=[common], help="write a synthetic sphere scene")
    p.add_argument("out_dir")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--c-img", type=int, default=4)
    p.set_defaults(func=cmd_synth_sphere)
    return parser


def _print(result: dict, as_json: bool) -> None:
    printed = result.pop("_printed", False)
    if as_json:
        print(json.dumps(result, indent=2, default=float))
        return
    if printed:
        return
    for key, value in result.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        elif isinstance(value, (list, dict)):
            value = json.dumps(value, default=float)
        print(f"{key}: {value}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        _threads(args)
        result = args.func(args, cfg)
    except MissingInput as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc.filename)
        return EXIT_CONFIG
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    _print(result, args.json)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
