"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

Every test records a single PASS/FAIL line through the ``acceptance`` fixture;
the lines are repeated in the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest

from oracles import (dense_oracle, dilate_oracle, fragments_agree, random_render_fixture, render_oracle,
                     step_march_membership)
from sparsevol import bench
from sparsevol.fusion import TsdfVolume, integrate, marching_cubes, mesh_edges_manifold
from sparsevol.geometry import BoundingBox, GridSpec, Ray, coarse_index
from sparsevol.metrics import chamfer, normal_consistency, sample_surface
from sparsevol.occupancy import OccupancyField, dilate, focal_loss, occupancy_metrics
from sparsevol.ray_sampling import sample_ray, traverse
from sparsevol.renderer import RendererWeights, grad_check, render_rays
from sparsevol.sparse_volume import SparseFeatureVolume, build_lookup, load_bundle, memory_report, save_bundle
from sparsevol.synthetic import default_sphere_bbox, sphere_cameras, sphere_depth, sphere_mesh, sphere_points
from sparsevol.tensorio import (TriangleMesh, decode_pfm, decode_tensor, encode_pfm, encode_tensor, read_ply,
                                write_ply)

UNIT_BOX = BoundingBox([-1.0] * 3, [1.0] * 3)


def test_1_sparse_query_matches_densified_trilinear_oracle(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n_volumes = 0.0, 0
    box = BoundingBox([-1.0, -0.75, -0.5], [1.0, 1.25, 0.5])
    for K, s, C, frac in itertools.product((4, 8), (2, 4), (4, 8), (0.05, 0.2, 1.0)):
        spec = GridSpec(box, K, s)
        occ = OccupancyField.binary(spec, rng.random(spec.shape) < frac)
        vol = SparseFeatureVolume(spec, build_lookup(occ), rng.normal(size=(occ.n_occupied, C, s ** 3)))
        pts = box.min_corner - 0.05 + rng.random((10_000, 3)) * (box.size + 0.1)
        got, _ = vol.query_points(pts)
        worst = max(worst, float(np.max(np.abs(got - dense_oracle(vol, pts)))))
        n_volumes += 1
    elapsed = time.perf_counter() - start
    ok = n_volumes >= 20 and worst <= 1e-6 and elapsed < 30
    acceptance(1, "sparse query vs densified trilinear oracle", ok,
               f"{n_volumes} volumes, max err {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_2_storage_claim(acceptance):
    spec = GridSpec(UNIT_BOX, 128, 4)
    n = round(0.0189 * spec.n_coarse)
    rep = memory_report(spec=spec, n_occupied=n, channels=32, itemsize=4)
    expected_payload = n * 32 * 64 * 4
    exact = rep["payload_bytes"] == expected_payload and rep["dense_equivalent_bytes"] == spec.n_coarse * 32 * 64 * 4
    ok = exact and rep["payload_ratio"] >= 50
    acceptance(2, "storage ratio at 1.89% occupancy", ok, f"payload ratio {rep['payload_ratio']:.2f}")
    assert ok


def test_3_query_latency_independent_of_occupied_count(acceptance):
    start = time.perf_counter()
    spec = GridSpec(UNIT_BOX, 128, 2)
    latencies = {}
    for n in (10, 100_000):
        vol = bench.random_volume(spec, n / spec.n_coarse, channels=4, seed=1)
        assert vol.n_occupied == n
        latencies[n] = bench.time_queries(vol, n_points=100_000, repeats=7, seed=2)
    ratio = max(latencies.values()) / min(latencies.values())
    elapsed = time.perf_counter() - start
    ok = ratio < 2.0 and elapsed < 60
    acceptance(3, "O(1) query latency, N=10 vs N=1e5 at K=128", ok,
               f"{latencies[10]:.0f} vs {latencies[100_000]:.0f} ns/query, ratio {ratio:.2f}, {elapsed:.1f} s")
    assert ok


def test_4_ray_sampling_confinement(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    spec = GridSpec(UNIT_BOX, 8, 1)
    step = 1e-4 * UNIT_BOX.diagonal
    n_rays, n_samples, confined, agree = 10_000, 0, 0, 0
    occ = None
    for i in range(n_rays):
        if i % 100 == 0:  # fresh random occupancy every 100 rays
            occ = OccupancyField.binary(spec, rng.random(spec.shape) < rng.uniform(0.05, 0.6))
            mask = occ.mask
        if rng.random() < 0.2:
            origin = rng.uniform(-0.95, 0.95, 3)
        else:
            origin = rng.normal(size=3)
            origin *= 3.0 / np.linalg.norm(origin)
        ray = Ray(origin, rng.uniform(-1.2, 1.2, 3) - origin)
        batch = sample_ray(ray, occ, 32, "stratified", seed=i)
        idx, inside = coarse_index(spec, batch.points)
        n_samples += len(batch)
        confined += int(np.sum(inside & mask[idx[:, 0], idx[:, 1], idx[:, 2]]))
        ts, occupied = step_march_membership(ray.origin, ray.direction, UNIT_BOX.min_corner, UNIT_BOX.max_corner,
                                             mask, step)
        agree += fragments_agree(traverse(ray, occ), ts, occupied, 1e-3)
    elapsed = time.perf_counter() - start
    ok = n_samples > 0 and confined == n_samples and agree == n_rays and elapsed < 60
    acceptance(4, "ray samples confined to occupied voxels", ok,
               f"{confined}/{n_samples} samples confined, {agree}/{n_rays} rays match step marching, {elapsed:.1f} s")
    assert ok


def _focal_direct(O, g, gamma, eps=1e-7):
    total = 0.0
    for o, y in zip(O.ravel().tolist(), g.ravel().tolist()):
        o = min(max(o, eps), 1.0 - eps)
        total -= y * (1.0 - o) ** gamma * math.log(o) + (1 - y) * o ** gamma * math.log(1.0 - o)
    return total


def test_5_focal_loss(acceptance):
    rng = np.random.default_rng(5)
    spec = GridSpec(UNIT_BOX, 6, 1)
    worst = 0.0
    for trial in range(30):
        O = rng.random(spec.shape)
        if trial % 5 == 0:
            O[rng.random(spec.shape) < 0.1] = rng.choice([0.0, 1.0])  # exercise the clamp
        g = (rng.random(spec.shape) < 0.3).astype(np.uint8)
        gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.0]))
        got = focal_loss(OccupancyField.probability(spec, O), OccupancyField.binary(spec, g), gamma)
        ref = _focal_direct(O, g, gamma)
        worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
    one = GridSpec(UNIT_BOX, 1, 1)
    hand = focal_loss(OccupancyField.probability(one, np.full((1, 1, 1), 0.5)),
                      OccupancyField.binary(one, np.ones((1, 1, 1))), 2.0)
    ok = worst <= 1e-9 and abs(hand - 0.173287) <= 1e-6
    acceptance(5, "focal loss vs direct summation and hand value", ok,
               f"max rel err {worst:.1e}, single voxel {hand:.6f}")
    assert ok


def test_6_dilation_brute_force(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    spec = GridSpec(UNIT_BOX, 5, 1)
    n_grids, mismatches = 12_000, 0
    densities = rng.random(n_grids)
    for d in densities:
        grid = (rng.random((5, 5, 5)) < d).astype(np.uint8)
        got = dilate(OccupancyField.binary(spec, grid)).mask
        mismatches += not np.array_equal(got, dilate_oracle(grid))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    acceptance(6, "dilation vs brute-force 3x3x3 count", ok,
               f"{n_grids} random 5^3 grids, {mismatches} mismatches, {elapsed:.1f} s")
    assert ok


def test_7_renderer(acceptance):
    rng = np.random.default_rng(7)
    simplex_err, convex_ok, oracle_err = 0.0, True, 0.0
    for i in range(1000):
        w = RendererWeights.random(12, d=8, hidden=(6,), seed=i % 50, occ_identity=bool(i % 2))
        fx = random_render_fixture(rng, n_rays=2, n_samples=int(rng.integers(1, 12)))
        fx["f_r"] *= rng.choice([0.1, 1.0, 10.0])
        out = render_rays(fx["ts"], fx["f_r"], w)
        for wts in (out.color_weights, out.depth_weights):
            convex_ok &= bool(np.all(wts >= 0))
            simplex_err = max(simplex_err, float(np.max(np.abs(wts.sum(axis=1) - 1.0))))
        convex_ok &= bool(np.all((fx["ts"].min(axis=1) <= out.depth) & (out.depth <= fx["ts"].max(axis=1))))
        if i < 200:
            color, depth = render_oracle(fx["ts"], fx["f_r"], w)
            oracle_err = max(oracle_err, float(np.max(np.abs(out.color - color))),
                             float(np.max(np.abs(out.depth - depth))))
    grad_err = 0.0
    for seed in range(3):
        w = RendererWeights.random(12, d=8, hidden=(6,), seed=100 + seed)
        grad_err = max(grad_err, grad_check(w, random_render_fixture(rng, n_rays=4, n_samples=6), epsilon=1e-4))
    ok = simplex_err <= 1e-9 and convex_ok and oracle_err <= 1e-6 and grad_err <= 1e-4
    acceptance(7, "attention simplex, depth convexity, matrix oracle, grad check", ok,
               f"simplex err {simplex_err:.1e}, oracle err {oracle_err:.1e}, grad rel err {grad_err:.1e}")
    assert ok


@pytest.mark.slow
def test_8_end_to_end_synthetic_sphere(acceptance):
    start = time.perf_counter()
    bbox = default_sphere_bbox()
    fine_edge = float(np.max(GridSpec(bbox, 32, 4).fine_edge))
    tsdf = TsdfVolume.empty(bbox, 256, truncation=2.0 * fine_edge)
    cams = sphere_cameras(size=320)
    assert len(cams) == 8
    for cam in cams:
        integrate(tsdf, sphere_depth(cam), cam, in_place=True)
    mesh = marching_cubes(tsdf)
    watertight = mesh_edges_manifold(mesh)
    pred = sample_surface(mesh, 200_000, seed=0)
    cd = chamfer(pred, sphere_points(200_000, seed=1)).chamfer
    elapsed = time.perf_counter() - start
    ok = watertight and cd < 1.5 * fine_edge and elapsed < 300
    acceptance(8, "synthetic sphere through TSDF 256^3 and marching cubes", ok,
               f"chamfer {cd / fine_edge:.3f} fine edges, watertight={watertight}, {elapsed:.0f} s")
    assert ok


def test_9_metrics_self_consistency(acceptance):
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2000, 3))
    self_cd = chamfer(x, x).chamfer
    mesh = sphere_mesh(1.0, 3)
    auc = normal_consistency(mesh, mesh).auc
    a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) + 0.2
    d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
    brute = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    cd_err = abs(chamfer(a, b).chamfer - brute)
    spec = GridSpec(UNIT_BOX, 4, 1)
    pred = np.zeros(64, dtype=np.uint8)
    gt = np.zeros(64, dtype=np.uint8)
    pred[:10] = 1  # 6 true positives, 4 false positives
    gt[4:16] = 1  # 6 false negatives
    m = occupancy_metrics(OccupancyField.binary(spec, pred.reshape(4, 4, 4)),
                          OccupancyField.binary(spec, gt.reshape(4, 4, 4)))
    confusion_ok = (m.true_positive, m.false_positive, m.false_negative) == (6, 4, 6) and \
        m.precision == 6 / 10 and m.recall == 6 / 12 and m.space_efficiency == 10 / 64
    ok = self_cd == 0.0 and auc == 100.0 and cd_err <= 1e-12 and confusion_ok
    acceptance(9, "metric self-consistency", ok,
               f"chamfer(X,X)={self_cd}, AUC={auc}, brute-force diff {cd_err:.1e}, confusion exact={confusion_ok}")
    assert ok


def test_10_format_round_trips(acceptance, tmp_path):
    rng = np.random.default_rng(10)
    failures = []
    for i in range(50):
        dtype = [np.float32, np.float64, np.uint8, np.int32][i % 4]
        shape = tuple(rng.integers(0, 6, size=int(rng.integers(0, 5))))
        arr = (rng.normal(size=shape) * 100).astype(dtype)
        buf = encode_tensor(arr)
        if decode_tensor(buf).tobytes() != arr.tobytes() or encode_tensor(decode_tensor(buf)) != buf:
            failures.append(f"svt {dtype.__name__}{shape}")
        img = rng.uniform(0, 10, size=tuple(rng.integers(1, 20, 2))).astype(np.float32)
        if decode_pfm(encode_pfm(img)).tobytes() != img.tobytes():
            failures.append("pfm")
    for dtype in (np.float32, np.float64):
        mesh = TriangleMesh(rng.normal(size=(3000, 3)).astype(dtype), rng.integers(0, 3000, (4000, 3)),
                            rng.normal(size=(3000, 3)).astype(dtype))
        write_ply(tmp_path / "m.ply", mesh)
        back = read_ply(tmp_path / "m.ply")
        write_ply(tmp_path / "m2.ply", back)
        if (back.vertices.tobytes() != mesh.vertices.tobytes() or back.normals.tobytes() != mesh.normals.tobytes()
                or not np.array_equal(back.faces, mesh.faces)
                or (tmp_path / "m.ply").read_bytes() != (tmp_path / "m2.ply").read_bytes()):
            failures.append(f"ply {dtype.__name__}")
    spec = GridSpec(UNIT_BOX, 6, 2)
    occ = OccupancyField.binary(spec, rng.random(spec.shape) < 0.3)
    vol = SparseFeatureVolume(spec, build_lookup(occ),
                              rng.normal(size=(occ.n_occupied, 5, 8)).astype(np.float32))
    save_bundle(vol, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    save_bundle(back, tmp_path / "b2")
    for f in ("lookup.svt", "minivolumes.svt", "spec.json"):
        if (tmp_path / "b" / f).read_bytes() != (tmp_path / "b2" / f).read_bytes():
            failures.append(f"bundle {f}")
    if back.minivolumes.tobytes() != vol.minivolumes.tobytes():
        failures.append("bundle payload")
    ok = not failures
    acceptance(10, "format round-trips (.svt, .pfm, .ply, bundle)", ok,
               "all bit-identical" if ok else ", ".join(failures))
    assert ok
