import json

import numpy as np
import pytest

from sparsevol import bench
from sparsevol.config import FULL_K, ConfigError, SceneConfig
from sparsevol.geometry import BoundingBox, GridSpec
from sparsevol.sparse_volume import memory_report

# ---------------------------------------------------------------------------
# scene config


def test_defaults():
    cfg = SceneConfig()
    assert (cfg.K, cfg.s, cfg.n_samples, cfg.tau, cfg.gamma) == (32, 4, 64, 0.1, 2.0)
    assert cfg.full_scale().K == FULL_K == 128
    assert cfg.truncation == pytest.approx(2 * 2.0 / 128)


def test_round_trip_and_relative_paths(tmp_path):
    cfg = SceneConfig(K=8, cameras="cams.json", views=[{"depth": "d/0.pfm", "camera": "cams.json", "index": 1}])
    cfg.save(tmp_path / "scene.json")
    back = SceneConfig.load(tmp_path / "scene.json")
    assert back.K == 8
    assert back.path("cameras") == tmp_path / "cams.json"
    assert back.views[0]["depth"] == str(tmp_path / "d" / "0.pfm") and back.views[0]["index"] == 1
    data = json.loads((tmp_path / "scene.json").read_text())
    assert data["bbox"] == {"min": [-1.0, -1.0, -1.0], "max": [1.0, 1.0, 1.0]}


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as exc:
        SceneConfig(K=0, tau=1.5, sampling="random")
    msg = str(exc.value)
    assert "K must" in msg and "tau" in msg and "sampling" in msg


def test_unknown_fields_and_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        SceneConfig.from_dict({"Kay": 3})
    with pytest.raises(ConfigError, match="bbox"):
        SceneConfig.from_dict({"bbox": [0, 1]})
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        SceneConfig.load(tmp_path / "x.json")
    with pytest.raises(ConfigError, match="not found"):
        SceneConfig.load(tmp_path / "missing.json")
    with pytest.raises(ConfigError, match="required"):
        SceneConfig().path("logits")


# ---------------------------------------------------------------------------
# storage arithmetic at K=128


@pytest.mark.parametrize("fraction, expected", [(0.0189, 52.9), (0.0045, 222.0), (1.0, 1.0)])
def test_payload_ratio_examples(fraction, expected):
    spec = GridSpec(BoundingBox([-1] * 3, [1] * 3), 128, 4)
    rep = memory_report(spec=spec, n_occupied=round(fraction * 128 ** 3), channels=32)
    assert rep["payload_ratio"] == pytest.approx(expected, rel=2e-3)


def test_full_occupancy_ratio_is_lookup_overhead_only():
    spec = GridSpec(BoundingBox([-1] * 3, [1] * 3), 128, 4)
    rep = memory_report(spec=spec, n_occupied=128 ** 3, channels=32)
    assert rep["ratio"] == pytest.approx(1.0 / (1.0 + 1.0 / (32 * 64)))


# ---------------------------------------------------------------------------
# benchmark harness


def test_bench_rows_are_exact_and_seeded():
    rows = bench.run([8, 16], fraction=0.0189, channels=32, n_queries=2000, n_rays=5)
    again = bench.run([8, 16], fraction=0.0189, channels=32, n_queries=2000, n_rays=5)
    for r, a in zip(rows, again):
        assert r["n_occupied"] == a["n_occupied"] == round(0.0189 * r["resolution"] ** 3)
        assert r["dense_bytes"] == r["resolution"] ** 3 * 64 * 32 * 4
        assert r["sparse_bytes"] == r["n_occupied"] * 64 * 32 * 4 + r["resolution"] ** 3 * 4
        assert r["query_ns_per_op"] > 0 and r["traversal_rays_per_s"] > 0
    csv_text = bench.to_csv(rows)
    header = csv_text.splitlines()[0].split(",")
    assert tuple(header) == bench.CSV_FIELDS


def test_random_volume_density():
    spec = GridSpec(BoundingBox([-1] * 3, [1] * 3), 10, 2)
    vol = bench.random_volume(spec, 0.1, 3, seed=1)
    assert vol.n_occupied == 100 and vol.minivolumes.dtype == np.float32
