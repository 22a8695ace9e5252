import csv
import math

import numpy as np
import pytest

from constellation_loc.core import DegenerateInput, ObjectMap, PoseSE2z
from constellation_loc.evaluation import (
    IngestConfig, ScenarioConfig, format_table, ingest_pointcloud, make_qlsm, map_as_points, occluded,
    read_pointcloud, read_results, run_benchmark, run_queries, sample_queries, success_rate, write_per_query_csv,
    write_report_csv, write_results,
)
from constellation_loc.extractors import make_extractor
from constellation_loc.graph import GraphConfig
from constellation_loc.localizer import LocalizationResult, MatchConfig
from constellation_loc.synth import WorldGenConfig, generate_world

STREET = WorldGenConfig(n_patterns=(10, 10), pattern_offset_range=(-100, 100), offset_range_y=(-15, 15),
                        stratify_x=True, seed=8)


@pytest.fixture(scope="module")
def world():
    return generate_world(STREET)


# --- ingestion ---------------------------------------------------------------------


def test_two_voxels_average_to_centroid():
    pts = np.array([[0, 0, 0, 7, 1], [2, 0, 0, 7, 1]], float)
    m = ingest_pointcloud(pts)
    assert m.ids.tolist() == [7]
    np.testing.assert_allclose(m.positions, [[1, 0, 0]])


def test_removed_class_is_dropped():
    pts = np.array([[0, 0, 0, 1, 3], [5, 0, 0, 2, 4]], float)
    m = ingest_pointcloud(pts, IngestConfig(removed_classes={4}))
    assert m.ids.tolist() == [1]
    with pytest.raises(DegenerateInput):
        ingest_pointcloud(pts, IngestConfig(removed_classes={3, 4}))


def test_dense_ball_collapses_to_few_voxels():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(1000, 3))
    d *= (0.1 * rng.random(1000) ** (1 / 3) / np.linalg.norm(d, axis=1))[:, None]
    center = np.array([3.03, -1.07, 0.52])
    pts = np.column_stack([center + d, np.zeros(1000), np.full(1000, 2)])
    m = ingest_pointcloud(pts, IngestConfig(voxel_size=0.1))
    assert len(m) == 1
    assert np.linalg.norm(m.positions[0] - (center + d).mean(0)) < 0.1


def test_voxel_means_weight_voxels_equally():
    # 3 points in one voxel and 1 in another: centroid is the mean of voxel means
    pts = np.array([[0.01, 0, 0, 1, 0], [0.02, 0, 0, 1, 0], [0.03, 0, 0, 1, 0], [1.0, 0, 0, 1, 0]])
    m = ingest_pointcloud(pts, IngestConfig(voxel_size=0.1))
    np.testing.assert_allclose(m.positions[0], [(0.02 + 1.0) / 2, 0, 0])


def test_label_remap_modes():
    pts = np.array([[0, 0, 0, 1, 5], [9, 0, 0, 2, 11], [0, 9, 0, 3, 5]], float)
    assert ingest_pointcloud(pts).labels.tolist() == [0, 1, 0]
    ident = ingest_pointcloud(pts, IngestConfig(label_remap="identity"))
    assert ident.labels.tolist() == [5, 11, 5] and ident.n_classes == 12
    explicit = ingest_pointcloud(pts, IngestConfig(label_remap={5: 2, 11: 0}, n_classes=3))
    assert explicit.labels.tolist() == [2, 0, 2]


def test_majority_class_per_instance():
    pts = np.array([[0, 0, 0, 1, 2], [0.5, 0, 0, 1, 2], [1, 0, 0, 1, 3]], float)
    assert ingest_pointcloud(pts, IngestConfig(label_remap="identity")).labels.tolist() == [2]


def test_ingestion_is_idempotent(tmp_path, world):
    m = ingest_pointcloud(map_as_points(world), IngestConfig(label_remap="identity", n_classes=world.n_classes))
    again = ingest_pointcloud(map_as_points(m), IngestConfig(label_remap="identity", n_classes=m.n_classes))
    assert again.same_as(m)
    np.savetxt(tmp_path / "pc.txt", map_as_points(m))
    np.testing.assert_array_equal(read_pointcloud(tmp_path / "pc.txt"), map_as_points(m))


# --- queries -------------------------------------------------------------------------


def test_truth_pose_recovers_global_coordinates(world):
    for q in sample_queries(world, ScenarioConfig("SelfLocalization", n_queries=50, seed=1)):
        back = q.truth.apply(q.qlsm.positions)
        rows = [world.index_of(int(i)) for i in q.qlsm.ids]
        np.testing.assert_allclose(back, world.positions[rows], atol=1e-9)
        assert q.qlsm.frame_tag == "local"


def test_fewer_objects_is_subset(world):
    a = sample_queries(world, ScenarioConfig("SelfLocalization", n_queries=50, seed=2))
    b = sample_queries(world, ScenarioConfig("FewerObjects", n_queries=50, seed=2))
    for qa, qb in zip(a, b):
        np.testing.assert_array_equal(qa.position, qb.position)
        assert set(qb.qlsm.ids.tolist()) <= set(qa.qlsm.ids.tolist())


def test_added_noise_drops_about_ten_percent(world):
    clean = sample_queries(world, ScenarioConfig("SelfLocalization", n_queries=500, seed=3))
    noisy = sample_queries(world, ScenarioConfig("AddedNoise", n_queries=500, seed=3))
    n = sum(len(q.qlsm) for q in clean)
    kept = sum(len(q.qlsm) for q in noisy)
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert abs(kept - 0.9 * n) <= 3 * sigma


def test_query_sampling_reproducible(world):
    cfg = ScenarioConfig("AddedNoise", n_queries=20, seed=4)
    a, b = sample_queries(world, cfg), sample_queries(world, cfg)
    c = sample_queries(world, ScenarioConfig("AddedNoise", n_queries=20, seed=5))
    for x, y in zip(a, b):
        assert x.qlsm.same_as(y.qlsm) and x.truth == y.truth
    assert any(not x.qlsm.same_as(z.qlsm) for x, z in zip(a, c))


def test_queries_lie_on_custom_path(world):
    cfg = ScenarioConfig(n_queries=30, seed=0, waypoints=((0.0, 0.0), (10.0, 0.0), (10.0, 10.0)))
    for q in sample_queries(world, cfg):
        x, y = q.position
        assert (abs(y) < 1e-9 and -1e-9 <= x <= 10 + 1e-9) or (abs(x - 10) < 1e-9 and -1e-9 <= y <= 10 + 1e-9)


def test_occlusion_hides_objects_behind_nearer_ones():
    rel = np.array([[5.0, 0.0], [10.0, 0.05], [0.0, 8.0]])
    assert occluded(rel, 2.0).tolist() == [False, True, False]
    m = ObjectMap([0, 1, 2], [0, 1, 2], np.column_stack([rel, np.zeros(3)]), 3)
    q, _ = make_qlsm(m, (0, 0), 0.0, 30.0, occlusion_deg=2.0)
    assert q.ids.tolist() == [0, 2]


def test_visual_range_defaults():
    assert ScenarioConfig("SelfLocalization").range == 30.0
    assert ScenarioConfig("FewerObjects").range == 20.0
    assert ScenarioConfig("FewerObjects", visual_range=25).range == 25.0
    with pytest.raises(ValueError):
        ScenarioConfig("Night")


# --- success rate -----------------------------------------------------------------


def _res(err, ok=True):
    return LocalizationResult(PoseSE2z(), [], ok, translation_error=err)


def test_success_rate_examples():
    assert success_rate([_res(e) for e in (0.5, 1.5, 0.2, 2.0)]) == 50.0
    assert success_rate([_res(0.1, False)] * 3) == 0.0
    with pytest.raises(DegenerateInput):
        success_rate([])


def test_success_rate_monotone_in_threshold():
    rng = np.random.default_rng(0)
    res = [_res(float(e), bool(rng.random() < 0.8)) for e in rng.exponential(1.0, 200)]
    rates = [success_rate(res, t) for t in np.linspace(0.01, 5, 40)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))


@pytest.fixture(scope="module")
def small_report(world):
    gcfg = GraphConfig().resolved(world)
    ex = make_extractor("onion_hist", gcfg)
    scen = [ScenarioConfig("SelfLocalization", n_queries=40, n_runs=5, seed=10)]
    return run_benchmark(world, [ex], scen, MatchConfig())


def test_benchmark_std_over_runs(small_report):
    row = small_report.row("onion_hist", "SelfLocalization")
    assert len(row.eta_runs) == 5
    mean = sum(row.eta_runs) / 5
    assert row.eta_mean == pytest.approx(mean)
    assert row.eta_std == pytest.approx(math.sqrt(sum((e - mean) ** 2 for e in row.eta_runs) / 5))


def test_success_rate_recount_from_csv(tmp_path, small_report):
    write_per_query_csv(tmp_path / "q.csv", small_report)
    with open(tmp_path / "q.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 200
    row = small_report.row("onion_hist", "SelfLocalization")
    for run in range(5):
        mine = [r for r in rows if r["run"] == str(run)]
        hits = sum(1 for r in mine if r["success"] == "1" and float(r["trans_err_m"]) < 1.0)
        assert 100.0 * hits / len(mine) == pytest.approx(row.eta_runs[run])


def test_single_run_report_shape(tmp_path, world):
    gcfg = GraphConfig().resolved(world)
    rep = run_benchmark(world, [make_extractor("onion", gcfg)], [ScenarioConfig(n_queries=5, n_runs=1)])
    assert len(rep.rows) == 1 and rep.rows[0].eta_std == 0.0
    write_report_csv(tmp_path / "r.csv", rep)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "extractor,scenario,eta_mean,eta_std,n_runs,t_compute_s,t_match_s,t_total_s"
    assert len(lines) == 2


def test_table_layout(small_report):
    text = format_table(small_report)
    lines = text.splitlines()
    assert lines[0] == "Translation Success Rate (η) [%]"
    assert lines[1].split("|")[0].strip() == "Descriptor"
    assert "Self-localization" in lines[1]
    assert "±" in lines[3]
    assert any(line.startswith("Compute") for line in lines)


def test_results_csv_fields(tmp_path):
    write_results(tmp_path / "r.csv", [_res(0.5)])
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "query_id,success,x,y,yaw_deg,trans_err_m,n_inliers,t_compute_s,t_match_s"
    assert read_results(tmp_path / "r.csv")[0]["trans_err_m"] == "0.5"


def test_empty_qlsm_counts_as_failure(world):
    far = ScenarioConfig(n_queries=3, waypoints=((5000.0, 5000.0), (5001.0, 5000.0)))
    qs = sample_queries(world, far)
    res = run_queries(world, qs, make_extractor("onion", GraphConfig().resolved(world)), MatchConfig())
    assert success_rate(res) == 0.0


def test_benchmark_records_failures(world):
    gcfg = GraphConfig().resolved(world)
    good = make_extractor("onion", gcfg)

    class Flaky(type(good)):
        name = "flaky"
        calls = 0

        def describe(self, m):
            Flaky.calls += 1
            if Flaky.calls > 1:
                raise RuntimeError("boom")
            return super().describe(m)

    rep = run_benchmark(world, [Flaky(gcfg)], [ScenarioConfig(n_queries=2, n_runs=1)])
    assert rep.failures and rep.failures[0][0] == "flaky"
