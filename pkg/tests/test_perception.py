import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from blockpred.lidar import build_global_map, default_sensors, scan_registered
from blockpred.perception import (
    BackgroundIndex, ClusterParams, cluster_humans, detect, euclidean_clusters, subtract_background,
    two_means, write_detection_dump,
)
from blockpred.scene import Scene, SceneConfig, generate_scene


@pytest.fixture(scope="module")
def sensors():
    return default_sensors()


@pytest.fixture(scope="module")
def gmap(sensors):
    return build_global_map(sensors, seed=123)


@pytest.fixture(scope="module")
def bg(gmap):
    return BackgroundIndex(gmap.points)


def parked(positions, frames=1):
    pos = np.asarray(positions, float).reshape(-1, 2)
    cfg = SceneConfig(n_humans=len(pos), duration=frames)
    return Scene(cfg, np.repeat(pos[None], frames, axis=0), pos.copy())


def cylinder_points(center, n, rng, radius=0.25, height=1.7):
    a = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), rng.uniform(0.2, height, n)])


def test_self_subtraction_is_empty(gmap):
    assert len(subtract_background(gmap, gmap)) == 0


def test_planted_points_survive_exactly(gmap):
    extra = cylinder_points((1.0, -2.0), 50, np.random.default_rng(0))
    frame = np.vstack([gmap.points, extra])
    out = subtract_background(frame, gmap)
    assert len(out) == 50
    assert np.array_equal(np.sort(out, axis=0), np.sort(extra, axis=0))


def test_result_is_subset(gmap, sensors, bg):
    sc = generate_scene(SceneConfig(n_humans=5, duration=30, rng_seed=2))
    frame = scan_registered(sc, 20, sensors, seed=4)
    out = subtract_background(frame, bg)
    rows = {tuple(p) for p in frame.points}
    assert all(tuple(p) in rows for p in out)
    assert 0 < len(out) < len(frame)


def test_index_matches_plain_tree_query(gmap, sensors):
    idx = BackgroundIndex(gmap.points)
    tree = cKDTree(gmap.points)
    sc = generate_scene(SceneConfig(n_humans=8, duration=60, rng_seed=7))
    rng = np.random.default_rng(1)
    for t in (5, 30, 55):
        pts = scan_registered(sc, t, sensors, seed=t).points
        # plus points straddling the radius around map points
        probe = gmap.points[rng.choice(len(gmap), 2000)] + rng.normal(0, 0.07, (2000, 3))
        pts = np.vstack([pts, probe])
        d, _ = tree.query(pts)
        assert np.array_equal(idx.background_mask(pts), d <= 0.1)


def test_empty_map_rejected():
    with pytest.raises(ValueError):
        BackgroundIndex(np.zeros((0, 3)))


def test_empty_input_clusters_to_nothing():
    assert cluster_humans(np.zeros((0, 3))) == []
    assert euclidean_clusters(np.zeros((0, 3)), 0.25) == []


def test_two_people_far_apart(sensors, bg):
    frame = scan_registered(parked([[0.0, 0.0], [3.0, 0.0]]), 0, sensors, seed=0)
    clusters = cluster_humans(subtract_background(frame, bg))
    assert len(clusters) == 2


def test_near_contact_pair_is_split(sensors, bg):
    # centres 0.4 m apart: one linked blob before the split step
    scene = parked([[2.0, 1.0], [2.4, 1.0]])
    dyn = subtract_background(scan_registered(scene, 0, sensors, seed=0), bg)
    params = ClusterParams()
    raw = [g for g in euclidean_clusters(dyn, params.link_distance, params.z_scale) if len(g) >= params.min_points]
    assert len(raw) == 1
    parts = cluster_humans(dyn, params)
    assert len(parts) == 2
    cx = sorted(p[:, 0].mean() for p in parts)
    assert cx[0] < 2.2 < cx[1]


def test_clusters_are_disjoint_and_plausible(sensors, bg):
    sc = generate_scene(SceneConfig(n_humans=10, duration=100, rng_seed=3))
    dyn = subtract_background(scan_registered(sc, 50, sensors, seed=1), bg)
    clusters = cluster_humans(dyn)
    seen = set()
    for c in clusters:
        rows = {tuple(p) for p in c}
        assert not rows & seen
        seen |= rows
        assert len(c) >= 10 and 0.8 <= np.ptp(c[:, 2]) <= 2.2


def test_two_means_seeds_from_far_pair():
    xy = np.array([[0, 0], [0.1, 0], [0.2, 0], [5, 0], [5.1, 0]], float)
    lab = two_means(xy)
    assert lab[:3].tolist() == [lab[0]] * 3 and lab[3] == lab[4] != lab[0]


def test_detect_round_trip(sensors, gmap, bg):
    errs = []
    for seed in range(3):
        sc = generate_scene(SceneConfig(n_humans=5, duration=250, rng_seed=seed))
        for t in range(0, 250, 25):
            truth = sc.trajectories[t]
            sep = np.linalg.norm(truth[:, None] - truth[None], axis=2) + np.eye(5) * 99
            if sep.min() < 1.5:
                continue
            dets = detect(scan_registered(sc, t, sensors, seed=t), bg)
            assert len(dets) == 5
            for d in dets:
                e = np.linalg.norm(truth - d.xy, axis=1).min()
                errs.append(e)
                assert d.aabb.contains(d.centroid)
    assert errs and max(errs) < 0.3


def test_static_frame_gives_no_detections(sensors, gmap, bg):
    frame = scan_registered(None, 5, sensors, seed=77, include_humans=False)
    assert detect(frame, bg) == []
    assert detect(frame, gmap) == []


def test_detect_is_deterministic(sensors, bg):
    sc = generate_scene(SceneConfig(n_humans=6, duration=60, rng_seed=9))
    frame = scan_registered(sc, 40, sensors, seed=2)
    a, b = detect(frame, bg), detect(frame, bg)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.centroid, y.centroid)
        assert np.array_equal(x.obb.rotation, y.obb.rotation)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_detection_boxes_contain_their_points(seed):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-8, 8, (3, 2))
    pts = np.vstack([cylinder_points(c, 200, rng) for c in centers])
    for c in cluster_humans(pts):
        from blockpred.perception import make_detection
        d = make_detection(c)
        assert all(d.aabb.contains(p) for p in c)
        assert all(d.obb.contains(p, tol=1e-9) for p in c)


def test_detection_dump(tmp_path, sensors, bg):
    sc = parked([[0.0, 0.0]])
    dets = detect(scan_registered(sc, 0, sensors, seed=0), bg)
    write_detection_dump([(0, dets)], tmp_path / "d.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert len(rows) == 1
    r = rows[0]
    assert r["frame"] == 0 and len(r["aabb"]) == 6 and len(r["obb"]["rotation"]) == 9
    np.testing.assert_allclose(np.array(r["obb"]["rotation"]).reshape(3, 3), dets[0].obb.rotation)
