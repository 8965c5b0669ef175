import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from plyfile import PlyData

from closerange.errors import CollinearDegenerate, DegenerateRays, DisconnectedGraph
from closerange.geometry import random_rotation, umeyama
from closerange.imaging import CameraIntrinsics
from closerange.matching import Match, PoseGraphEdge
from closerange.rotation_averaging import PoseGraph, RotationSet
from closerange.sparse import (
    CameraPose, SparseCloud, build_tracks, export_ply, read_ply, read_poses, recover_positions, triangulate,
    triangulate_tracks, write_poses,
)
from closerange.synthetic import look_at, ring_poses

K = CameraIntrinsics.centered(700.0, 640, 480)


def m(a, b):
    return Match(a, b, 0.0)


def exact_graph(poses: dict[str, CameraPose], pairs, counts=None):
    """Pose graph whose relative rotations and directions are exact."""
    edges = []
    for k, (i, j) in enumerate(pairs):
        Ri, Rj = poses[i].rotation, poses[j].rotation
        t = Rj @ (poses[i].center - poses[j].center)
        n = 100 if counts is None else counts[k]
        edges.append(PoseGraphEdge(i, j, Rj @ Ri.T, t / np.linalg.norm(t), n))
    ids = list(poses)
    g = PoseGraph(ids, edges)
    R0 = poses[ids[0]].rotation
    rot = {c: poses[c].rotation @ R0.T for c in ids}
    rot[ids[0]] = np.eye(3)
    return g, RotationSet(rot, ids[0])


def test_tracks_are_transitive():
    tracks = build_tracks({("A", "B"): [m(1, 2)], ("B", "C"): [m(2, 3)]})
    assert tracks == [(("A", 1), ("B", 2), ("C", 3))]


def test_conflicting_track_is_dropped():
    tracks = build_tracks({("A", "B"): [m(1, 2), m(5, 7)], ("B", "C"): [m(2, 3), m(7, 3)], ("C", "D"): [m(9, 9)]})
    assert tracks == [(("C", 9), ("D", 9))]


def test_no_matches_no_tracks():
    assert build_tracks({}) == []


def test_two_camera_gauge_and_scale():
    g = PoseGraph(["0", "1"], [PoseGraphEdge("0", "1", np.eye(3), np.array([-1.0, 0.0, 0.0]), 50)])
    rs = RotationSet({"0": np.eye(3), "1": np.eye(3)}, "0")
    poses = recover_positions(g, rs)
    assert np.array_equal(poses["0"].center, np.zeros(3))
    assert np.allclose(poses["1"].center, [1.0, 0.0, 0.0], atol=1e-15)


def test_ring_recovered_up_to_similarity():
    ring = {f"v{k}": p for k, p in enumerate(ring_poses(6, radius=5.0, elevation_deg=20.0))}
    ids = list(ring)
    pairs = [(ids[a], ids[b]) for a in range(6) for b in range(a + 1, 6)]
    g, rs = exact_graph(ring, pairs)
    poses = recover_positions(g, rs)
    est = np.array([poses[c].center for c in ids])
    truth = np.array([ring[c].center for c in ids])
    s, R, t = umeyama(est, truth)
    assert np.abs(s * est @ R.T + t - truth).max() < 1e-6


def test_robust_positions_survive_a_wrong_direction():
    ring = {f"v{k}": p for k, p in enumerate(ring_poses(8, radius=5.0, elevation_deg=30.0))}
    ids = list(ring)
    pairs = [(ids[a], ids[b]) for a in range(8) for b in range(a + 1, 8)]
    g, rs = exact_graph(ring, pairs)
    bad = g.edges[5]
    g.edges[5] = PoseGraphEdge(bad.cam_i, bad.cam_j, bad.relative_rotation, np.array([0.0, 0.0, 1.0]), 30)
    poses = recover_positions(g, rs)
    est = np.array([poses[c].center for c in ids])
    truth = np.array([ring[c].center for c in ids])
    s, R, t = umeyama(est, truth)
    assert np.abs(s * est @ R.T + t - truth).max() < 1e-3


def test_collinear_cameras():
    poses = {c: CameraPose(np.eye(3), np.array([x, 0.0, 0.0])) for c, x in zip("abc", (0.0, 1.0, 3.0))}
    g, rs = exact_graph(poses, [("a", "b"), ("b", "c"), ("a", "c")])
    with pytest.raises(CollinearDegenerate) as info:
        recover_positions(g, rs)
    assert set(info.value.cameras) == {"a", "b", "c"}


def test_positions_need_a_connected_graph():
    g = PoseGraph(["a", "b"])
    with pytest.raises(DisconnectedGraph):
        recover_positions(g, RotationSet({"a": np.eye(3), "b": np.eye(3)}, "a"))


def three_views():
    poses = {f"v{k}": p for k, p in enumerate(ring_poses(3, radius=6.0, elevation_deg=30.0))}
    return poses


def observe(poses, X):
    return {c: p.project(X, K)[0] for c, p in poses.items()}


def test_triangulate_exact_point():
    poses = three_views()
    X = np.array([0.3, -0.2, 0.4])
    points = observe(poses, X)
    track = tuple((c, 0) for c in poses)
    out = triangulate(track, poses, K, points)
    assert np.abs(out.position - X).max() < 1e-6
    assert out.error_px < 1e-6


def test_identical_centres_are_degenerate():
    c = np.array([0.0, -6.0, 0.0])
    poses = {"a": CameraPose(look_at(c), c), "b": CameraPose(look_at(c, target=(0.2, 0, 0)), c)}
    points = observe(poses, np.array([[0.1, 0.0, 0.1]]))
    with pytest.raises(DegenerateRays):
        triangulate((("a", 0), ("b", 0)), poses, K, points)


def test_point_behind_a_camera_is_rejected():
    ca, cb = np.array([-1.0, -6.0, 0.0]), np.array([1.0, -6.0, 0.0])
    poses = {"a": CameraPose(look_at(ca), ca), "b": CameraPose(look_at(cb), cb)}
    X = np.array([0.0, -9.0, 0.0])  # behind both cameras
    points = {c: p.project(X, K)[0] for c, p in poses.items()}
    assert triangulate((("a", 0), ("b", 0)), poses, K, points) is None


def test_triangulate_tracks_counts():
    poses = three_views()
    X = np.array([[0.3, -0.2, 0.4], [0.0, 0.1, -0.3]])
    points = observe(poses, X)
    tracks = [tuple((c, 0) for c in poses), (("v0", 1), ("v1", 1)), (("v0", 1), ("zz", 0))]
    cloud, stats = triangulate_tracks(tracks, poses, K, points)
    assert len(cloud) == 2
    assert stats["unposed"] == 1
    assert np.abs(cloud.points - X).max() < 1e-6


def test_empty_cloud_ply(tmp_path):
    export_ply(SparseCloud(np.zeros((0, 3)), np.zeros(0)), tmp_path / "e.ply")
    assert PlyData.read(str(tmp_path / "e.ply"))["vertex"].count == 0
    assert len(read_ply(tmp_path / "e.ply")) == 0


@pytest.mark.parametrize("binary", [False, True])
def test_single_point_ply(tmp_path, binary):
    cloud = SparseCloud(np.array([[1.0, 2.0, 3.0]]), np.zeros(1), colors=np.array([[10, 20, 30]]))
    export_ply(cloud, tmp_path / "p.ply", binary=binary)
    v = PlyData.read(str(tmp_path / "p.ply"))["vertex"]
    assert (v["x"][0], v["y"][0], v["z"][0]) == (1.0, 2.0, 3.0)
    assert (v["red"][0], v["green"][0], v["blue"][0]) == (10, 20, 30)
    back = read_ply(tmp_path / "p.ply")
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.colors, cloud.colors)


@given(arrays(np.float64, (7, 3), elements=st.floats(-1e4, 1e4)), st.booleans())
def test_ply_roundtrip(pts, binary):
    import tempfile
    import os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "c.ply")
        export_ply(SparseCloud(pts, np.zeros(7)), path, binary=binary)
        back = read_ply(path)
        v = PlyData.read(path)["vertex"]
    expected = pts.astype(np.float32).astype(np.float64)
    assert np.array_equal(back.points, expected)
    assert np.array_equal(np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64), expected)


def test_poses_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    poses = {f"c{k}": CameraPose(random_rotation(rng), rng.normal(size=3)) for k in range(4)}
    write_poses(poses, tmp_path / "poses.txt")
    back = read_poses(tmp_path / "poses.txt")
    for c, p in poses.items():
        assert np.array_equal(back[c].rotation, p.rotation)
        assert np.array_equal(back[c].center, p.center)


def test_camera_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(2 * np.eye(3), np.zeros(3))
    p = CameraPose(np.eye(3), np.array([0.0, 0.0, -5.0]))
    uv, z = p.project(np.zeros(3), K)
    assert z[0] == 5.0
    assert np.allclose(uv[0], K.principal_point)
