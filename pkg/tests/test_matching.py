import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from closerange import matching as M
from closerange.errors import DegenerateGeometry, InsufficientMatches
from closerange.geometry import geodesic_angle, so3_exp
from closerange.imaging import CameraIntrinsics
from closerange.liop import describe
from closerange.scale_space import detect
from closerange.synthetic import face_texture, two_view


def all_matches(n):
    return [M.Match(k, k, 0.0) for k in range(n)]


def direction_error(t, t_true):
    return float(np.arccos(np.clip(t @ t_true, -1.0, 1.0)))


def test_self_matching():
    d = np.random.default_rng(0).random((40, 16))
    ms = M.match_descriptors(d, d)
    assert [(m.index_a, m.index_b) for m in ms] == [(k, k) for k in range(40)]
    assert all(m.distance == 0.0 for m in ms)


@pytest.mark.parametrize("ratio", [0.5, 0.8, 0.99])
def test_equidistant_candidates_are_rejected(ratio):
    q = np.array([[0.0, 0.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert M.match_descriptors(q, b, ratio) == []


@given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.integers(1, 30))
def test_matching_is_symmetric(seed, na, nb):
    rng = np.random.default_rng(seed)
    a = rng.random((na, 8))
    near = a[: min(na, nb) // 2]
    b = np.vstack([near + 0.01 * rng.random(near.shape), rng.random((nb - len(near), 8))])
    ab = {(m.index_a, m.index_b) for m in M.match_descriptors(a, b)}
    ba = {(m.index_b, m.index_a) for m in M.match_descriptors(b, a)}
    assert ab == ba


def test_rotated_texture_matches():
    tex = face_texture(np.random.default_rng(0), 256)
    n, c = 256, 127.5
    th = np.radians(10.0)
    Rm = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    y, x = np.mgrid[0:n, 0:n].astype(float)
    src = np.einsum("ij,jhw->ihw", Rm.T, np.stack([x - c, y - c])) + c
    rot = np.clip(map_coordinates(tex, [src[1], src[0]], order=3, mode="reflect"), 0, 1)
    fa, fb = describe(tex, detect(tex)), describe(rot, detect(rot))
    ms = M.match_descriptors(fa.descriptors, fb.descriptors)
    pred = (fa.points() - c) @ Rm.T + c
    correct = [np.linalg.norm(pred[m.index_a] - fb.points()[m.index_b]) < 3.0 for m in ms]
    assert len(ms) >= 0.8 * len(fa)
    assert np.mean(correct) >= 0.95


def test_eight_point_satisfies_epipolar_constraint():
    case = two_view(np.random.default_rng(1), 30)
    xa = M.normalize_points(case.pts_a, case.K)
    xb = M.normalize_points(case.pts_b, case.K)
    E = M.eight_point(xa, xb)
    assert np.abs(np.einsum("ni,ij,nj->n", xb, E, xa)).max() < 1e-10
    s = np.linalg.svd(E, compute_uv=False)
    assert s[0] == pytest.approx(s[1]) and s[2] < 1e-12
    E_true = M.essential_from_pose(case.R_ij, case.t_ij)
    assert min(np.abs(E / np.linalg.norm(E) - sg * E_true / np.linalg.norm(E_true)).max() for sg in (1, -1)) < 1e-8


def test_cheirality_picks_the_true_decomposition():
    case = two_view(np.random.default_rng(2), 50)
    xa = M.normalize_points(case.pts_a, case.K)
    xb = M.normalize_points(case.pts_b, case.K)
    E = M.essential_from_pose(case.R_ij, case.t_ij)
    counts = [M.cheirality_count(R, t, xa, xb) for R, t in M.decompose_essential(E)]
    assert sorted(counts)[-1] == 50 and sorted(counts)[-2] < 50
    n, R, t = M.select_pose(E, xa, xb)
    assert geodesic_angle(R, case.R_ij) < 1e-10
    assert direction_error(t, case.t_ij) < 1e-10


def test_verify_recovers_noise_free_pose():
    case = two_view(np.random.default_rng(3), 50)
    edge = M.verify_epipolar(all_matches(50), case.pts_a, case.pts_b, case.K, cam_i="a", cam_j="b")
    assert geodesic_angle(edge.relative_rotation, case.R_ij) < 1e-4
    assert direction_error(edge.relative_direction, case.t_ij) < 1e-4
    assert edge.inlier_count == 50
    assert (edge.cam_i, edge.cam_j) == ("a", "b")


def test_verify_with_noise_and_outliers():
    case = two_view(np.random.default_rng(4), 300, noise_px=0.5, outlier_fraction=0.3)
    edge = M.verify_epipolar(all_matches(300), case.pts_a, case.pts_b, case.K, seed=7)
    assert np.degrees(geodesic_angle(edge.relative_rotation, case.R_ij)) < 0.5
    assert np.degrees(direction_error(edge.relative_direction, case.t_ij)) < 3.0
    assert 180 <= edge.inlier_count <= 215


def test_seeded_ransac_is_reproducible():
    case = two_view(np.random.default_rng(5), 200, noise_px=1.0, outlier_fraction=0.2)
    a = M.verify_epipolar(all_matches(200), case.pts_a, case.pts_b, case.K, seed=11)
    b = M.verify_epipolar(all_matches(200), case.pts_a, case.pts_b, case.K, seed=11)
    assert np.array_equal(a.relative_rotation, b.relative_rotation)
    assert a.inlier_matches == b.inlier_matches


def test_too_few_matches():
    case = two_view(np.random.default_rng(6), 7)
    with pytest.raises(InsufficientMatches):
        M.verify_epipolar(all_matches(7), case.pts_a, case.pts_b, case.K)


def test_pure_rotation_of_a_plane_is_degenerate():
    rng = np.random.default_rng(7)
    K = CameraIntrinsics.centered(800.0, 640, 480)
    X = np.column_stack([rng.uniform(-1, 1, 60), rng.uniform(-1, 1, 60), np.full(60, 5.0)])
    R = so3_exp(np.array([0.0, 0.05, 0.01]))
    proj = lambda P: P[:, :2] / P[:, 2:] * 800.0 + np.array(K.principal_point)  # noqa: E731
    with pytest.raises(DegenerateGeometry):
        M.verify_epipolar(all_matches(60), proj(X), proj(X @ R.T), K)


def test_reversed_edge():
    case = two_view(np.random.default_rng(8), 40)
    e = M.verify_epipolar(all_matches(40), case.pts_a, case.pts_b, case.K, cam_i="a", cam_j="b")
    r = e.reversed()
    assert (r.cam_i, r.cam_j) == ("b", "a")
    assert np.allclose(r.relative_rotation @ e.relative_rotation, np.eye(3))
    assert [(m.index_b, m.index_a) for m in r.inlier_matches] == [(m.index_a, m.index_b) for m in e.inlier_matches]
