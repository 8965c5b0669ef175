import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter, map_coordinates

from closerange import liop as L
from closerange.errors import DegeneratePatch, IncompatibleFeatures, OutOfBounds
from closerange.scale_space import Keypoint


def textured(n=41, seed=0, sigma=2.0):
    """Smooth random texture with distinct values."""
    rng = np.random.default_rng(seed)
    t = gaussian_filter(rng.normal(size=(n, n)), sigma, mode="wrap")
    return (t - t.min()) / np.ptp(t)


def test_constant_image_gives_constant_patch():
    img = np.full((100, 100), 0.42)
    patch = L.sample_patch(img, Keypoint(50.0, 50.0, 3.0, 1.0))
    assert patch.shape == (41, 41)
    assert np.allclose(patch, 0.42, atol=1e-15)


def test_region_outside_image():
    with pytest.raises(OutOfBounds):
        L.sample_patch(np.zeros((100, 100)), Keypoint(2.0, 50.0, 4.0, 1.0))


def test_ramp_resamples_to_ramp():
    y, x = np.mgrid[0:120, 0:120].astype(float)
    img = 0.2 + x / 200.0
    kp = Keypoint(60.0, 60.0, 2.0, 1.0)
    patch = L.sample_patch(img, kp)
    # each patch step spans 6 * sigma / 20 image pixels
    u = (np.arange(41) - 20) * 0.6
    expected = 0.2 + (60.0 + u) / 200.0
    inner = slice(4, -4)
    assert np.abs(patch[inner, inner] - expected[None, inner]).max() < 1e-3


@pytest.mark.parametrize("neighbors", [2, 3, 4, 5])
@pytest.mark.parametrize("bins", [1, 4, 6])
def test_descriptor_length(neighbors, bins):
    d = L.compute_liop(textured(), neighbors, bins)
    assert d.shape == (bins * math.factorial(neighbors),)
    assert L.LiopParams(neighbors=neighbors, bins=bins).length == d.size
    assert np.linalg.norm(d) == pytest.approx(1.0)


def test_ramp_patch_descriptor():
    y, x = np.mgrid[0:41, 0:41].astype(float)
    d = L.compute_liop(0.1 + (x + 0.37 * y) / 100.0)
    blocks = d.reshape(6, 24)
    assert d.size == 144
    assert np.linalg.norm(d) == pytest.approx(1.0)
    assert all(np.count_nonzero(b) <= 24 for b in blocks)


def test_constant_patch_is_degenerate():
    with pytest.raises(DegeneratePatch):
        L.compute_liop(np.full((41, 41), 0.5))


def test_quarter_turn_invariance():
    p = textured()
    for k in (1, 2, 3):
        assert np.linalg.norm(L.compute_liop(np.rot90(p, k)) - L.compute_liop(p)) < 1e-2


def test_gamma_keeps_assignments_bitwise():
    p = textured(seed=4)
    b0, q0 = L.liop_assignments(p)
    b1, q1 = L.liop_assignments(p**0.5)
    assert np.array_equal(b0, b1)
    assert np.array_equal(q0, q1)


@given(st.integers(0, 2**31 - 1), st.floats(0.25, 4.0), st.floats(0.0, 3.0))
def test_monotone_maps_keep_assignments(seed, power, offset):
    rng = np.random.default_rng(seed)
    # distinct, well separated intensities so the map cannot create ties
    p = (rng.permutation(41 * 41).reshape(41, 41) + 1.0) / (41 * 41)
    b0, q0 = L.liop_assignments(p)
    b1, q1 = L.liop_assignments(np.log1p(p**power) + offset)
    assert np.array_equal(b0, b1)
    assert np.array_equal(q0, q1)


@pytest.mark.xfail(reason="neighbour rays are anchored to the patch frame; only quarter turns map samples onto samples",
                   strict=True)
def test_arbitrary_rotation_invariance():
    n, c = 201, 100.0
    img = textured(n, seed=2, sigma=3.0)
    th = np.radians(30.0)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    xs = np.cos(th) * (xx - c) + np.sin(th) * (yy - c) + c
    ys = -np.sin(th) * (xx - c) + np.cos(th) * (yy - c) + c
    rot = np.clip(map_coordinates(img, [ys, xs], order=3, mode="reflect"), 0, 1)
    kp = Keypoint(c, c, 2.5, 1.0)
    d0 = L.compute_liop(L.sample_patch(img, kp))
    d1 = L.compute_liop(L.sample_patch(rot, kp))
    assert np.linalg.norm(d1 - d0) < 1e-2


def test_permutation_index_is_a_bijection():
    for n in (2, 3, 4):
        perms = np.array(L.all_permutations(n))
        idx = L.permutation_index(perms)
        assert sorted(idx) == list(range(math.factorial(n)))
        assert idx[0] == 0


def test_features_roundtrip(tmp_path):
    img = textured(160, seed=1, sigma=3.0)
    kps = [Keypoint(80.0, 80.0, 2.0, 0.5, "im", 0), Keypoint(60.5, 90.25, 1.5, 0.25, "im", 0)]
    feats = L.describe(img, kps)
    feats.image_id = "im"
    feats.save(tmp_path / "im.feat")
    back = L.Features.load(tmp_path / "im.feat", expect=L.LiopParams())
    assert back.keypoints == feats.keypoints
    assert np.allclose(back.descriptors, feats.descriptors, atol=1e-7)
    with pytest.raises(IncompatibleFeatures):
        L.Features.load(tmp_path / "im.feat", expect=L.LiopParams(bins=4))
    (tmp_path / "bad.feat").write_bytes(b"nope\n")
    with pytest.raises(IncompatibleFeatures):
        L.Features.load(tmp_path / "bad.feat")


def test_describe_drops_border_keypoints():
    img = textured(100, seed=5, sigma=3.0)
    kps = [Keypoint(50.0, 50.0, 2.0, 1.0), Keypoint(3.0, 50.0, 2.0, 1.0)]
    feats = L.describe(img, kps)
    assert len(feats) == 1
    assert feats.keypoints[0].x == 50.0
