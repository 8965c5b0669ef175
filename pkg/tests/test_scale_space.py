import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from closerange import scale_space as ss
from closerange.errors import ImageTooSmall
from closerange.imaging import gaussian_blur


def blob_lattice(radius, spacing=4.0, n=128, cx=64.3, cy=63.6):
    """Gaussian blobs on a square lattice (pitch ``spacing * radius``) with one centred at (cx, cy)."""
    y, x = np.mgrid[0:n, 0:n].astype(float)
    pitch = spacing * radius
    img = np.zeros((n, n))
    for i in range(-12, 13):
        for j in range(-12, 13):
            img += np.exp(-((x - cx - i * pitch) ** 2 + (y - cy - j * pitch) ** 2) / (2 * radius**2))
    return 0.1 + 0.8 * img / img.max()


def test_constant_image_is_a_fixed_point():
    img = np.full((64, 64), 0.37)
    levels = ss.build_scale_space(img, octaves=3)
    for lv in levels:
        assert np.allclose(lv.image, 0.37, atol=1e-15)
        assert np.all(ss.hessian_response(lv) == 0.0)


def test_level_layout():
    levels = ss.build_scale_space(np.random.default_rng(0).random((128, 128)))
    assert len(levels) == 16
    sig = [lv.sigma for lv in levels]
    assert all(b > a for a, b in zip(sig, sig[1:]))
    assert [lv.octave for lv in levels] == [o for o in range(4) for _ in range(4)]
    assert levels[4].image.shape == (64, 64)


def test_too_small_for_octaves():
    with pytest.raises(ImageTooSmall):
        ss.build_scale_space(np.zeros((64, 64)), octaves=4)


def test_diffusion_step_conserves_mass():
    x = np.tile(np.arange(48.0), (40, 1))
    L = np.where(x > 20, 0.9, 0.1)
    g = ss.pm_g2(np.gradient(L, axis=1), np.gradient(L, axis=0), 0.05)
    total = L.sum()
    for tau in ss.fed_tau(6.0):
        L = ss.diffusion_step(L, g, tau)
        assert abs(L.sum() - total) <= 1e-6 * total


@given(st.floats(0.01, 40.0))
def test_fed_cycle_sums_to_requested_time(total):
    taus = ss.fed_tau(total)
    assert taus.sum() == pytest.approx(total, rel=1e-12)
    assert np.all(taus > 0)


def test_paraboloid_response_is_constant():
    a = 1e-4
    y, x = np.mgrid[0:60, 0:60].astype(float)
    img = a * ((x - 30) ** 2 + (y - 30) ** 2)
    level = ss.ScaleLevel(img, 0, 1, 2.0, 2.0)
    t = ss.response_time(level)
    resp = ss.hessian_response(level)
    # Lxx = Lyy = 2a, Lxy = 0
    assert np.allclose(resp[5:-5, 5:-5], t * t * 4 * a * a, rtol=1e-9)


@given(st.floats(-0.2, 0.2))
def test_response_invariant_to_offset(c):
    img = 0.3 + 0.4 * gaussian_blur(np.random.default_rng(1).random((64, 64)), 2.0)
    a = ss.build_scale_space(img, octaves=2)
    b = ss.build_scale_space(img + c, octaves=2)
    for la, lb in zip(a, b):
        ra, rb = ss.hessian_response(la), ss.hessian_response(lb)
        assert np.abs(ra - rb).max() <= 1e-9 * max(np.abs(ra).max(), 1e-12)


def test_lattice_blob_scale_selection():
    img = blob_lattice(4.0)
    levels = ss.build_scale_space(img)
    # exhaustive scan of the response over every level near the centre blob
    best = None
    for lv in levels:
        r = ss.hessian_response(lv)
        f = lv.ratio
        ys, xs = np.mgrid[0 : r.shape[0], 0 : r.shape[1]]
        near = np.hypot((xs + 0.5) * f - 0.5 - 64.3, (ys + 0.5) * f - 0.5 - 63.6) < 6
        k = np.argmax(np.where(near, r, -np.inf))
        if best is None or r.ravel()[k] > best[0]:
            best = (r.ravel()[k], lv)
    assert abs(np.log2(best[1].sigma / 4.0)) * 4 <= 1.0
    kps = ss.detect_keypoints(levels, threshold=1e-5)
    centre = min(kps, key=lambda k: np.hypot(k.x - 64.3, k.y - 63.6))
    assert np.hypot(centre.x - 64.3, centre.y - 63.6) < 1.0
    assert abs(np.log2(centre.sigma / 4.0)) * 4 <= 1.0


@pytest.mark.xfail(reason="on an empty background the contrast factor collapses, so diffusion preserves the blob edge "
                          "and the response peaks several sublevels too coarse", strict=True)
def test_isolated_blob_scale_selection():
    y, x = np.mgrid[0:128, 0:128].astype(float)
    img = 0.1 + 0.8 * np.exp(-((x - 64.3) ** 2 + (y - 63.6) ** 2) / (2 * 4.0**2))
    kp = ss.detect(img)[0]
    assert abs(np.log2(kp.sigma / 4.0)) * 4 <= 1.0


def test_single_blob_gives_one_keypoint():
    y, x = np.mgrid[0:128, 0:128].astype(float)
    img = 0.9 * np.exp(-((x - 64.3) ** 2 + (y - 63.6) ** 2) / (2 * 4.0**2))
    kps = ss.detect(img)
    assert len(kps) == 1
    assert np.hypot(kps[0].x - 64.3, kps[0].y - 63.6) < 1.0


def test_constant_image_has_no_keypoints():
    assert ss.detect(np.full((128, 128), 0.5)) == []


def test_threshold_above_maximum():
    img = blob_lattice(4.0)
    levels = ss.build_scale_space(img)
    top = max(ss.hessian_response(lv).max() for lv in levels)
    assert ss.detect_keypoints(levels, threshold=top * 1.01) == []
    assert ss.detect_keypoints(levels, threshold=1e-5)


def test_plateau_has_exactly_one_maximum():
    flat = np.zeros((9, 9))
    flat[3:6, 3:6] = 1.0
    stack = [np.zeros((9, 9)), flat, np.zeros((9, 9))]
    assert len(ss.local_maxima(stack, 0.5, border=1)) == 1


def test_detection_is_deterministic_and_sorted():
    img = blob_lattice(3.0)
    a = ss.detect(img, image_id="a")
    b = ss.detect(img, image_id="a")
    assert a == b
    assert all(p.response >= q.response for p, q in zip(a, a[1:]))
    capped = ss.detect(img, ss.DetectorParams(max_keypoints=5))
    assert capped == [ss.Keypoint(k.x, k.y, k.sigma, k.response, "", k.octave) for k in a[:5]]
