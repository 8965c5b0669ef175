import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from closerange.errors import DimensionMismatch, ImageTooSmall
from closerange.imaging import CameraIntrinsics, GrayImage
from closerange.quality import evaluate_set, render_pointcloud, save_ssim_map, ssim, write_ssim_csv
from closerange.sparse import CameraPose, SparseCloud

images = arrays(np.float64, (16, 16), elements=st.floats(0.0, 1.0))


def direct_global_ssim(x, y, k1=0.01, k2=0.03, L=1.0):
    """Single-window SSIM written out term by term."""
    n = x.size
    mx, my = x.sum() / n, y.sum() / n
    vx = ((x - mx) ** 2).sum() / n
    vy = ((y - my) ** 2).sum() / n
    cxy = ((x - mx) * (y - my)).sum() / n
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_identical_images_score_one():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.random((40, 50))
        assert ssim(x, x).mean_ssim == 1.0
        assert ssim(x, x, window="global").mean_ssim == 1.0


def test_constant_pair_closed_form():
    a, b = 100 / 255, 110 / 255
    expected = (2 * a * b + 1e-4) / (a * a + b * b + 1e-4)
    for window in ("gaussian", "global"):
        got = ssim(np.full((20, 20), a), np.full((20, 20), b), window=window).mean_ssim
        assert got == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.99548, abs=1e-5)


def test_checkerboard_against_negative():
    y, x = np.mgrid[0:32, 0:32]
    board = ((x // 4 + y // 4) % 2).astype(float)
    assert ssim(board, 1 - board).mean_ssim < 0
    assert ssim(board, 1 - board, window="global").mean_ssim == pytest.approx(
        direct_global_ssim(board, 1 - board), abs=1e-12)


@given(images, images)
def test_global_window_matches_direct_formula(x, y):
    assert ssim(x, y, window="global").mean_ssim == pytest.approx(direct_global_ssim(x, y), abs=1e-10)


@given(images, images)
def test_symmetry(x, y):
    assert abs(ssim(x, y).mean_ssim - ssim(y, x).mean_ssim) <= 1e-12


@given(images, images)
def test_bounded(x, y):
    r = ssim(x, y)
    assert -1.0 <= r.mean_ssim <= 1.0
    assert r.ssim_map.shape == (6, 6)


def test_matches_skimage_gaussian_mode():
    rng = np.random.default_rng(1)
    x = rng.random((48, 64))
    y = np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1)
    ref, full = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                      use_sample_covariance=False, full=True)
    ours = ssim(x, y)
    # skimage averages over the same valid region it crops
    assert ours.mean_ssim == pytest.approx(ref, abs=1e-9)
    assert np.allclose(ours.ssim_map, full[5:-5, 5:-5], atol=1e-9)


def test_size_checks():
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((20, 20)), np.zeros((20, 21)))
    with pytest.raises(ImageTooSmall):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_ids_and_map_png(tmp_path):
    a = GrayImage(np.full((12, 12), 0.5), "render_1")
    b = GrayImage(np.full((12, 12), 0.5), "photo_1")
    r = ssim(a, b)
    assert r.image_pair == ("render_1", "photo_1")
    save_ssim_map(r, tmp_path / "map.png")
    assert (tmp_path / "map.png").stat().st_size > 0


K = CameraIntrinsics.centered(100.0, 64, 48)
FRONT = CameraPose(np.eye(3), np.zeros(3))


def test_empty_cloud_renders_background():
    img = render_pointcloud(SparseCloud(np.zeros((0, 3)), np.zeros(0)), FRONT, K, background=0.25)
    assert img.shape == (48, 64) and np.all(img.data == 0.25)


def test_single_point_lands_on_its_pixel():
    X = np.array([[0.1, -0.05, 2.0]])
    u, v = 100 * 0.1 / 2 + 31.5, 100 * -0.05 / 2 + 23.5
    img = render_pointcloud(SparseCloud(X, np.zeros(1)), FRONT, K, splat_px=0)
    assert img.data[int(round(v)), int(round(u))] == 1.0
    assert np.count_nonzero(img.data) == 1


def test_nearer_point_wins():
    pts = np.array([[0.0, 0.0, 4.0], [0.0, 0.0, 2.0]])
    cols = np.array([[255, 255, 255], [51, 51, 51]])
    img = render_pointcloud(SparseCloud(pts, np.zeros(2), colors=cols), FRONT, K, splat_px=1)
    assert img.data[24, 32] == pytest.approx(0.2)
    assert img.data[23, 32] == pytest.approx(0.2)


def test_set_evaluation(tmp_path):
    rng = np.random.default_rng(2)
    photos = [rng.random((20, 20)) for _ in range(3)]
    ev = evaluate_set(photos, photos, set_id="s")
    assert ev.row() == ("s", 3, 1.0)
    single = evaluate_set([photos[0]], [photos[1]])
    assert single.average == single.pairs[0].mean_ssim
    swapped = evaluate_set(photos[:2], photos[1::-1], pairing={0: 1, 1: 0})
    assert swapped.average == 1.0
    with pytest.raises(ValueError):
        evaluate_set(photos, photos[:2])
    assert evaluate_set([], []).average is None
    write_ssim_csv(ev, tmp_path / "ssim.csv")
    assert (tmp_path / "ssim.csv").read_text().splitlines()[0] == "render,original,mean_ssim"
