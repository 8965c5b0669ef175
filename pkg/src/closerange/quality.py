"""Structural similarity scoring of reconstruction renders against the source photos."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch, ImageTooSmall
from .imaging import CameraIntrinsics, GrayImage, as_array, gaussian_kernel1d, save_image
from .sparse import CameraPose, SparseCloud

K1 = 0.01
K2 = 0.03
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


@dataclass(frozen=True, eq=False)
class SsimResult:
    mean_ssim: float
    ssim_map: np.ndarray
    window: str
    image_pair: tuple[str, str] = ("", "")


def _ids(x, y) -> tuple[str, str]:
    return (getattr(x, "image_id", ""), getattr(y, "image_id", ""))


def _window_means(a: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Gaussian-weighted window means at every centre whose window lies inside the image."""
    g = gaussian_kernel1d(sigma, radius=size // 2)
    r = size // 2
    out = correlate1d(a, g, axis=0, mode="nearest")
    out = correlate1d(out, g, axis=1, mode="nearest")
    return out[r : a.shape[0] - r, r : a.shape[1] - r]


def ssim(
    x,
    y,
    k1: float = K1,
    k2: float = K2,
    dynamic_range: float = 1.0,
    window: str = "gaussian",
    window_size: int = WINDOW_SIZE,
    sigma: float = WINDOW_SIGMA,
) -> SsimResult:
    """Mean SSIM of two equally sized grayscale images.

    ``window="gaussian"`` slides an ``window_size`` Gaussian window over the
    valid region; ``window="global"`` evaluates one uniform window covering
    the whole image.
    """
    if not (k1 > 0 and k2 > 0):
        raise ValueError("k1 and k2 must be positive")
    a = np.asarray(as_array(x), dtype=np.float64)
    b = np.asarray(as_array(y), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image sizes differ: {a.shape} vs {b.shape}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    if window == "global":
        mean = lambda v: np.array([[v.mean()]])  # noqa: E731
        label = "global-uniform"
    elif window == "gaussian":
        if min(a.shape) < window_size:
            raise ImageTooSmall(f"image {a.shape} smaller than the {window_size}px window")
        mean = lambda v: _window_means(v, window_size, sigma)  # noqa: E731
        label = f"gaussian-{window_size}-sigma{sigma:g}"
    else:
        raise ValueError(f"unknown window {window!r}")
    mu_x, mu_y = mean(a), mean(b)
    var_x = mean(a * a) - mu_x * mu_x
    var_y = mean(b * b) - mu_y * mu_y
    cov = mean(a * b) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    smap = np.clip(num / den, -1.0, 1.0)
    return SsimResult(float(smap.mean()), smap, label, _ids(x, y))


def save_ssim_map(result: SsimResult, path) -> None:
    """PNG of the map with [-1, 1] mapped affinely onto [0, 255]."""
    save_image(np.clip((result.ssim_map + 1.0) / 2.0, 0.0, 1.0), path)


def render_pointcloud(
    cloud: SparseCloud,
    pose: CameraPose,
    K: CameraIntrinsics,
    splat_px: int = 1,
    background: float = 0.0,
    image_id: str = "",
) -> GrayImage:
    """Z-buffered disc splats of the cloud seen from ``pose``; uncoloured points are white."""
    w, h = K.image_size
    img = np.full((h, w), float(background))
    if len(cloud) == 0:
        return GrayImage(img, image_id)
    uv, z = pose.project(cloud.points, K)
    if cloud.colors is not None:
        val = cloud.colors.astype(np.float64) @ np.array([0.299, 0.587, 0.114]) / 255.0
    else:
        val = np.ones(len(cloud))
    front = z > 0
    uv, z, val = uv[front], z[front], val[front]
    cx = np.rint(uv[:, 0]).astype(np.int64)
    cy = np.rint(uv[:, 1]).astype(np.int64)
    r = int(splat_px)
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= r * r]
    px = np.concatenate([cx + dx for _, dx in offs])
    py = np.concatenate([cy + dy for dy, _ in offs])
    depth = np.tile(z, len(offs))
    vals = np.tile(val, len(offs))
    order_id = np.tile(np.arange(len(z)), len(offs))
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    px, py, depth, vals, order_id = px[inside], py[inside], depth[inside], vals[inside], order_id[inside]
    flat = py * w + px
    # nearest depth wins; equal depths go to the earlier point
    order = np.lexsort((order_id, depth, flat))
    flat, vals = flat[order], vals[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    img.ravel()[flat[first]] = np.clip(vals[first], 0.0, 1.0)
    return GrayImage(img, image_id)


@dataclass
class SetEvaluation:
    set_id: str
    pairs: list[SsimResult]

    @property
    def photo_count(self) -> int:
        return len(self.pairs)

    @property
    def average(self) -> float | None:
        return float(np.mean([p.mean_ssim for p in self.pairs])) if self.pairs else None

    def row(self) -> tuple[str, int, float | None]:
        return (self.set_id, self.photo_count, self.average)


def evaluate_set(renders: list, originals: list, pairing: dict[int, int] | None = None, set_id: str = "",
                 **ssim_kwargs) -> SetEvaluation:
    """SSIM of each render against its original; ``pairing`` maps render index to original index."""
    if pairing is None:
        if len(renders) != len(originals):
            raise ValueError("without a pairing the lists must have equal length")
        pairing = {k: k for k in range(len(renders))}
    if sorted(pairing) != list(range(len(renders))) or sorted(pairing.values()) != list(range(len(originals))):
        raise ValueError("pairing must be a bijection between renders and originals")
    pairs = [ssim(renders[r], originals[pairing[r]], **ssim_kwargs) for r in range(len(renders))]
    return SetEvaluation(set_id, pairs)


def write_ssim_csv(evaluation: SetEvaluation, path) -> None:
    with open(os.fspath(path), "w") as fh:
        fh.write("render,original,mean_ssim\n")
        for p in evaluation.pairs:
            fh.write(f"{p.image_pair[0]},{p.image_pair[1]},{p.mean_ssim:.9f}\n")
