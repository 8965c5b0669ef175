"""Image loading, grayscale conversion and the derivative kernels every stage uses.

All rasters are float64 numpy arrays indexed ``[row, col]`` = ``[y, x]``.
Convolutions clamp to the edge (replicate border).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptData, InvalidScale, UnsupportedFormat

# per-mille integers so that equal channels map back to themselves exactly
LUMA_PER_MILLE = np.array([299.0, 587.0, 114.0])

# first-order Scharr pair: central difference across, [3, 10, 3] smoothing along
_SCHARR_SMOOTH = np.array([3.0, 10.0, 3.0]) / 16.0


@dataclass(frozen=True)
class GrayImage:
    """Single-channel intensity raster with values in [0, 1]."""

    data: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2D raster, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (w, h)

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError("focal_px must be positive")
        px, py = self.principal_point
        w, h = self.image_size
        if not (0 <= px <= w and 0 <= py <= h):
            raise ValueError("principal point outside the image")

    @classmethod
    def centered(cls, focal_px: float, width: int, height: int) -> "CameraIntrinsics":
        return cls(float(focal_px), ((width - 1) / 2.0, (height - 1) / 2.0), (int(width), int(height)))

    @classmethod
    def from_mm(cls, focal_mm: float, sensor_width_mm: float, width: int, height: int) -> "CameraIntrinsics":
        return cls.centered(focal_mm / sensor_width_mm * width, width, height)

    @property
    def K(self) -> np.ndarray:
        px, py = self.principal_point
        return np.array([[self.focal_px, 0.0, px], [0.0, self.focal_px, py], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def downscaled(self, k: int) -> "CameraIntrinsics":
        if k == 1:
            return self
        # pixel centres: full-res coordinate u maps to (u + 0.5) / k - 0.5
        px, py = self.principal_point
        w, h = self.image_size
        return CameraIntrinsics(
            self.focal_px / k, ((px + 0.5) / k - 0.5, (py + 0.5) / k - 0.5), (w // k, h // k)
        )


def to_grayscale(rgb) -> np.ndarray | float:
    """BT.601 luma of ``(..., 3)`` values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError("last axis must hold (r, g, b)")
    out = (rgb @ LUMA_PER_MILLE) / 1000.0
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def box_downscale(data: np.ndarray, k: int) -> np.ndarray:
    """Average non-overlapping k x k blocks; trailing rows/cols that do not fill a block are dropped."""
    if k == 1:
        return data
    h, w = data.shape[:2]
    hh, ww = h // k, w // k
    if hh < 1 or ww < 1:
        raise ValueError(f"downscale factor {k} too large for {w}x{h} image")
    block = data[: hh * k, : ww * k].reshape(hh, k, ww, k, *data.shape[2:])
    return block.mean(axis=(1, 3))


def _read_rgb(path) -> np.ndarray:
    """Return the file's pixels as float (h, w) or (h, w, 3) in [0, 1]."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("1", "P", "RGBA", "LA", "CMYK", "YCbCr"):
                target = "L" if im.mode in ("1", "LA") else "RGB"
                arr = np.asarray(im.convert(target))
            else:
                raise UnsupportedFormat(f"{path}: unsupported pixel mode {im.mode!r}")
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(f"{path}: not a recognised raster") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptData(f"{path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def load_image(path, downscale: int | None = None) -> GrayImage:
    if downscale is not None and (int(downscale) != downscale or downscale < 1):
        raise ValueError("downscale must be a positive integer")
    arr = _read_rgb(path)
    if arr.ndim == 3:
        arr = to_grayscale(arr)
    if downscale:
        arr = box_downscale(arr, int(downscale))
    return GrayImage(arr, image_id=os.path.splitext(os.path.basename(os.fspath(path)))[0])


def load_rgb(path, downscale: int | None = None) -> np.ndarray:
    """Colour raster (h, w, 3) in [0, 1]; grayscale files are broadcast to three channels."""
    arr = _read_rgb(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if downscale:
        arr = box_downscale(arr, int(downscale))
    return arr


def save_image(img, path) -> None:
    """Write an 8-bit grayscale PNG. Accepts a GrayImage or a raster in [0, 1]."""
    data = img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    u8 = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(os.fspath(path), format="PNG")


def as_array(img) -> np.ndarray:
    return img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = a[clamp(y + dy), clamp(x + dx)]``."""
    h, w = a.shape
    out = a
    if dy:
        rows = np.clip(np.arange(h) + dy, 0, h - 1)
        out = out[rows]
    if dx:
        cols = np.clip(np.arange(w) + dx, 0, w - 1)
        out = out[:, cols]
    return out


def derivative_step(scale: float) -> int:
    """Integer kernel span used for derivatives at ``scale`` (sigma in pixels)."""
    if not scale > 0:
        raise InvalidScale(f"derivative scale must be positive, got {scale}")
    return max(1, int(round(scale)))


def _first_derivative(a: np.ndarray, axis: str, k: int) -> np.ndarray:
    w0, w1, _ = _SCHARR_SMOOTH
    if axis == "x":
        d = (shift(a, 0, k) - shift(a, 0, -k)) / (2.0 * k)
        return w0 * shift(d, -k, 0) + w1 * d + w0 * shift(d, k, 0)
    d = (shift(a, k, 0) - shift(a, -k, 0)) / (2.0 * k)
    return w0 * shift(d, 0, -k) + w1 * d + w0 * shift(d, 0, k)


def derivative(img, axis: str, scale: float = 1.0) -> np.ndarray:
    """Scharr-type derivative with kernel span ``round(scale)``.

    ``axis`` is one of ``x``, ``y``, ``xx``, ``yy``, ``xy``; second-order
    derivatives compose two first-order passes. Values are per pixel of the
    input grid.
    """
    k = derivative_step(scale)
    a = as_array(img)
    if axis in ("x", "y"):
        return _first_derivative(a, axis, k)
    if axis == "xx":
        return _first_derivative(_first_derivative(a, "x", k), "x", k)
    if axis == "yy":
        return _first_derivative(_first_derivative(a, "y", k), "y", k)
    if axis in ("xy", "yx"):
        return _first_derivative(_first_derivative(a, "x", k), "y", k)
    raise ValueError(f"unknown derivative axis {axis!r}")


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate border."""
    from scipy.ndimage import correlate1d

    a = as_array(img)
    if sigma <= 0:
        return a.copy()
    g = gaussian_kernel1d(sigma)
    out = correlate1d(a, g, axis=0, mode="nearest")
    return correlate1d(out, g, axis=1, mode="nearest")


def halfsample(a: np.ndarray) -> np.ndarray:
    """2x2 block average; an odd trailing row/column is dropped."""
    return box_downscale(a, 2)


def bilinear(a: np.ndarray, x, y) -> np.ndarray:
    """Sample ``a`` at float coordinates, clamping to the border."""
    h, w = a.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = a[y0, x0] * (1.0 - fx) + a[y0, x1] * fx
    bot = a[y1, x0] * (1.0 - fx) + a[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy
