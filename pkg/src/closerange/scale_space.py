"""Nonlinear diffusion scale space and Hessian-determinant keypoint detection.

The scale space follows the accelerated-KAZE recipe: Perona-Malik (g2)
conductivity, fast explicit diffusion (FED) cycles between levels, and
octaves that halve the resolution. Keypoints are 3x3x3 maxima of the
scale-normalised Hessian determinant ``t**2 * (Lxx * Lyy - Lxy**2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall
from .imaging import as_array, bilinear, derivative, gaussian_blur, halfsample, shift

MIN_OCTAVE_SIZE = 16
FED_TAU_MAX = 0.25  # explicit-diffusion stability bound on a 4-neighbourhood grid
OCTAVE_CONTRAST_DECAY = 0.75
# variance (px^2) of two composed unit Scharr passes: 2/3 along, 3/4 across
DERIVATIVE_KERNEL_VARIANCE = 0.7


@dataclass(frozen=True)
class DetectorParams:
    octaves: int = 4
    sublevels: int = 4
    base_sigma: float = 1.6
    contrast_percentile: float = 0.7
    threshold: float = 0.0008
    max_keypoints: int | None = None


@dataclass(frozen=True, eq=False)
class ScaleLevel:
    image: np.ndarray
    octave: int
    sublevel: int
    sigma: float
    t: float

    @property
    def ratio(self) -> int:
        return 2**self.octave

    @property
    def sigma_octave(self) -> float:
        """Sigma measured in pixels of this level's (downsampled) grid."""
        return self.sigma / self.ratio


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    response: float
    image_id: str = ""
    octave: int = 0


def pm_g2(lx: np.ndarray, ly: np.ndarray, k: float) -> np.ndarray:
    return 1.0 / (1.0 + (lx * lx + ly * ly) / (k * k))


def contrast_factor(img, percentile: float = 0.7, smoothing: float = 1.0) -> float:
    """Gradient magnitude at ``percentile`` among non-zero gradients of the smoothed image."""
    if not 0.0 < percentile < 1.0:
        raise ValueError("contrast percentile must lie in (0, 1)")
    smooth = gaussian_blur(img, smoothing)
    mag = np.hypot(derivative(smooth, "x", 1), derivative(smooth, "y", 1))
    inner = mag[1:-1, 1:-1].ravel()
    inner = inner[inner > 0.0]
    if inner.size == 0:
        return 0.03  # flat image: any k is a fixed point
    return max(float(np.quantile(inner, percentile)), 1e-12)


def fed_tau(total_time: float, tau_max: float = FED_TAU_MAX) -> np.ndarray:
    """Step sizes of one FED cycle whose sum equals ``total_time``."""
    if total_time <= 0.0:
        return np.zeros(0)
    n = int(math.ceil(math.sqrt(3.0 * total_time / tau_max + 0.25) - 0.5 - 1e-12))
    n = max(n, 1)
    scale = 3.0 * total_time / (tau_max * (n * n + n))
    i = np.arange(n)
    c = np.cos(np.pi * (2 * i + 1) / (4 * n + 2))
    return scale * tau_max / (2.0 * c * c)


def diffusion_step(L: np.ndarray, g: np.ndarray, tau: float) -> np.ndarray:
    """One explicit step of ``dL/dt = div(g grad L)`` in conservative flux form.

    Fluxes across the image frame are zero, so the pixel sum is invariant.
    """
    fx = 0.5 * (g[:, 1:] + g[:, :-1]) * (L[:, 1:] - L[:, :-1])
    fy = 0.5 * (g[1:, :] + g[:-1, :]) * (L[1:, :] - L[:-1, :])
    div = np.zeros_like(L)
    div[:, :-1] += fx
    div[:, 1:] -= fx
    div[:-1, :] += fy
    div[1:, :] -= fy
    return L + tau * div


def evolve(L: np.ndarray, dt: float, k: float) -> np.ndarray:
    """Advance ``L`` by diffusion time ``dt`` with one FED cycle at fixed conductivity."""
    taus = fed_tau(dt)
    if taus.size == 0:
        return L
    smooth = gaussian_blur(L, 1.0)
    g = pm_g2(derivative(smooth, "x", 1), derivative(smooth, "y", 1), k)
    for tau in taus:
        L = diffusion_step(L, g, tau)
    return L


def level_sigma(base_sigma: float, octave: int, sublevel: int, sublevels: int) -> float:
    return base_sigma * 2.0 ** (octave + sublevel / sublevels)


def build_scale_space(
    img,
    octaves: int = 4,
    sublevels: int = 4,
    contrast_percentile: float = 0.7,
    base_sigma: float = 1.6,
) -> list[ScaleLevel]:
    if octaves < 1 or sublevels < 1:
        raise ValueError("octaves and sublevels must be at least 1")
    data = as_array(img)
    h, w = data.shape
    if min(h, w) // 2 ** (octaves - 1) < MIN_OCTAVE_SIZE:
        raise ImageTooSmall(
            f"{w}x{h} image too small for {octaves} octaves (coarsest must be >= {MIN_OCTAVE_SIZE}px)"
        )
    k = contrast_factor(data, contrast_percentile)
    levels: list[ScaleLevel] = []
    L = gaussian_blur(data, base_sigma)
    prev_t = 0.5 * base_sigma**2
    for o in range(octaves):
        if o > 0:
            L = halfsample(L)
            k *= OCTAVE_CONTRAST_DECAY
        for s in range(sublevels):
            sigma = level_sigma(base_sigma, o, s, sublevels)
            t = 0.5 * sigma**2
            if levels:
                # diffusion time is measured in the current octave's pixels
                r2 = 4.0**o
                L = evolve(L, (t - prev_t) / r2, k)
            prev_t = t
            levels.append(ScaleLevel(L, o, s, sigma, t))
    return levels


def hessian_response(level: ScaleLevel) -> np.ndarray:
    """``t**2 * (Lxx * Lyy - Lxy**2)`` on the level's own grid.

    Derivatives are unit-span Scharr passes over the diffused level. ``t`` is
    the evolution time in level-grid pixels plus the variance the derivative
    kernels add themselves; without that term the coarse octaves, where the
    kernel is wide relative to sigma, are under-weighted.
    """
    lxx = derivative(level.image, "xx", 1.0)
    lyy = derivative(level.image, "yy", 1.0)
    lxy = derivative(level.image, "xy", 1.0)
    t = response_time(level)
    return t * t * (lxx * lyy - lxy * lxy)


def response_time(level: ScaleLevel) -> float:
    sig = level.sigma_octave
    return 0.5 * (sig * sig + DERIVATIVE_KERNEL_VARIANCE)


def _resample_to(resp: np.ndarray, src_ratio: int, shape: tuple[int, int], dst_ratio: int) -> np.ndarray:
    if src_ratio == dst_ratio and resp.shape == shape:
        return resp
    h, w = shape
    f = dst_ratio / src_ratio
    ys = (np.arange(h) + 0.5) * f - 0.5
    xs = (np.arange(w) + 0.5) * f - 0.5
    return bilinear(resp, xs[None, :], ys[:, None])


# neighbour offsets (ds, dy, dx) in lexicographic order, centre excluded
_OFFSETS = [(ds, dy, dx) for ds in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (ds, dy, dx) != (0, 0, 0)]


def _refine(stack: list[np.ndarray], y: int, x: int) -> np.ndarray:
    """Quadratic-fit offset (dx, dy, ds); zero if the fit is unreliable."""
    below, cur, above = stack
    c = cur[y, x]
    g = np.array([
        0.5 * (cur[y, x + 1] - cur[y, x - 1]),
        0.5 * (cur[y + 1, x] - cur[y - 1, x]),
        0.5 * (above[y, x] - below[y, x]),
    ])
    dxx = cur[y, x + 1] - 2 * c + cur[y, x - 1]
    dyy = cur[y + 1, x] - 2 * c + cur[y - 1, x]
    dss = above[y, x] - 2 * c + below[y, x]
    dxy = 0.25 * (cur[y + 1, x + 1] - cur[y + 1, x - 1] - cur[y - 1, x + 1] + cur[y - 1, x - 1])
    dxs = 0.25 * (above[y, x + 1] - above[y, x - 1] - below[y, x + 1] + below[y, x - 1])
    dys = 0.25 * (above[y + 1, x] - above[y - 1, x] - below[y + 1, x] + below[y - 1, x])
    H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    try:
        off = -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.zeros(3)
    if not np.all(np.isfinite(off)) or np.any(np.abs(off) > 1.0):
        return np.zeros(3)
    return off


def local_maxima(stack: list[np.ndarray], threshold: float, border: int) -> np.ndarray:
    """(y, x) of pixels in ``stack[1]`` that beat their 26 neighbours.

    Strictly greater than lexicographically earlier neighbours, greater or
    equal to later ones, so a plateau yields exactly one winner.
    """
    cur = stack[1]
    h, w = cur.shape
    mask = cur > threshold
    if border > 0:
        mask[:border] = False
        mask[-border:] = False
        mask[:, :border] = False
        mask[:, -border:] = False
    for ds, dy, dx in _OFFSETS:
        if not mask.any():
            break
        nb = shift(stack[1 + ds], dy, dx)
        if (ds, dy, dx) < (0, 0, 0):
            mask &= cur > nb
        else:
            mask &= cur >= nb
    return np.argwhere(mask)


def detect_keypoints(
    levels: list[ScaleLevel],
    threshold: float = 0.0008,
    max_keypoints: int | None = None,
    image_id: str = "",
    responses: list[np.ndarray] | None = None,
) -> list[Keypoint]:
    if len(levels) < 3:
        raise ValueError("need at least 3 scale levels")
    if responses is None:
        responses = [hessian_response(lv) for lv in levels]
    full_h, full_w = levels[0].image.shape
    sublevels = max(lv.sublevel for lv in levels) + 1
    found = []
    for i in range(1, len(levels) - 1):
        lv = levels[i]
        shape = responses[i].shape
        stack = [
            _resample_to(responses[j], levels[j].ratio, shape, lv.ratio) for j in (i - 1, i, i + 1)
        ]
        border = 3
        for y, x in local_maxima(stack, threshold, border):
            dx, dy, ds = _refine(stack, y, x)
            r = lv.ratio
            fx = min(max((x + dx + 0.5) * r - 0.5, 0.0), np.nextafter(full_w, 0))
            fy = min(max((y + dy + 0.5) * r - 0.5, 0.0), np.nextafter(full_h, 0))
            sigma = lv.sigma * 2.0 ** (ds / sublevels)
            found.append((-float(stack[1][y, x]), i, int(y), int(x), fx, fy, sigma, lv.octave))
    found.sort()
    found = _suppress_colocated(found)
    if max_keypoints is not None:
        found = found[:max_keypoints]
    return [
        Keypoint(float(fx), float(fy), float(sigma), -neg, image_id, octave)
        for neg, _, _, _, fx, fy, sigma, octave in found
    ]


def _suppress_colocated(found: list[tuple]) -> list[tuple]:
    """Keep the strongest of candidates whose centres lie within half the smaller sigma, at any scale."""
    if not found:
        return found
    xy = np.array([(f[4], f[5]) for f in found])
    sig = np.array([f[6] for f in found])
    keep = np.ones(len(found), dtype=bool)
    for k in range(len(found)):
        if not keep[k]:
            continue
        later = np.arange(k + 1, len(found))
        later = later[keep[later]]
        d = np.hypot(xy[later, 0] - xy[k, 0], xy[later, 1] - xy[k, 1])
        keep[later[d < 0.5 * np.minimum(sig[later], sig[k])]] = False
    return [f for f, kept in zip(found, keep) if kept]


def detect(img, params: DetectorParams = DetectorParams(), image_id: str = "") -> list[Keypoint]:
    levels = build_scale_space(img, params.octaves, params.sublevels, params.contrast_percentile, params.base_sigma)
    return detect_keypoints(levels, params.threshold, params.max_keypoints, image_id=image_id)
