"""Local Intensity Order Pattern descriptor.

A patch around each keypoint is split into ``B`` ordinal bins by intensity
rank. Every pixel votes for the permutation that sorts its ``N`` circular
neighbours, with the first neighbour on the ray from the patch centre, and
the per-bin vote histograms are concatenated.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np

from .errors import DegeneratePatch, IncompatibleFeatures, OutOfBounds
from .imaging import as_array, bilinear, gaussian_blur, halfsample
from .scale_space import Keypoint

FEATURE_MAGIC = b"CLRFEAT1\n"


@dataclass(frozen=True)
class LiopParams:
    neighbors: int = 4
    bins: int = 6
    patch_diameter: int = 41
    radius_multiplier: float = 6.0
    neighbor_radius: float = 3.0
    smoothing: float = 1.2

    @property
    def length(self) -> int:
        return self.bins * math.factorial(self.neighbors)


def permutation_index(order: np.ndarray) -> np.ndarray:
    """Lexicographic rank of each row permutation (Lehmer code), rows of ``order`` shaped (m, N)."""
    m, n = order.shape
    idx = np.zeros(m, dtype=np.int64)
    for i in range(n):
        smaller_after = (order[:, i + 1:] < order[:, i : i + 1]).sum(axis=1)
        idx = idx * (n - i) + smaller_after
    return idx


@lru_cache(maxsize=16)
def _patch_geometry(diameter: int, n: int, neighbor_radius: float):
    """Contributing pixel coordinates and their neighbour sample positions."""
    c = (diameter - 1) / 2.0
    yy, xx = np.mgrid[0:diameter, 0:diameter].astype(np.float64)
    dx, dy = xx - c, yy - c
    dist = np.hypot(dx, dy)
    # neighbours of a contributing pixel stay inside the inscribed circle; the
    # centre pixel has no ray direction
    inside = (dist <= c - neighbor_radius) & (dist > 0)
    py, px = np.nonzero(inside)
    phi = np.arctan2(dy[py, px], dx[py, px])
    ang = phi[:, None] + 2.0 * np.pi * np.arange(n)[None, :] / n
    nx = px[:, None] + neighbor_radius * np.cos(ang)
    ny = py[:, None] + neighbor_radius * np.sin(ang)
    return py, px, nx, ny


def _stable_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.int64)
    ranks[order] = np.arange(values.size)
    return ranks


def liop_assignments(patch: np.ndarray, neighbors: int = 4, bins: int = 6, neighbor_radius: float = 3.0):
    """Per-pixel (ordinal bin, permutation index) for every contributing pixel.

    Neighbour samples interpolate the patch's rank image instead of raw
    intensities, so any strictly monotone intensity map leaves every
    assignment unchanged.
    """
    if neighbors < 2 or bins < 1:
        raise ValueError("need neighbors >= 2 and bins >= 1")
    patch = np.asarray(patch, dtype=np.float64)
    d = patch.shape[0]
    if patch.shape != (d, d):
        raise ValueError("patch must be square")
    if not np.ptp(patch) > 0.0:
        raise DegeneratePatch("patch has no intensity variation")
    py, px, nx, ny = _patch_geometry(d, neighbors, float(neighbor_radius))
    if py.size == 0:
        raise ValueError("patch too small for the neighbour radius")
    rank_img = _stable_ranks(patch.ravel()).reshape(d, d).astype(np.float64)
    m = py.size
    bin_idx = _stable_ranks(patch[py, px]) * bins // m
    samples = bilinear(rank_img, nx, ny)
    order = np.argsort(samples, axis=1, kind="stable")
    return bin_idx, permutation_index(order)


def compute_liop(patch: np.ndarray, neighbors: int = 4, bins: int = 6, neighbor_radius: float = 3.0,
                 normalize: bool = True) -> np.ndarray:
    bin_idx, perm_idx = liop_assignments(patch, neighbors, bins, neighbor_radius)
    nperm = math.factorial(neighbors)
    des = np.zeros((bins, nperm))
    np.add.at(des, (bin_idx, perm_idx), 1.0)
    des = des.ravel()
    if normalize:
        des /= np.linalg.norm(des)
    return des


class PatchSampler:
    """Resamples keypoint regions from an image, using a box pyramid to avoid aliasing."""

    def __init__(self, img, params: LiopParams = LiopParams()):
        self.params = params
        base = as_array(img)
        self.shape = base.shape
        self.pyramid = [base]
        while min(self.pyramid[-1].shape) >= 4:
            self.pyramid.append(halfsample(self.pyramid[-1]))

    def sample(self, kp: Keypoint) -> np.ndarray:
        p = self.params
        h, w = self.shape
        radius = p.radius_multiplier * kp.sigma
        if kp.x - radius < 0 or kp.y - radius < 0 or kp.x + radius > w - 1 or kp.y + radius > h - 1:
            raise OutOfBounds("measurement region leaves the image")
        c = (p.patch_diameter - 1) / 2.0
        step = radius / c
        level = max(0, min(int(math.floor(math.log2(step))) if step > 1 else 0, len(self.pyramid) - 1))
        f = 2.0**level
        u = (np.arange(p.patch_diameter) - c) * step
        xs = (kp.x + u + 0.5) / f - 0.5
        ys = (kp.y + u + 0.5) / f - 0.5
        patch = bilinear(self.pyramid[level], xs[None, :], ys[:, None])
        if p.smoothing > 0:
            patch = gaussian_blur(patch, p.smoothing)
        return patch


def sample_patch(img, kp: Keypoint, patch_diameter: int = 41, radius_multiplier: float = 6.0,
                 smoothing: float = 1.2) -> np.ndarray:
    params = LiopParams(patch_diameter=patch_diameter, radius_multiplier=radius_multiplier, smoothing=smoothing)
    return PatchSampler(img, params).sample(kp)


@dataclass
class Features:
    """Keypoints of one image with their descriptors (rows aligned)."""

    keypoints: list[Keypoint]
    descriptors: np.ndarray
    params: LiopParams = LiopParams()
    image_id: str = ""

    def __len__(self):
        return len(self.keypoints)

    def points(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64).reshape(-1, 2)

    def header(self) -> dict:
        return {"version": 1, "image_id": self.image_id, "count": len(self), "liop": asdict(self.params)}

    def save(self, path) -> None:
        kp = np.array([[k.x, k.y, k.sigma, k.response, k.octave] for k in self.keypoints], dtype="<f8")
        buf = io.BytesIO()
        buf.write(FEATURE_MAGIC)
        buf.write(json.dumps(self.header(), sort_keys=True).encode() + b"\n")
        buf.write(kp.reshape(-1, 5).tobytes())
        buf.write(np.ascontiguousarray(self.descriptors, dtype="<f4").tobytes())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path, expect: LiopParams | None = None) -> "Features":
        with open(path, "rb") as fh:
            if fh.readline() != FEATURE_MAGIC:
                raise IncompatibleFeatures(f"{path}: not a feature file")
            header = json.loads(fh.readline())
            body = fh.read()
        if header.get("version") != 1:
            raise IncompatibleFeatures(f"{path}: unsupported version {header.get('version')}")
        params = LiopParams(**header["liop"])
        if expect is not None and params != expect:
            raise IncompatibleFeatures(f"{path}: written with {params}, expected {expect}")
        n = header["count"]
        kp = np.frombuffer(body[: n * 40], dtype="<f8").reshape(n, 5)
        desc = np.frombuffer(body[n * 40 :], dtype="<f4").reshape(n, params.length).astype(np.float64)
        image_id = header["image_id"]
        keypoints = [Keypoint(float(x), float(y), float(s), float(r), image_id, int(o)) for x, y, s, r, o in kp]
        return cls(keypoints, desc, params, image_id)


def describe(img, keypoints: list[Keypoint], params: LiopParams = LiopParams()) -> Features:
    """LIOP descriptors for every keypoint whose region fits and is non-degenerate; others are dropped."""
    sampler = PatchSampler(img, params)
    kept, rows = [], []
    for kp in keypoints:
        try:
            patch = sampler.sample(kp)
            rows.append(compute_liop(patch, params.neighbors, params.bins, params.neighbor_radius))
        except (OutOfBounds, DegeneratePatch):
            continue
        kept.append(kp)
    desc = np.array(rows, dtype=np.float64).reshape(len(kept), params.length)
    image_id = keypoints[0].image_id if keypoints else ""
    return Features(kept, desc, params, image_id)


def all_permutations(n: int) -> list[tuple[int, ...]]:
    """Permutations of ``range(n)`` in the order used by :func:`permutation_index`."""
    return list(permutations(range(n)))
