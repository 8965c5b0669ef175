"""Synthetic scenes with known ground truth: pose graphs, two-view correspondences, a textured cube."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import random_rotation, so3_exp
from .imaging import CameraIntrinsics, bilinear
from .matching import PoseGraphEdge
from .rotation_averaging import PoseGraph
from .sparse import CameraPose


@dataclass
class RotationGraphCase:
    graph: PoseGraph
    rotations: np.ndarray  # ground truth, aligned with graph.nodes
    outliers: set[int]     # indices into graph.edges


def random_edges(rng: np.random.Generator, n: int, count: int, min_degree: int = 3) -> list[tuple[int, int]]:
    """Connected random edge set: a random tree, then edges that lift every node to ``min_degree``, then uniform extras."""
    count = min(count, n * (n - 1) // 2)
    pairs = set()
    perm = rng.permutation(n)
    for k in range(1, n):
        a, b = int(perm[k]), int(perm[rng.integers(0, k)])
        pairs.add((min(a, b), max(a, b)))
    deg = np.zeros(n, dtype=int)
    for a, b in pairs:
        deg[a] += 1
        deg[b] += 1
    target = min(min_degree, n - 1)
    while len(pairs) < count and deg.min() < target:
        a = int(np.argmin(deg))
        others = [b for b in rng.permutation(n) if b != a and (min(a, b), max(a, b)) not in pairs]
        b = int(others[0])
        pairs.add((min(a, b), max(a, b)))
        deg[a] += 1
        deg[b] += 1
    while len(pairs) < count:
        a, b = (int(v) for v in rng.choice(n, 2, replace=False))
        pairs.add((min(a, b), max(a, b)))
    return sorted(pairs)


def rotation_graph(
    rng: np.random.Generator,
    n_nodes: int,
    n_edges: int | None = None,
    outlier_fraction: float = 0.0,
    noise_deg: float = 0.0,
) -> RotationGraphCase:
    """Random pose graph over Haar-random rotations.

    Inlier edges are perturbed by an isotropic axis-angle vector whose RMS
    angle is ``noise_deg``; outlier edges are replaced by random rotations.
    Inlier counts are drawn independently of outlier status.
    """
    ids = [f"c{k:02d}" for k in range(n_nodes)]
    R = random_rotation(rng, n_nodes)
    pairs = random_edges(rng, n_nodes, n_edges if n_edges is not None else 3 * (n_nodes - 1))
    n_out = int(round(outlier_fraction * len(pairs)))
    outliers = set(int(k) for k in rng.choice(len(pairs), n_out, replace=False))
    sigma = np.radians(noise_deg) / np.sqrt(3.0)
    edges = []
    for k, (a, b) in enumerate(pairs):
        if k in outliers:
            Rij = random_rotation(rng)
        else:
            Rij = R[b] @ R[a].T
            if sigma > 0:
                Rij = so3_exp(rng.normal(size=3) * sigma) @ Rij
        edges.append(PoseGraphEdge(ids[a], ids[b], Rij, np.array([1.0, 0.0, 0.0]), int(rng.integers(30, 300))))
    return RotationGraphCase(PoseGraph(ids, edges), R, outliers)


@dataclass
class TwoViewCase:
    pts_a: np.ndarray
    pts_b: np.ndarray
    K: CameraIntrinsics
    R_ij: np.ndarray
    t_ij: np.ndarray  # unit


def two_view(rng: np.random.Generator, n_points: int = 200, noise_px: float = 0.0,
             outlier_fraction: float = 0.0, baseline: float = 0.6) -> TwoViewCase:
    """Random calibrated pair viewing a point cloud at depth 4-8; camera ``a`` is the world frame."""
    K = CameraIntrinsics.centered(800.0, 640, 480)
    R_ij = so3_exp(rng.normal(size=3) * np.radians(8.0))
    c_b = rng.normal(size=3)
    c_b *= baseline / np.linalg.norm(c_b)
    pts_a, pts_b = [], []
    while len(pts_a) < n_points:
        X = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(4, 8)])
        Xb = R_ij @ (X - c_b)
        if Xb[2] <= 0.5:
            continue
        ua = X[:2] / X[2] * K.focal_px + K.principal_point
        ub = Xb[:2] / Xb[2] * K.focal_px + K.principal_point
        if not (0 <= ub[0] < 640 and 0 <= ub[1] < 480 and 0 <= ua[0] < 640 and 0 <= ua[1] < 480):
            continue
        pts_a.append(ua)
        pts_b.append(ub)
    pts_a = np.array(pts_a) + rng.normal(size=(n_points, 2)) * noise_px
    pts_b = np.array(pts_b) + rng.normal(size=(n_points, 2)) * noise_px
    n_out = int(round(outlier_fraction * n_points))
    if n_out:
        idx = rng.choice(n_points, n_out, replace=False)
        pts_b[idx] = rng.uniform([0, 0], [640, 480], size=(n_out, 2))
    t = -R_ij @ c_b
    return TwoViewCase(pts_a, pts_b, K, R_ij, t / np.linalg.norm(t))


# ---------------------------------------------------------------- textured cube

@dataclass
class CubeScene:
    half_size: float
    textures: np.ndarray   # (6, n, n) face textures in [0, 1]
    light: np.ndarray      # unit direction towards the light
    ground: np.ndarray     # (m, m) texture of the square the cube rests on
    ground_extent: float = 3.0  # the ground covers [-extent, extent]^2 at z = -half_size
    background: float = 0.5

    @property
    def diameter(self) -> float:
        """Bounding-box diagonal of the cube and its ground square."""
        g, s = self.ground_extent, self.half_size
        return float(np.sqrt(8.0 * g * g + 4.0 * s * s))


def face_texture(rng: np.random.Generator, n: int = 256) -> np.ndarray:
    """Multi-scale blob texture, contrast-stretched to [0.08, 0.92]."""
    from scipy.ndimage import gaussian_filter

    tex = np.zeros((n, n))
    for sigma, amp in ((1.5, 0.6), (3.0, 1.0), (6.0, 1.0), (12.0, 0.8)):
        layer = gaussian_filter(rng.normal(size=(n, n)), sigma, mode="wrap")
        tex += amp * layer / layer.std()
    lo, hi = np.percentile(tex, [1, 99])
    return 0.08 + 0.84 * np.clip((tex - lo) / (hi - lo), 0.0, 1.0)


def cube_scene(rng: np.random.Generator, half_size: float = 1.0, texture_size: int = 256) -> CubeScene:
    light = np.array([0.4, -0.3, 0.85])
    faces = np.array([face_texture(rng, texture_size) for _ in range(6)])
    ground = 0.15 + 0.7 * face_texture(rng, 2 * texture_size)
    return CubeScene(half_size, faces, light / np.linalg.norm(light), ground)


def look_at(center: np.ndarray, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation of a camera at ``center`` looking at ``target`` (image y points down)."""
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.array([x, y, z])


def ring_poses(n_views: int = 12, radius: float = 6.0, elevation_deg: float = 30.0,
               azimuth_offset_deg: float = 0.0) -> list[CameraPose]:
    poses = []
    el = np.radians(elevation_deg)
    for k in range(n_views):
        az = 2.0 * np.pi * k / n_views + np.radians(azimuth_offset_deg)
        c = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(CameraPose(look_at(c), c))
    return poses


# face k: (normal axis, sign); texture axes are the two remaining axes in order
_FACES = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0)]


def _shade(scene: CubeScene, pose: CameraPose, K: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rays = np.stack([(u - K.principal_point[0]) / K.focal_px, (v - K.principal_point[1]) / K.focal_px,
                     np.ones_like(u)], axis=-1) @ pose.rotation  # world directions
    o = pose.center
    s = scene.half_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-s - o) / rays
        t2 = (s - o) / rays
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    out = np.full(u.shape, scene.background)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (-s - o[2]) / rays[..., 2]
    G = o[:2] + tg[..., None] * rays[..., :2]
    on_ground = ~hit & (tg > 0) & (np.abs(G) <= scene.ground_extent).all(axis=-1)
    m = scene.ground.shape[0]
    gu = (G[on_ground, 0] / scene.ground_extent + 1.0) * 0.5 * (m - 1)
    gv = (G[on_ground, 1] / scene.ground_extent + 1.0) * 0.5 * (m - 1)
    out[on_ground] = bilinear(scene.ground, gu, gv) * (0.55 + 0.45 * max(float(scene.light[2]), 0.0))
    if not hit.any():
        return out
    P = o + tmin[hit][:, None] * rays[hit]
    axis = np.argmax(np.abs(P) / s, axis=1)
    sign = np.sign(P[np.arange(len(P)), axis])
    n = scene.textures.shape[1]
    vals = np.empty(len(P))
    for f, (ax, sg) in enumerate(_FACES):
        sel = (axis == ax) & (sign == sg)
        if not sel.any():
            continue
        a, b = [d for d in range(3) if d != ax]
        tu = (P[sel, a] / s + 1.0) * 0.5 * (n - 1)
        tv = (P[sel, b] / s + 1.0) * 0.5 * (n - 1)
        normal = np.zeros(3)
        normal[ax] = sg
        lambert = 0.55 + 0.45 * max(float(normal @ scene.light), 0.0)
        vals[sel] = bilinear(scene.textures[f], tu, tv) * lambert
    out[hit] = vals
    return out


def render_view(scene: CubeScene, pose: CameraPose, K: CameraIntrinsics, supersample: int = 3) -> np.ndarray:
    """Ray-cast grayscale image, box-filtered over ``supersample**2`` sub-pixel rays."""
    w, h = K.image_size
    acc = np.zeros((h, w))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    for dy in offs:
        for dx in offs:
            acc += _shade(scene, pose, K, uu + dx, vv + dy)
    return np.clip(acc / supersample**2, 0.0, 1.0)


def cube_distance(points: np.ndarray, half_size: float = 1.0) -> np.ndarray:
    """Unsigned distance from points to the cube's surface."""
    q = np.abs(points) - half_size
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


def scene_distance(points: np.ndarray, half_size: float = 1.0, ground_extent: float = 3.0) -> np.ndarray:
    """Distance to the nearest visible surface: the cube or its ground square."""
    points = np.atleast_2d(points)
    q = np.maximum(np.abs(points[:, :2]) - ground_extent, 0.0)
    ground = np.hypot(np.linalg.norm(q, axis=1), points[:, 2] + half_size)
    return np.minimum(cube_distance(points, half_size), ground)


def write_cube_dataset(root, object_name: str = "cube", n_views: int = 12, width: int = 640, height: int = 480,
                       focal_px: float = 700.0, elevation_deg: float = 55.0, seed: int = 0) -> dict:
    """Render the ring of views as PNGs under ``root/object_name``; returns the ground truth."""
    import json
    import os

    from .imaging import save_image

    rng = np.random.default_rng(seed)
    scene = cube_scene(rng)
    K = CameraIntrinsics.centered(focal_px, width, height)
    poses = ring_poses(n_views, elevation_deg=elevation_deg)
    folder = os.path.join(os.fspath(root), object_name)
    os.makedirs(folder, exist_ok=True)
    truth = {"focal_px": focal_px, "half_size": scene.half_size, "ground_extent": scene.ground_extent,
             "diameter": scene.diameter, "cameras": {}}
    for k, pose in enumerate(poses):
        name = f"view_{k:02d}"
        save_image(render_view(scene, pose, K), os.path.join(folder, name + ".png"))
        truth["cameras"][name] = {"rotation": pose.rotation.tolist(), "center": pose.center.tolist()}
    with open(os.path.join(os.fspath(root), f"{object_name}_truth.json"), "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return truth
