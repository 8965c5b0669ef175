"""Camera positions, multi-view tracks, triangulation and PLY export."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CollinearDegenerate, DegenerateRays, DisconnectedGraph
from .geometry import skew
from .imaging import CameraIntrinsics, bilinear
from .matching import Match
from .rotation_averaging import PoseGraph, RotationSet

Observation = tuple[str, int]  # (image id, keypoint index)


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray  # world-to-camera
    center: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not on SO(3)")
        if not np.all(np.isfinite(c)):
            raise ValueError("camera centre must be finite")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", c)

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    def projection(self, K: CameraIntrinsics | None = None) -> np.ndarray:
        P = np.hstack([self.rotation, self.translation[:, None]])
        return P if K is None else K.K @ P

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.center) @ self.rotation.T

    def project(self, X: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (n, 2) and depths (n,) of world points (n, 3)."""
        Xc = self.to_camera(np.atleast_2d(X))
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = Xc[:, :2] / z[:, None] * K.focal_px + np.asarray(K.principal_point)
        return uv, z


def build_tracks(matches: dict[tuple[str, str], list[Match]]) -> list[tuple[Observation, ...]]:
    """Union-find over pairwise matches; tracks that hit one image twice are dropped."""
    parent: dict[Observation, Observation] = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (a, b), ms in sorted(matches.items()):
        for m in ms:
            ra, rb = find((a, m.index_a)), find((b, m.index_b))
            if ra != rb:
                if rb < ra:
                    ra, rb = rb, ra
                parent[rb] = ra
    groups: dict[Observation, list[Observation]] = {}
    for obs in parent:
        groups.setdefault(find(obs), []).append(obs)
    tracks = []
    for members in groups.values():
        members.sort()
        images = [img for img, _ in members]
        if len(members) >= 2 and len(set(images)) == len(images):
            tracks.append(tuple(members))
    tracks.sort()
    return tracks


def _position_system(graph: PoseGraph, rotations: RotationSet):
    ids = graph.nodes
    root = rotations.gauge
    free = [c for c in ids if c != root]
    col = {c: k for k, c in enumerate(free)}
    rows = []
    dirs = []
    for e in graph.edges:
        # t_ij ~ R_j (c_i - c_j), so the world baseline c_j - c_i points along -R_j.T t_ij
        d = -rotations[e.cam_j].T @ e.relative_direction
        d = d / np.linalg.norm(d)
        block = np.zeros((3, 3 * len(free)))
        S = skew(d)
        if e.cam_j in col:
            block[:, 3 * col[e.cam_j] : 3 * col[e.cam_j] + 3] += S
        if e.cam_i in col:
            block[:, 3 * col[e.cam_i] : 3 * col[e.cam_i] + 3] -= S
        rows.append(block)
        dirs.append(d)
    return free, col, np.vstack(rows), dirs


def _edge_angles(graph, dirs, centers) -> np.ndarray:
    """Angle between each edge's measured direction and the current baseline ``c_j - c_i``."""
    out = np.empty(len(graph.edges))
    for k, e in enumerate(graph.edges):
        b = centers[e.cam_j] - centers[e.cam_i]
        nb = np.linalg.norm(b)
        out[k] = np.pi if nb < 1e-12 else np.arccos(np.clip(dirs[k] @ b / nb, -1.0, 1.0))
    return out


def recover_positions(
    graph: PoseGraph,
    rotations: RotationSet,
    rank_tol: float = 1e-8,
    robust_iterations: int = 20,
    eps: float = 1e-4,
) -> dict[str, CameraPose]:
    """Camera centres from ``(c_j - c_i) x d_ij = 0`` over all edges.

    The homogeneous system is solved by SVD and then reweighted so that each
    edge counts by the sine of its angular misfit, in the L1 sense; edges whose
    direction disagrees with the consensus lose influence. Gauge: the rotation
    root sits at the origin; scale sets the distance along the best-supported
    edge at the root to one.
    """
    if not graph.is_connected():
        raise DisconnectedGraph(f"{len(graph.components())} components")
    root = rotations.gauge
    if len(graph.nodes) == 1:
        return {root: CameraPose(rotations[root], np.zeros(3))}
    free, col, A, dirs = _position_system(graph, rotations)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    s_full = np.zeros(A.shape[1])
    s_full[: len(s)] = s
    null = s_full < rank_tol * max(s_full[0], 1e-300)
    if null.sum() > 1:
        basis = vt[null]
        moving = [c for c in free if np.linalg.norm(basis[:, 3 * col[c] : 3 * col[c] + 3]) > 1e-6]
        raise CollinearDegenerate(
            f"direction constraints leave {int(null.sum())} degrees of freedom", tuple([root] + moving)
        )

    def unpack(x):
        centers = {root: np.zeros(3)}
        for c in free:
            centers[c] = x[3 * col[c] : 3 * col[c] + 3]
        return centers

    x = vt[-1]
    centers = unpack(x)
    # the null vector's sign is arbitrary: most baselines should point along their directions
    if sum(np.sign(dirs[k] @ (centers[e.cam_j] - centers[e.cam_i])) for k, e in enumerate(graph.edges)) < 0:
        x = -x
        centers = unpack(x)
    for _ in range(robust_iterations):
        lengths = np.array([np.linalg.norm(centers[e.cam_j] - centers[e.cam_i]) for e in graph.edges])
        ang = _edge_angles(graph, dirs, centers)
        w = 1.0 / (np.maximum(lengths, 1e-12) * np.sqrt(np.maximum(np.sin(np.minimum(ang, np.pi / 2)), eps)))
        Aw = A * np.repeat(w, 3)[:, None]
        x_new = np.linalg.svd(Aw, full_matrices=True)[2][-1]
        if x_new @ x < 0:
            x_new = -x_new
        # keep the overall scale comparable between iterations
        x_new *= np.linalg.norm(x) / np.linalg.norm(x_new)
        done = np.abs(x_new - x).max() < 1e-12 * max(np.abs(x).max(), 1.0)
        x = x_new
        centers = unpack(x)
        if done:
            break

    incident = [k for k, e in enumerate(graph.edges) if root in (e.cam_i, e.cam_j)]
    k = max(incident, key=lambda k: (graph.edges[k].inlier_count, -k))
    e = graph.edges[k]
    scale = dirs[k] @ (centers[e.cam_j] - centers[e.cam_i])
    if abs(scale) < 1e-12:
        raise CollinearDegenerate("reference edge has zero length", (e.cam_i, e.cam_j))
    return {c: CameraPose(rotations[c], centers[c] / scale) for c in graph.nodes}


@dataclass(frozen=True)
class TriangulatedPoint:
    position: np.ndarray
    error_px: float
    track: tuple[Observation, ...]


def _parallax_deg(pose_list, X) -> float:
    rays = np.array([X - p.center for p in pose_list])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cos = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos.min())))


def triangulate(
    track,
    poses: dict[str, CameraPose],
    K: CameraIntrinsics,
    points: dict[str, np.ndarray],
    max_reproj_px: float = 4.0,
    min_parallax_deg: float = 1.0,
) -> TriangulatedPoint | None:
    """Linear (DLT) triangulation of one track; ``None`` when a view rejects the point.

    ``points`` maps image id to its keypoint pixel coordinates (n, 2).
    """
    if len(track) < 2:
        raise ValueError("track needs at least two observations")
    Kinv = K.K_inv
    rows = []
    pose_list = []
    pix = []
    for img, kp in track:
        pose = poses[img]
        uv = np.asarray(points[img][kp], dtype=np.float64)
        x = Kinv @ np.array([uv[0], uv[1], 1.0])
        P = pose.projection()
        rows.append(x[0] * P[2] - P[0])
        rows.append(x[1] * P[2] - P[1])
        pose_list.append(pose)
        pix.append(uv)
    centers = np.array([p.center for p in pose_list])
    if np.ptp(centers, axis=0).max() < 1e-12:
        raise DegenerateRays("all views share one centre")
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise DegenerateRays("point at infinity")
    X = Xh[:3] / Xh[3]
    if _parallax_deg(pose_list, X) < min_parallax_deg:
        raise DegenerateRays("parallax below minimum")
    errs = []
    for pose, uv in zip(pose_list, pix):
        proj, z = pose.project(X, K)
        if not z[0] > 0:
            return None
        errs.append(float(np.linalg.norm(proj[0] - uv)))
    if max(errs) > max_reproj_px:
        return None
    return TriangulatedPoint(X, float(np.mean(errs)), tuple(track))


@dataclass
class SparseCloud:
    points: np.ndarray                       # (n, 3)
    errors: np.ndarray                       # mean reprojection error per point, px
    tracks: list[tuple[Observation, ...]] = field(default_factory=list)
    colors: np.ndarray | None = None         # (n, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(-1)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.points.min(0), self.points.max(0)


def triangulate_tracks(
    tracks,
    poses: dict[str, CameraPose],
    K: CameraIntrinsics,
    points: dict[str, np.ndarray],
    max_reproj_px: float = 4.0,
    min_parallax_deg: float = 1.0,
    threads: int = 1,
) -> tuple[SparseCloud, dict[str, int]]:
    """Triangulate every track whose cameras are all posed; returns the cloud and rejection counts."""
    usable = [t for t in tracks if all(img in poses for img, _ in t)]

    def one(track):
        try:
            return triangulate(track, poses, K, points, max_reproj_px, min_parallax_deg)
        except DegenerateRays:
            return "degenerate"

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, usable))
    else:
        results = [one(t) for t in usable]
    stats = {"tracks": len(tracks), "unposed": len(tracks) - len(usable), "degenerate": 0, "rejected": 0}
    kept = []
    for r in results:
        if r == "degenerate":
            stats["degenerate"] += 1
        elif r is None:
            stats["rejected"] += 1
        else:
            kept.append(r)
    cloud = SparseCloud(
        np.array([p.position for p in kept]).reshape(-1, 3),
        np.array([p.error_px for p in kept]),
        [p.track for p in kept],
    )
    return cloud, stats


def sample_colors(cloud: SparseCloud, images: dict[str, np.ndarray], points: dict[str, np.ndarray]) -> np.ndarray:
    """Mean bilinear colour of each point over its track's keypoints; ``images`` hold (h, w, 3) in [0, 1]."""
    out = np.zeros((len(cloud), 3))
    for k, track in enumerate(cloud.tracks):
        acc = np.zeros(3)
        for img, kp in track:
            x, y = points[img][kp]
            rgb = images[img]
            acc += [bilinear(rgb[..., ch], x, y) for ch in range(3)]
        out[k] = acc / len(track)
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def export_ply(cloud: SparseCloud, path, binary: bool = False) -> None:
    n = len(cloud)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    xyz = cloud.points.astype("<f4")
    with open(os.fspath(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if cloud.colors is None:
                fh.write(xyz.tobytes())
            else:
                rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                         ("red", "u1"), ("green", "u1"), ("blue", "u1")])
                rec["x"], rec["y"], rec["z"] = xyz.T
                rec["red"], rec["green"], rec["blue"] = cloud.colors.T
                fh.write(rec.tobytes())
        else:
            lines = []
            for k in range(n):
                row = " ".join(repr(float(v)) for v in xyz[k])
                if cloud.colors is not None:
                    row += " " + " ".join(str(int(v)) for v in cloud.colors[k])
                lines.append(row)
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def read_ply(path) -> SparseCloud:
    """Reader for the vertex-only files written by :func:`export_ply`."""
    with open(os.fspath(path), "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt, n, props = None, 0, []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("truncated PLY header")
            parts = line.decode("ascii").split()
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[0] == "property":
                props.append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        body = fh.read()
    names = [p for p, _ in props]
    if fmt == "ascii":
        vals = np.array([list(map(float, ln.split())) for ln in body.decode("ascii").splitlines() if ln.strip()])
        vals = vals.reshape(n, len(props))
        cols = {name: vals[:, k] for k, name in enumerate(names)}
    elif fmt == "binary_little_endian":
        codes = {"float": "<f4", "uchar": "u1", "double": "<f8"}
        rec = np.frombuffer(body, dtype=[(name, codes[t]) for name, t in props], count=n)
        cols = {name: rec[name].astype(np.float64) for name in names}
    else:
        raise ValueError(f"unsupported PLY format {fmt}")
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]]) if n else np.zeros((0, 3))
    colors = None
    if "red" in cols:
        colors = np.column_stack([cols["red"], cols["green"], cols["blue"]]).astype(np.uint8)
    return SparseCloud(pts, np.zeros(n), [], colors)


def write_poses(poses: dict[str, CameraPose], path) -> None:
    with open(os.fspath(path), "w") as fh:
        for cam, p in poses.items():
            vals = list(p.rotation.ravel()) + list(p.center)
            fh.write(cam + " " + " ".join(f"{v:.17g}" for v in vals) + "\n")


def read_poses(path) -> dict[str, CameraPose]:
    out = {}
    with open(os.fspath(path)) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                v = np.array([float(x) for x in parts[1:13]])
                out[parts[0]] = CameraPose(v[:9].reshape(3, 3), v[9:])
    return out


def write_scene(path, images: list[str], K: CameraIntrinsics, pose_file: str, cloud_file: str) -> None:
    manifest = {
        "images": images,
        "intrinsics": {"focal_px": K.focal_px, "principal_point": list(K.principal_point),
                       "image_size": list(K.image_size)},
        "poses": pose_file,
        "cloud": cloud_file,
    }
    with open(os.fspath(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
