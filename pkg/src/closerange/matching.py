"""Descriptor matching and calibrated two-view verification.

Relative pose convention: for cameras ``i`` and ``j`` with world-to-camera
rotations ``R_i``, ``R_j`` and centres ``c_i``, ``c_j``::

    x_j = R_ij @ x_i + t_ij,  R_ij = R_j @ R_i.T,  t_ij ~ R_j @ (c_i - c_j)

and the essential matrix ``E = [t_ij]_x @ R_ij`` satisfies ``x_j.T @ E @ x_i = 0``
on normalised image coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InsufficientMatches
from .geometry import skew, so3_exp, triangulate_two_view
from .imaging import CameraIntrinsics


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass(frozen=True)
class MatcherParams:
    ratio: float = 0.8
    threshold_px: float = 2.0
    iterations: int = 2048
    confidence: float = 0.99
    min_inliers: int = 30
    min_parallax_deg: float = 0.5


@dataclass
class PoseGraphEdge:
    cam_i: str
    cam_j: str
    relative_rotation: np.ndarray
    relative_direction: np.ndarray
    inlier_count: int
    inlier_matches: list[Match] = field(default_factory=list)

    def reversed(self) -> "PoseGraphEdge":
        R = self.relative_rotation
        swapped = [Match(m.index_b, m.index_a, m.distance) for m in self.inlier_matches]
        return PoseGraphEdge(self.cam_j, self.cam_i, R.T.copy(), -R.T @ self.relative_direction,
                             self.inlier_count, swapped)


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def _best_two(d2: np.ndarray):
    """Index of the nearest column and squared distances to the nearest two, per row."""
    n, m = d2.shape
    nn = np.argmin(d2, axis=1)
    best = d2[np.arange(n), nn]
    if m < 2:
        return nn, best, np.full(n, np.inf)
    part = np.partition(d2, 1, axis=1)
    return nn, best, part[:, 1]


def match_descriptors(desc_a: np.ndarray, desc_b: np.ndarray, ratio: float = 0.8) -> list[Match]:
    """Mutual nearest neighbours that pass the ratio test in both directions."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d2 = _squared_distances(desc_a, desc_b)
    nn_ab, best_ab, second_ab = _best_two(d2)
    nn_ba, best_ba, second_ba = _best_two(d2.T)
    r2 = ratio * ratio
    ok_a = best_ab < r2 * second_ab
    ok_b = best_ba < r2 * second_ba
    out = []
    for i in np.nonzero(ok_a)[0]:
        j = nn_ab[i]
        if nn_ba[j] == i and ok_b[j]:
            out.append(Match(int(i), int(j), float(np.linalg.norm(desc_a[i] - desc_b[j]))))
    return out


def normalize_points(pts: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    h = np.column_stack([pts, np.ones(len(pts))])
    return h @ K.K_inv.T


def _conditioning(x: np.ndarray) -> np.ndarray:
    c = x[..., :2].mean(axis=-2, keepdims=True)
    s = np.sqrt(2.0) / np.maximum(np.linalg.norm(x[..., :2] - c, axis=-1).mean(axis=-1), 1e-12)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def _design(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Rows of the linear system ``vec(E) . a = 0`` for ``xb.T E xa = 0``."""
    return np.einsum("...i,...j->...ij", xb, xa).reshape(xa.shape[:-1] + (9,))


def eight_point(xa: np.ndarray, xb: np.ndarray, return_spectrum: bool = False):
    """Essential matrix from >= 8 normalised correspondences, batched over leading axes.

    The estimate is projected onto the essential manifold (two equal
    singular values, one zero).
    """
    Ta = _conditioning(xa)
    Tb = _conditioning(xb)
    na = np.einsum("...ij,...nj->...ni", Ta, xa)
    nb = np.einsum("...ij,...nj->...ni", Tb, xb)
    A = _design(na, nb)
    if A.shape[-2] < 9:
        pad = np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))
        A = np.concatenate([A, pad], axis=-2)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    E = vt[..., -1, :].reshape(xa.shape[:-2] + (3, 3))
    E = np.swapaxes(Tb, -1, -2) @ E @ Ta
    E = _to_essential(E)
    return (E, s) if return_spectrum else E


def sampson_distance(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """First-order geometric error (normalised units) of each correspondence; ``E`` may be batched."""
    Exa = np.einsum("...ij,nj->...ni", E, xa)
    Etxb = np.einsum("...ji,nj->...ni", E, xb)
    num = np.einsum("ni,...ni->...n", xb, Exa)
    den = Exa[..., 0] ** 2 + Exa[..., 1] ** 2 + Etxb[..., 0] ** 2 + Etxb[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def decompose_essential(E: np.ndarray):
    """The four (R, t) candidates of an essential matrix."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def cheirality_count(R: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> int:
    X = triangulate_two_view(R, t, xa, xb)
    za = X[:, 2]
    zb = (X @ R.T + t)[:, 2]
    return int(np.count_nonzero((za > 0) & (zb > 0) & np.isfinite(za)))


def select_pose(E: np.ndarray, xa: np.ndarray, xb: np.ndarray):
    best = None
    for R, t in decompose_essential(E):
        n = cheirality_count(R, t, xa, xb)
        if best is None or n > best[0]:
            best = (n, R, t)
    return best


def _polish_rotation(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def _ransac_iterations(inlier_ratio: float, confidence: float, sample: int = 8) -> float:
    p = inlier_ratio**sample
    if p <= 0.0:
        return math.inf
    if p >= 1.0:
        return 0.0
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def verify_epipolar(
    matches: list[Match],
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    K: CameraIntrinsics,
    threshold_px: float = 2.0,
    iterations: int = 2048,
    *,
    cam_i: str = "a",
    cam_j: str = "b",
    min_inliers: int = 30,
    confidence: float = 0.99,
    min_parallax_deg: float = 0.5,
    seed: int = 0,
) -> PoseGraphEdge:
    """RANSAC essential-matrix fit; returns the verified relative pose of ``b`` w.r.t. ``a``.

    ``pts_a`` / ``pts_b`` are pixel coordinates of all keypoints, indexed by the matches.
    """
    if len(matches) < 8:
        raise InsufficientMatches(f"{len(matches)} matches, need at least 8")
    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    xa = normalize_points(np.asarray(pts_a)[ia], K)
    xb = normalize_points(np.asarray(pts_b)[ib], K)
    thr = threshold_px / K.focal_px

    # a rotation-only pair leaves a 3-dimensional null space in the design matrix
    _, spectrum = eight_point(xa, xb, return_spectrum=True)
    if spectrum[-2] < 1e-10 * spectrum[0]:
        raise DegenerateGeometry("correspondences do not constrain the baseline")

    rng = np.random.default_rng(seed)
    E, score = _ransac_eight_point(xa, xb, thr, iterations, confidence, rng)
    plane = _plane_parallax(xa, xb, thr, iterations, confidence, rng)
    if plane is not None and plane[1] > score:
        E, score = plane
    mask = sampson_distance(E, xa, xb) < thr
    if mask.sum() < max(8, min_inliers):
        raise DegenerateGeometry(f"{int(mask.sum())} inliers, need {min_inliers}")

    count, R, t = select_pose(E, xa[mask], xb[mask])
    if count < max(8, 0.5 * mask.sum()):
        raise DegenerateGeometry("no decomposition puts the inliers in front of both cameras")
    R = _polish_rotation(R)
    t = t / np.linalg.norm(t)
    for _ in range(3):
        R, t = refine_pose(R, t, xa[mask], xb[mask])
        new_mask = sampson_distance(essential_from_pose(R, t), xa, xb) < thr
        if np.array_equal(new_mask, mask) or new_mask.sum() < 8:
            break
        mask = new_mask

    ra = xa[mask] / np.linalg.norm(xa[mask], axis=1, keepdims=True)
    rb = xb[mask] / np.linalg.norm(xb[mask], axis=1, keepdims=True)
    parallax = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", ra @ R.T, rb), -1.0, 1.0)))
    if np.median(parallax) < min_parallax_deg:
        raise DegenerateGeometry(f"median parallax {np.median(parallax):.3f} deg is too small")

    inliers = [m for m, keep in zip(matches, mask) if keep]
    if len(inliers) < min_inliers:
        raise DegenerateGeometry(f"{len(inliers)} inliers, need {min_inliers}")
    return PoseGraphEdge(cam_i, cam_j, R, t, len(inliers), inliers)


def _score(Es: np.ndarray, xa: np.ndarray, xb: np.ndarray, thr: float):
    """Inlier counts and truncated Sampson costs of a batch of hypotheses."""
    err = sampson_distance(Es, xa, xb)
    inl = err < thr
    return inl.sum(axis=-1), np.where(inl, err, thr).sum(axis=-1)


def _ransac_eight_point(xa, xb, thr, iterations, confidence, rng):
    n = len(xa)
    best_E, best_score = None, (-1, 0.0)
    needed, done, chunk = float(iterations), 0, 64
    while done < min(needed, iterations):
        b = int(min(chunk, iterations - done))
        samples = np.array([rng.choice(n, 8, replace=False) for _ in range(b)])
        Es = eight_point(xa[samples], xb[samples])
        counts, costs = _score(Es, xa, xb, thr)
        for k in range(b):
            score = (int(counts[k]), -float(costs[k]))
            if score > best_score:
                best_score, best_E = score, Es[k]
        done += b
        needed = _ransac_iterations(best_score[0] / n, confidence)
    # local optimisation on the consensus set
    for _ in range(3):
        mask = sampson_distance(best_E, xa, xb) < thr
        if mask.sum() < 8:
            break
        E = eight_point(xa[mask], xb[mask])
        counts, costs = _score(E[None], xa, xb, thr)
        score = (int(counts[0]), -float(costs[0]))
        if score <= best_score:
            break
        best_score, best_E = score, E
    return best_E, best_score


def homography_dlt(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Homography ``xb ~ H xa`` from >= 4 correspondences, batched over leading axes."""
    Ta = _conditioning(xa)
    Tb = _conditioning(xb)
    na = np.einsum("...ij,...nj->...ni", Ta, xa)
    nb = np.einsum("...ij,...nj->...ni", Tb, xb)
    z = np.zeros(na.shape[:-1] + (3,))
    r1 = np.concatenate([na, z, -nb[..., 0:1] * na], axis=-1)
    r2 = np.concatenate([z, na, -nb[..., 1:2] * na], axis=-1)
    A = np.concatenate([r1, r2], axis=-2)
    if A.shape[-2] < 9:
        A = np.concatenate([A, np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))], axis=-2)
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    Hn = vt[..., -1, :].reshape(xa.shape[:-2] + (3, 3))
    return np.linalg.inv(Tb) @ Hn @ Ta


def _transfer_error(H: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    p = np.einsum("...ij,nj->...ni", H, xa)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.linalg.norm(p[..., :2] / p[..., 2:3] - xb[:, :2], axis=-1)
    return np.where(np.isfinite(d), d, np.inf)


def _to_essential(E: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E, axis=(-2, -1), keepdims=True)


def _plane_parallax(xa, xb, thr, iterations, confidence, rng, max_pairs: int = 512):
    """Essential matrices ``[e]_x H`` from the dominant plane and pairs of off-plane points.

    The 8-point system is ill-conditioned when nearly every match lies on one
    plane; here the plane fixes ``H`` and two off-plane points fix the epipole.
    """
    n = len(xa)
    if n < 6:
        return None
    best_mask, best = None, -1
    needed, done, chunk = float(iterations), 0, 64
    while done < min(needed, iterations):
        b = int(min(chunk, iterations - done))
        samples = np.array([rng.choice(n, 4, replace=False) for _ in range(b)])
        inl = _transfer_error(homography_dlt(xa[samples], xb[samples]), xa, xb) < thr
        counts = inl.sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best:
            best, best_mask = int(counts[k]), inl[k]
        done += b
        needed = _ransac_iterations(best / n, confidence, sample=4)
    if best < 4:
        return None
    H = homography_dlt(xa[best_mask], xb[best_mask])
    off = np.nonzero(_transfer_error(H, xa, xb) >= thr)[0]
    if len(off) < 2:
        return None
    pairs = np.array([(i, j) for a, i in enumerate(off) for j in off[a + 1 :]])
    if len(pairs) > max_pairs:
        pairs = pairs[np.sort(rng.choice(len(pairs), max_pairs, replace=False))]
    lines = np.cross(xb[off], xa[off] @ H.T)
    pos = {int(v): k for k, v in enumerate(off)}
    l1 = lines[[pos[int(i)] for i in pairs[:, 0]]]
    l2 = lines[[pos[int(j)] for j in pairs[:, 1]]]
    e = np.cross(l1, l2)
    norm = np.linalg.norm(e, axis=1)
    ok = norm > 1e-12
    if not ok.any():
        return None
    e = e[ok] / norm[ok, None]
    S = np.zeros((len(e), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -e[:, 2], e[:, 1]
    S[:, 1, 0], S[:, 1, 2] = e[:, 2], -e[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -e[:, 1], e[:, 0]
    Es = _to_essential(S @ H)
    counts, costs = _score(Es, xa, xb, thr)
    k = max(range(len(Es)), key=lambda k: (int(counts[k]), -float(costs[k]), -k))
    return Es[k], (int(counts[k]), -float(costs[k]))


def _signed_sampson(E, xa, xb):
    Exa = xa @ E.T
    Etxb = xb @ E
    num = np.einsum("ni,ni->n", xb, Exa)
    den = Exa[:, 0] ** 2 + Exa[:, 1] ** 2 + Etxb[:, 0] ** 2 + Etxb[:, 1] ** 2
    return num / np.sqrt(np.maximum(den, 1e-300))


def refine_pose(R: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray):
    """Minimise the Sampson error over the 5-dof relative pose, starting from (R, t)."""
    from scipy.optimize import least_squares

    t = t / np.linalg.norm(t)
    basis = np.linalg.svd(t[None, :])[2][1:].T  # two unit vectors orthogonal to t

    def unpack(p):
        t1 = t + basis @ p[3:]
        return so3_exp(p[:3]) @ R, t1 / np.linalg.norm(t1)

    def residual(p):
        R1, t1 = unpack(p)
        return _signed_sampson(skew(t1) @ R1, xa, xb)

    sol = least_squares(residual, np.zeros(5), method="lm" if len(xa) >= 5 else "trf",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    R1, t1 = unpack(sol.x)
    return _polish_rotation(R1), t1


def essential_from_pose(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return skew(t) @ R
