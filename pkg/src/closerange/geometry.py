"""SO(3) helpers, triangulation primitives and similarity alignment."""
from __future__ import annotations

import numpy as np


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix of axis-angle vector(s) ``w`` (..., 3) via Rodrigues."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = np.zeros(w.shape[:-1] + (3, 3))
    W[..., 0, 1], W[..., 0, 2] = -w[..., 2], w[..., 1]
    W[..., 1, 0], W[..., 1, 2] = w[..., 2], -w[..., 0]
    W[..., 2, 0], W[..., 2, 1] = -w[..., 1], w[..., 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector(s) of rotation matrices, accurate near 0 and near pi."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R, axis1=-2, axis2=-1)
    cos = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    v = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    sin = np.linalg.norm(v, axis=-1)
    theta = np.arctan2(sin, cos)
    out = np.empty(R.shape[:-2] + (3,))
    flat_R = R.reshape(-1, 3, 3)
    flat_v = v.reshape(-1, 3)
    flat_t = theta.reshape(-1)
    flat_s = sin.reshape(-1)
    flat_o = out.reshape(-1, 3)
    for k in range(flat_R.shape[0]):
        t, s = flat_t[k], flat_s[k]
        if t < 1e-8:
            flat_o[k] = flat_v[k]
        elif t < np.pi - 1e-3:
            flat_o[k] = flat_v[k] * (t / s)
        else:
            # near pi: axis from the symmetric part, sign from the skew part
            B = 0.5 * (flat_R[k] + flat_R[k].T) - np.cos(t) * np.eye(3)
            col = int(np.argmax(np.diag(B)))
            axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
            axis /= np.linalg.norm(axis)
            if axis @ flat_v[k] < 0:
                axis = -axis
            flat_o[k] = axis * t
    return out


def geodesic_angle(Ra, Rb) -> np.ndarray:
    """Rotation angle (radians) of ``Ra.T @ Rb``."""
    M = np.swapaxes(np.asarray(Ra), -1, -2) @ np.asarray(Rb)
    return np.linalg.norm(so3_log(M), axis=-1)


def project_to_so3(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.ones(U.shape[:-2] + (3,))
    D[..., 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ (D[..., :, None] * Vt)


def random_rotation(rng: np.random.Generator, size=None) -> np.ndarray:
    """Haar-uniform rotations from normalised Gaussian quaternions."""
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    q = rng.normal(size=shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(shape + (3, 3))


def rot_z(deg: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, np.radians(deg)]))


def triangulate_two_view(R: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Linear triangulation in camera ``a``'s frame with ``P_a = [I|0]``, ``P_b = [R|t]``."""
    Pa = np.hstack([np.eye(3), np.zeros((3, 1))])
    Pb = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.stack([
        xa[:, 0:1] * Pa[2] - Pa[0],
        xa[:, 1:2] * Pa[2] - Pa[1],
        xb[:, 0:1] * Pb[2] - Pb[0],
        xb[:, 1:2] * Pb[2] - Pb[1],
    ], axis=1)
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def align_rotations(estimated, reference) -> np.ndarray:
    """Global rotation ``G`` minimising ``sum ||estimated_i @ G - reference_i||_F``."""
    M = np.einsum("nji,njk->ik", np.asarray(estimated), np.asarray(reference))
    return project_to_so3(M)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity (s, R, t) minimising ``||s R src + t - dst||``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = (a * a).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t
