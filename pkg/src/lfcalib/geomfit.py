"""Small linear-geometry fits shared by detection and calibration."""

from __future__ import annotations

import numpy as np

from .errors import EstimationError

__all__ = [
    "homography_dlt",
    "apply_homography",
    "nearest_rotation",
    "least_singular_vector",
]


def _normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking the points to zero centroid and mean
    distance sqrt(2) (standard DLT conditioning)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(dist, 1e-12)
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ H.T
    return ph[:, :2] / ph[:, 2:3]


def homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized-DLT homography mapping src (N, 2) onto dst (N, 2);
    needs at least 4 non-degenerate correspondences."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise EstimationError("homography needs at least 4 point pairs")
    Ts, Td = _normalization(src), _normalization(dst)
    s = np.concatenate([src, np.ones((n, 1))], axis=1) @ Ts.T
    d = np.concatenate([dst, np.ones((n, 1))], axis=1) @ Td.T
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = s
    A[0::2, 6:9] = -d[:, 0:1] * s
    A[1::2, 3:6] = s
    A[1::2, 6:9] = -d[:, 1:2] * s
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-12 * sv[0]:
        raise EstimationError("degenerate point configuration for homography")
    H = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ H @ Ts
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes projection of M onto SO(3)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def least_singular_vector(A: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Right singular vector of the least singular value, with the full
    singular spectrum for rank diagnostics."""
    _, sv, Vt = np.linalg.svd(A)
    return Vt[-1], float(sv[-1]), sv
