"""Homography algebra, geometric match labels, and robust homography fitting."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np


class DegeneratePointError(ValueError):
    """A point maps to (or from) the line at infinity."""


class DegenerateConfigurationError(ValueError):
    """Point correspondences do not determine a homography."""


class EstimationFailed(RuntimeError):
    """RANSAC could not find a model with at least four inliers."""


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateConfigurationError("h[2,2] vanishes; cannot normalize")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateConfigurationError("homography is singular")
    return h


def _project(h: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ h[:, :2].T + h[:, 2]
    return hom[:, :2], hom[:, 2]


def apply_homography(h: np.ndarray, pts) -> np.ndarray:
    """Map ``(n, 2)`` pixel coordinates through ``h``."""
    xy, w = _project(h, pts)
    if np.any(np.abs(w) < 1e-12):
        raise DegeneratePointError("point maps to infinity")
    return xy / w[:, None]


def warp_or_nan(h: np.ndarray, pts) -> np.ndarray:
    """Like :func:`apply_homography` but points that land at or behind infinity become NaN."""
    xy, w = _project(h, pts)
    out = np.full_like(xy, np.nan)
    ok = w > 1e-12
    out[ok] = xy[ok] / w[ok, None]
    return out


def in_bounds(xy: np.ndarray, size) -> np.ndarray:
    width, height = size
    with np.errstate(invalid="ignore"):
        return (xy[:, 0] >= 0) & (xy[:, 0] < width) & (xy[:, 1] >= 0) & (xy[:, 1] < height)


@dataclass
class GroundTruth:
    matches: np.ndarray          # (K, 2) int pairs (i, j)
    unmatched_s: np.ndarray      # source indices supervised toward the dustbin
    unmatched_t: np.ndarray
    visible_s: np.ndarray        # (M,) 0/1
    visible_t: np.ndarray        # (N,) 0/1

    @property
    def supervision_count(self) -> int:
        return len(self.matches) + len(self.unmatched_s) + len(self.unmatched_t)


def label_correspondences(xy_s, size_s, xy_t, size_t, h, threshold: float = 3.0) -> GroundTruth:
    """Groundtruth labels for keypoints ``xy_s`` (source) and ``xy_t`` (target) related by ``h``.

    Visibility is the in-bounds test of the warped coordinate.  A visible pair
    ``(i, j)`` is a match when each is the other's nearest neighbour under the
    symmetric reprojection distance ``max(|h s_i - t_j|, |s_i - h^-1 t_j|)`` and
    that distance is below ``threshold``.  Visible keypoints without a partner
    are unmatched; out-of-view keypoints appear in neither set.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    xy_s = np.asarray(xy_s, dtype=np.float64).reshape(-1, 2)
    xy_t = np.asarray(xy_t, dtype=np.float64).reshape(-1, 2)
    h = np.asarray(h, dtype=np.float64)
    h_inv = np.linalg.inv(h)
    fwd = warp_or_nan(h, xy_s)
    bwd = warp_or_nan(h_inv, xy_t)
    vis_s = in_bounds(fwd, size_t)
    vis_t = in_bounds(bwd, size_s)

    m, n = len(xy_s), len(xy_t)
    matches = np.zeros((0, 2), dtype=np.int64)
    if m and n:
        d_fwd = np.linalg.norm(fwd[:, None, :] - xy_t[None, :, :], axis=-1)
        d_bwd = np.linalg.norm(xy_s[:, None, :] - bwd[None, :, :], axis=-1)
        dist = np.fmax(d_fwd, d_bwd)
        dist[~vis_s, :] = np.inf
        dist[:, ~vis_t] = np.inf
        dist = np.nan_to_num(dist, nan=np.inf)
        nn_t = np.argmin(dist, axis=1)
        nn_s = np.argmin(dist, axis=0)
        rows = np.arange(m)
        keep = (nn_s[nn_t] == rows) & (dist[rows, nn_t] < threshold)
        matches = np.stack([rows[keep], nn_t[keep]], axis=1).astype(np.int64)

    matched_s = np.zeros(m, bool)
    matched_t = np.zeros(n, bool)
    matched_s[matches[:, 0]] = True
    matched_t[matches[:, 1]] = True
    return GroundTruth(
        matches=matches,
        unmatched_s=np.flatnonzero(vis_s & ~matched_s),
        unmatched_t=np.flatnonzero(vis_t & ~matched_t),
        visible_s=vis_s.astype(np.int64),
        visible_t=vis_t.astype(np.int64),
    )


def compute_groundtruth(src, tgt, h, reproj_threshold_px: float = 3.0) -> GroundTruth:
    """Label two :class:`~scenematch.synth.KeypointSet` objects under homography ``h``."""
    return label_correspondences(src.positions[:, :2], src.image_size,
                                 tgt.positions[:, :2], tgt.image_size,
                                 h, reproj_threshold_px)


# ------------------------------------------------------------------ fitting

def _hartley(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    spread = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if spread < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / spread
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def _apply_affine(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ t[:2, :2].T + t[:2, 2]


def dlt_homography(src, dst) -> np.ndarray:
    """Least-squares homography with ``dst ~ H src`` from >= 4 correspondences.

    Uses Hartley normalization of both point sets and the smallest right
    singular vector of the stacked 2n x 9 system.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise DegenerateConfigurationError("need at least 4 paired points")
    t_s, t_d = _hartley(src), _hartley(dst)
    a, b = _apply_affine(t_s, src), _apply_affine(t_d, dst)
    n = len(a)
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    rows_u = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    rows_v = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    system = np.concatenate([rows_u, rows_v])
    _, sv, vt = np.linalg.svd(system)
    if sv[7] < 1e-9 * sv[0]:
        raise DegenerateConfigurationError("rank-deficient correspondence system")
    h = np.linalg.inv(t_d) @ vt[-1].reshape(3, 3) @ t_s
    return normalize_homography(h)


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1.0) ** 2
    for i, j, k in combinations(range(len(pts)), 3):
        d1, d2 = pts[j] - pts[i], pts[k] - pts[i]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol * scale:
            return True
    return False


def reprojection_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    warped = warp_or_nan(h, src)
    err = np.linalg.norm(warped - dst, axis=1)
    return np.nan_to_num(err, nan=np.inf)


def ransac_homography(src, dst, inlier_threshold_px: float = 3.0,
                      iterations: int = 1000, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Consensus homography from random minimal samples, refit on all inliers.

    Returns ``(h, inlier_mask)``; raises :class:`EstimationFailed` when no
    model gathers four inliers.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise EstimationFailed(f"only {n} correspondences")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, 0
    for _ in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        if _has_collinear_triple(src[idx]) or _has_collinear_triple(dst[idx]):
            continue
        try:
            h = dlt_homography(src[idx], dst[idx])
        except DegenerateConfigurationError:
            continue
        mask = reprojection_errors(h, src, dst) < inlier_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            if count == n:
                break
    if best_count < 4:
        raise EstimationFailed("fewer than 4 inliers")
    try:
        h = dlt_homography(src[best_mask], dst[best_mask])
    except DegenerateConfigurationError as exc:
        raise EstimationFailed("inlier set is degenerate") from exc
    mask = reprojection_errors(h, src, dst) < inlier_threshold_px
    if mask.sum() < 4:
        raise EstimationFailed("refit lost its inliers")
    return h, mask


def corner_error(h_est: np.ndarray, h_true: np.ndarray, size) -> float:
    """Mean distance between the four image corners mapped by each homography."""
    width, height = size
    corners = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    a = warp_or_nan(h_est, corners)
    b = warp_or_nan(h_true, corners)
    err = np.linalg.norm(a - b, axis=1)
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.mean())
