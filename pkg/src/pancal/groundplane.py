"""Robust ground-plane estimation, ray-plane metrology, and distance-error stats."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._ransac import iterations_needed
from .errors import (
    BehindCameraError,
    DegenerateConfigurationError,
    NoIntersectionError,
    ValidationError,
)
from .geometry import CameraIntrinsics, ViewPose, pixel_to_world_ray

_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class PlaneModel:
    """Plane n.x + d = 0 with |n| = 1 and n oriented toward +z (canonical)."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        norm = float(np.linalg.norm(n))
        if not math.isfinite(norm) or abs(norm - 1.0) > 1e-9:
            raise ValidationError("plane normal must be unit length")
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)

    @staticmethod
    def canonical(normal, offset: float) -> "PlaneModel":
        n = np.asarray(normal, dtype=float).reshape(3)
        norm = float(np.linalg.norm(n))
        if abs(norm - 1.0) > 1e-12:  # keep canonicalization bit-idempotent
            n = n / norm
        d = float(offset)
        if float(n @ _UP) < 0.0:
            n, d = -n, -d
        return PlaneModel(n, d)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.offset

    def basis(self):
        """Two orthonormal in-plane axes (deterministic)."""
        n = self.normal
        seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = seed - n * float(seed @ n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2


@dataclass(frozen=True)
class GroundMark:
    """A measured pair of pixels on the road plane, optionally with true distance."""

    pixel_a: np.ndarray
    pixel_b: np.ndarray
    gt_distance_m: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "pixel_a", np.array(self.pixel_a, dtype=float).reshape(2))
        object.__setattr__(self, "pixel_b", np.array(self.pixel_b, dtype=float).reshape(2))
        if self.gt_distance_m is not None and not self.gt_distance_m > 0:
            raise ValidationError("gt_distance_m must be positive when present")


@dataclass(frozen=True)
class DistanceErrorStats:
    """Normalized distance errors in percent: r_i = |gt_i - est_i| / gt_i."""

    errors_pct: np.ndarray
    max_pct: float
    median_pct: float
    rmse_pct: float


def fit_plane_ransac(
    points,
    labels=None,
    threshold_m: float = 0.05,
    confidence: float = 0.9999,
    max_iter: int = 5000,
    seed: int = 0,
):
    """RANSAC plane fit over road-labeled 3D points.

    When labels (a boolean road-mark flag per point) are absent, all points
    below the median height are used and a warning is emitted. The winning
    model is refit by least squares (smallest eigenvector of the inlier
    covariance) and canonically oriented. Returns (PlaneModel, inlier mask
    over the full input point list).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if labels is not None:
        sel = np.asarray(labels, dtype=bool)
        if sel.shape[0] != pts.shape[0]:
            raise ValidationError("labels length must match points length")
    else:
        warnings.warn("no road-mark labels; fitting to all points below the median height")
        sel = pts[:, 2] <= np.median(pts[:, 2])
    cand = np.nonzero(sel)[0]
    if cand.size < 3:
        raise DegenerateConfigurationError(f"plane fit needs >= 3 labeled points, got {cand.size}")
    sub = pts[cand]
    sv = np.linalg.svd(sub - sub.mean(axis=0), compute_uv=False)
    if sv[1] / max(sv[0], 1e-300) < 1e-9:
        raise DegenerateConfigurationError("labeled points are collinear")
    rng = np.random.default_rng(seed)
    n = cand.size
    best_mask = None
    best_count = -1
    needed = max_iter
    it = 0
    while it < needed and it < max_iter:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = sub[idx]
        nvec = np.cross(p1 - p0, p2 - p0)
        nn = np.linalg.norm(nvec)
        if nn < 1e-12:
            continue
        nvec = nvec / nn
        d = -float(nvec @ p0)
        dist = np.abs(sub @ nvec + d)
        mask = dist < threshold_m
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count == n:
                break
            needed = iterations_needed(confidence, count / n, 3, max_iter)
    if best_mask is None or best_count < 3:
        raise DegenerateConfigurationError("RANSAC found no 3-point plane model")
    plane = _least_squares_plane(sub[best_mask])
    dist = np.abs(plane.signed_distance(sub))
    mask = dist < threshold_m
    if mask.sum() >= 3:
        plane = _least_squares_plane(sub[mask])
        mask = np.abs(plane.signed_distance(sub)) < threshold_m
    full_mask = np.zeros(pts.shape[0], dtype=bool)
    full_mask[cand[mask]] = True
    return plane, full_mask


def _least_squares_plane(pts: np.ndarray) -> PlaneModel:
    centroid = pts.mean(axis=0)
    cov = (pts - centroid).T @ (pts - centroid)
    w, v = np.linalg.eigh(cov)
    normal = v[:, 0]
    if w[1] / max(w[2], 1e-300) < 1e-18:
        raise DegenerateConfigurationError("plane refit inliers are collinear")
    return PlaneModel.canonical(normal, -float(normal @ centroid))


def ray_plane_intersect(ray, plane: PlaneModel) -> np.ndarray:
    """Intersection point of (origin, unit direction) with the plane.

    Raises NoIntersectionError for rays parallel to the plane and
    BehindCameraError when the hit is at a non-positive ray parameter.
    """
    origin, direction = (np.asarray(v, dtype=float).reshape(3) for v in ray)
    denom = float(plane.normal @ direction)
    if abs(denom) <= 1e-9:
        raise NoIntersectionError("ray is parallel to the plane")
    t = -(float(plane.normal @ origin) + plane.offset) / denom
    if t <= 0.0:
        raise BehindCameraError(f"ray-plane intersection at parameter t = {t:g}")
    return origin + t * direction


def measure_ground_distance(
    intr: CameraIntrinsics, pose: ViewPose, plane: PlaneModel, pixel_a, pixel_b
) -> float:
    """Metric distance between the plane hits of two pixel back-projections."""
    hits = []
    for name, px in (("pixel_a", pixel_a), ("pixel_b", pixel_b)):
        try:
            hits.append(ray_plane_intersect(pixel_to_world_ray(intr, pose, px), plane))
        except (NoIntersectionError, BehindCameraError) as exc:
            raise type(exc)(f"{name}: {exc}") from exc
    return float(np.linalg.norm(hits[0] - hits[1]))


def distance_error_stats(estimates, ground_truth) -> DistanceErrorStats:
    """Normalized error r_i = |gt_i - est_i| / gt_i, reported in percent.

    Median uses the lower of the two middle values for even counts; RMSE is
    sqrt(mean(r_i^2)).
    """
    est = np.asarray(estimates, dtype=float).reshape(-1)
    gt = np.asarray(ground_truth, dtype=float).reshape(-1)
    if est.shape != gt.shape or est.size == 0:
        raise ValidationError("estimates and ground truth must be equal-length nonempty lists")
    if np.any(gt <= 0):
        raise ValidationError("ground-truth distances must be positive")
    r = np.abs(gt - est) / gt * 100.0
    ordered = np.sort(r)
    median = float(ordered[(ordered.size - 1) // 2])
    return DistanceErrorStats(
        errors_pct=r,
        max_pct=float(ordered[-1]),
        median_pct=median,
        rmse_pct=float(np.sqrt(np.mean(r * r))),
    )
