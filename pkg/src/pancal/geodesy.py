"""WGS84 geodetic/ECEF/ENU conversions and similarity-transform registration.

The ellipsoid constants are the WGS84 standard values. Altitudes are meters
above the ellipsoid; no geoid correction is applied. Supplied alt_m tags are
used as-is: flat altitude tags only degrade the vertical component of the
registration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError, DomainError, ValidationError
from .geometry import Rotation, ViewPose

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


@dataclass(frozen=True)
class GeodeticCoord:
    lat_deg: float
    lon_deg: float
    alt_m: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat_deg <= 90.0):
            raise ValidationError(f"latitude {self.lat_deg:g} outside [-90, 90]")
        if not (-180.0 <= self.lon_deg < 180.0):
            raise ValidationError(f"longitude {self.lon_deg:g} outside [-180, 180)")


@dataclass(frozen=True)
class EcefCoord:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValidationError("ECEF coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def geodetic_to_ecef(g: GeodeticCoord) -> EcefCoord:
    lat = math.radians(g.lat_deg)
    lon = math.radians(g.lon_deg)
    sl, cl = math.sin(lat), math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sl * sl)
    return EcefCoord(
        (n + g.alt_m) * cl * math.cos(lon),
        (n + g.alt_m) * cl * math.sin(lon),
        (n * (1.0 - WGS84_E2) + g.alt_m) * sl,
    )


def ecef_to_geodetic(e: EcefCoord) -> GeodeticCoord:
    """Iterative inverse of geodetic_to_ecef; round-trips to < 1e-6 m."""
    r = math.sqrt(e.x * e.x + e.y * e.y + e.z * e.z)
    if r <= 1000.0:
        raise DomainError(f"ECEF point with |e| = {r:g} m is too close to the Earth center")
    p = math.hypot(e.x, e.y)
    lon = math.atan2(e.y, e.x)
    if p < 1e-9:
        lat = math.copysign(math.pi / 2.0, e.z)
        return GeodeticCoord(math.degrees(lat), math.degrees(lon), abs(e.z) - WGS84_B)
    lat = math.atan2(e.z, p * (1.0 - WGS84_E2))
    alt = 0.0
    for _ in range(20):
        sl = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sl * sl)
        alt_new = p / math.cos(lat) - n
        lat_new = math.atan2(e.z, p * (1.0 - WGS84_E2 * n / (n + alt_new)))
        done = abs(lat_new - lat) < 1e-14 and abs(alt_new - alt) < 1e-9
        lat, alt = lat_new, alt_new
        if done:
            break
    lon_deg = math.degrees(lon)
    if lon_deg >= 180.0:
        lon_deg -= 360.0
    return GeodeticCoord(math.degrees(lat), lon_deg, alt)


def enu_rotation(origin: GeodeticCoord) -> np.ndarray:
    """Rows are the east/north/up axes at origin, expressed in ECEF."""
    lat = math.radians(origin.lat_deg)
    lon = math.radians(origin.lon_deg)
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )


def ecef_to_enu(origin: GeodeticCoord, e: EcefCoord) -> np.ndarray:
    ref = geodetic_to_ecef(origin).as_array()
    return enu_rotation(origin) @ (e.as_array() - ref)


def enu_to_ecef(origin: GeodeticCoord, enu) -> EcefCoord:
    ref = geodetic_to_ecef(origin).as_array()
    xyz = enu_rotation(origin).T @ np.asarray(enu, dtype=float) + ref
    return EcefCoord(*xyz)


def geodetic_to_enu(origin: GeodeticCoord, g: GeodeticCoord) -> np.ndarray:
    return ecef_to_enu(origin, geodetic_to_ecef(g))


def enu_to_geodetic(origin: GeodeticCoord, enu) -> GeodeticCoord:
    return ecef_to_geodetic(enu_to_ecef(origin, enu))


def enu_frame_change(from_origin: GeodeticCoord, to_origin: GeodeticCoord):
    """Rigid map between two local tangent frames: x_to = R @ x_from + t."""
    r_from = enu_rotation(from_origin)
    r_to = enu_rotation(to_origin)
    ref_from = geodetic_to_ecef(from_origin).as_array()
    ref_to = geodetic_to_ecef(to_origin).as_array()
    R = r_to @ r_from.T
    t = r_to @ (ref_from - ref_to)
    return R, t


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation, scale > 0."""

    scale: float
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise ValidationError(f"similarity scale must be positive, got {self.scale:g}")
        t = np.array(self.translation, dtype=float).reshape(3)
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, Rotation.identity(), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rotation.matrix.T) + self.translation

    def transform_pose(self, pose: ViewPose) -> ViewPose:
        return ViewPose(
            rotation=self.rotation @ pose.rotation,
            center=self.apply(pose.center),
            pano_id=pose.pano_id,
            slot_index=pose.slot_index,
        )

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.inverse()
        return SimilarityTransform(1.0 / self.scale, rt, -rt.apply(self.translation) / self.scale)


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Closed-form least-squares similarity (Umeyama) from src to dst.

    Minimizes sum ||dst_i - (s R src_i + t)||^2; requires >= 3 non-collinear
    correspondences.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValidationError("src and dst point lists must have equal shapes")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"similarity estimation needs >= 3 points, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    for name, centered in (("src", ds), ("dst", dd)):
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[0] <= 0.0 or sv[1] / sv[0] < 1e-9:
            raise DegenerateConfigurationError(f"{name} points are collinear")
    cov = dd.T @ ds / n
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    var_s = float((ds**2).sum()) / n
    scale = float((d * np.diag(s_fix)).sum()) / var_s
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, Rotation(rot), trans)


def estimate_similarity_ransac(
    src,
    dst,
    inlier_threshold_m: float = 0.5,
    max_iter: int = 1000,
    seed: int = 0,
) -> tuple[SimilarityTransform, np.ndarray]:
    """RANSAC wrapper over estimate_similarity for corrupted correspondences.

    Returns (transform refit on inliers, inlier mask).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"similarity estimation needs >= 3 points, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    for _ in range(max_iter):
        idx = rng.choice(n, size=3, replace=False)
        try:
            sim = estimate_similarity(src[idx], dst[idx])
        except DegenerateConfigurationError:
            continue
        err = np.linalg.norm(dst - sim.apply(src), axis=1)
        mask = err < inlier_threshold_m
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count == n:
                break
    if best_mask is None or best_count < 3:
        raise DegenerateConfigurationError("RANSAC found no 3-point similarity model")
    sim = estimate_similarity(src[best_mask], dst[best_mask])
    err = np.linalg.norm(dst - sim.apply(src), axis=1)
    mask = err < inlier_threshold_m
    if mask.sum() >= 3:
        sim = estimate_similarity(src[mask], dst[mask])
    return sim, mask


def georegister(recon, pano_geodetic, enu_origin: GeodeticCoord | None = None):
    """Geo-register an up-to-scale reconstruction into a metric ENU frame.

    Estimates a similarity from panorama centers (mean of their registered
    view centers) to the ENU coordinates of the panorama GPS tags, applies it
    to every view and point, and marks the reconstruction metric. Returns
    (registered reconstruction, transform).
    """
    centers = recon.panorama_centers()
    pano_ids = sorted(centers)
    if len(pano_ids) < 3:
        raise DegenerateConfigurationError(
            f"geo-registration needs >= 3 registered panoramas, got {len(pano_ids)}"
        )
    missing = [p for p in pano_ids if p not in pano_geodetic]
    if missing:
        raise ValidationError(f"panoramas without geodetic tags: {missing}")
    if enu_origin is None:
        lat = float(np.mean([pano_geodetic[p].lat_deg for p in pano_ids]))
        lon = float(np.mean([pano_geodetic[p].lon_deg for p in pano_ids]))
        alt = float(np.mean([pano_geodetic[p].alt_m for p in pano_ids]))
        enu_origin = GeodeticCoord(lat, lon, alt)
    src = np.array([centers[p] for p in pano_ids])
    dst = np.array([geodetic_to_enu(enu_origin, pano_geodetic[p]) for p in pano_ids])
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[0] <= 0.0 or sv[1] / sv[0] < 1e-6:
        raise DegenerateConfigurationError("panorama layout is collinear; registration is degenerate")
    sim = estimate_similarity(src, dst)
    registered = recon.apply_similarity(sim)
    registered.scale_state = "metric"
    registered.enu_origin = enu_origin
    return registered, sim
