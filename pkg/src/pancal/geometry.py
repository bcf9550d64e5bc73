"""Camera models, rotations, distortion, and equirectangular sampling geometry.

Conventions used throughout the package:

* world frame: x east, y north, z up (panoramas are gravity aligned, up = +z);
* camera frame: x right, y down, z forward along the optical axis;
* poses store the world-from-camera rotation R and the camera center C, so a
  world point p maps to camera coordinates as ``R.T @ (p - C)``;
* angles are radians in memory, degrees only at file boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import CheiralityError, NumericalError, RangeError, ValidationError

_UNDISTORT_TOL = 1e-12
_UNDISTORT_MAX_ITER = 50
_UNDISTORT_FIXED_POINT_ITER = 25


def _lock(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def skew(w) -> np.ndarray:
    """Cross-product matrix [w]x such that skew(w) @ v == np.cross(w, v)."""
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Rotation:
    """Element of SO(3), stored as an orthonormal 3x3 matrix (det +1)."""

    matrix: np.ndarray
    # source quaternion cached by from_quat so file round trips stay
    # bit-identical; never set it by hand
    _quat: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "matrix", _lock(np.asarray(self.matrix, dtype=float).reshape(3, 3)))

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def about_z(angle: float) -> "Rotation":
        c, s = math.cos(angle), math.sin(angle)
        return Rotation(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    @staticmethod
    def exp(w) -> "Rotation":
        """Exponential map: tangent 3-vector to rotation (Rodrigues)."""
        w = np.asarray(w, dtype=float)
        theta2 = float(w @ w)
        theta = math.sqrt(theta2)
        K = skew(w)
        if theta < 1e-8:
            # series for sin(t)/t and (1-cos(t))/t^2
            a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
            b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        else:
            a = math.sin(theta) / theta
            b = (1.0 - math.cos(theta)) / theta2
        return Rotation(np.eye(3) + a * K + b * (K @ K))

    def log(self) -> np.ndarray:
        """Logarithm map: rotation to tangent 3-vector with norm in [0, pi]."""
        R = self.matrix
        vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        s = float(np.linalg.norm(vee))  # sin(theta), up to orthonormality error
        c = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
        theta = math.atan2(s, c)
        if s > 1e-6 or c > 0.0:
            if s < 1e-12:
                return vee  # theta ~ 0; vee is already first order exact
            return vee * (theta / s)
        # near pi the antisymmetric part loses the axis; recover it from the
        # eigenvector of R for eigenvalue 1
        _, _, vt = np.linalg.svd(R - np.eye(3))
        axis = vt[-1]
        if s > 0.0 and float(axis @ vee) < 0.0:
            axis = -axis
        elif s == 0.0:
            nz = np.nonzero(np.abs(axis) > 1e-12)[0]
            if nz.size and axis[nz[0]] < 0.0:
                axis = -axis
        return theta * axis

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def apply(self, vec) -> np.ndarray:
        """Rotate one vector (3,) or a stack (..., 3)."""
        v = np.asarray(vec, dtype=float)
        return v @ self.matrix.T

    def renormalized(self) -> "Rotation":
        """Project back onto SO(3); use after long composition chains."""
        u, _, vt = np.linalg.svd(self.matrix)
        d = np.sign(np.linalg.det(u @ vt))
        return Rotation(u @ np.diag([1.0, 1.0, d]) @ vt)

    def to_quat(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w >= 0."""
        if self._quat is not None:
            return self._quat.copy()
        R = self.matrix
        t = np.trace(R)
        if t > 0:
            r = math.sqrt(1.0 + t)
            w = 0.5 * r
            x = (R[2, 1] - R[1, 2]) / (2.0 * r)
            y = (R[0, 2] - R[2, 0]) / (2.0 * r)
            z = (R[1, 0] - R[0, 1]) / (2.0 * r)
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            r = math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
            q = np.empty(4)
            q[1 + i] = 0.5 * r
            q[0] = (R[k, j] - R[j, k]) / (2.0 * r)
            q[1 + j] = (R[j, i] + R[i, j]) / (2.0 * r)
            q[1 + k] = (R[k, i] + R[i, k]) / (2.0 * r)
            w, x, y, z = q
        q = np.array([w, x, y, z])
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        return q

    @staticmethod
    def from_quat(q) -> "Rotation":
        q = np.asarray(q, dtype=float)
        n = float(np.linalg.norm(q))
        if n < 1e-6:
            raise ValidationError(f"quaternion norm {n:g} not normalizable")
        if abs(n - 1.0) > 1e-12:  # keep already-unit quaternions bit-stable
            q = q / n
        w, x, y, z = q
        m = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        return Rotation(m, _quat=np.array([w, x, y, z]))


# World-from-camera orientation of a camera looking north (azimuth 0, pitch 0):
# camera x -> east, camera y -> down, camera z (optical axis) -> north.
BASE_ORIENTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def yaw_orientation(azimuth: float) -> Rotation:
    """World-from-camera rotation for a horizontal camera at compass azimuth.

    Azimuth is radians clockwise from north (compass convention), so the
    optical axis points along (sin az, cos az, 0).
    """
    return Rotation.about_z(-azimuth) @ Rotation(BASE_ORIENTATION)


def slot_relative_rotation(num_slots: int) -> np.ndarray:
    """Exact camera-frame relative rotation R_b^T @ R_a between consecutive
    panorama slots (a at slot j-1, b at slot j).

    This is the yaw-step rotation about the panorama up axis expressed in
    camera coordinates; it is independent of panorama heading.
    """
    ra = yaw_orientation(0.0).matrix
    rb = yaw_orientation(2.0 * math.pi / num_slots).matrix
    return rb.T @ ra


@dataclass(frozen=True)
class ViewPose:
    """World-from-camera orientation plus camera center, with panorama membership."""

    rotation: Rotation
    center: np.ndarray
    pano_id: Optional[str] = None
    slot_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "center", _lock(np.asarray(self.center, dtype=float).reshape(3)))
        if (self.pano_id is None) != (self.slot_index is None):
            raise ValidationError("pano_id and slot_index must be set together")

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.center) @ self.rotation.matrix


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with Brown-Conrady radial/tangential distortion."""

    fx: float
    fy: float
    px: float
    py: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 0
    height: int = 0

    def as_params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.px, self.py, self.k1, self.k2, self.p1, self.p2])

    def with_params(self, params) -> "CameraIntrinsics":
        fx, fy, px, py, k1, k2, p1, p2 = (float(v) for v in params)
        return replace(self, fx=fx, fy=fy, px=px, py=py, k1=k1, k2=k2, p1=p1, p2=p2)

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]])

    def max_normalized_radius(self) -> float:
        """Radius of the image circle in normalized coordinates (to the far corner)."""
        corners = np.array([[0.0, 0.0], [self.width, 0.0], [0.0, self.height], [self.width, self.height]])
        norm = (corners - [self.px, self.py]) / [self.fx, self.fy]
        return float(np.max(np.linalg.norm(norm, axis=1)))

    def validate(self) -> "CameraIntrinsics":
        vals = self.as_params()
        if not np.all(np.isfinite(vals)):
            raise ValidationError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must satisfy fx > 0, fy > 0")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")
        if not (0 <= self.px < self.width) or not (0 <= self.py < self.height):
            raise ValidationError("principal point must satisfy 0 <= px < width, 0 <= py < height")
        smax = self.max_normalized_radius() ** 2
        if _min_radial_derivative(self.k1, self.k2, smax) <= 0.0:
            raise ValidationError(
                "radial distortion derivative non-positive inside the image circle "
                f"(k1={self.k1:g}, k2={self.k2:g}); distortion is not invertible"
            )
        return self


def _min_radial_derivative(k1: float, k2: float, smax: float) -> float:
    # d/dr [r (1 + k1 r^2 + k2 r^4)] = 1 + 3 k1 s + 5 k2 s^2 with s = r^2
    def h(s):
        return 1.0 + 3.0 * k1 * s + 5.0 * k2 * s * s

    candidates = [h(0.0), h(smax)]
    if k2 > 0.0:
        s_star = -3.0 * k1 / (10.0 * k2)
        if 0.0 < s_star < smax:
            candidates.append(h(s_star))
    return min(candidates)


@dataclass(frozen=True)
class PanoramaMeta:
    """Equirectangular panorama metadata; width must be 2 x height."""

    pano_id: str
    geodetic: "object"  # geodesy.GeodeticCoord; kept loose to avoid a module cycle
    heading_deg: float
    width: int
    height: int

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise ValidationError("equirectangular panorama requires width = 2 * height")


@dataclass(frozen=True)
class SamplingConfig:
    """Perspective sampling parameters: T views of fov_deg horizontal FOV."""

    num_views: int = 12
    fov_deg: float = 90.0
    out_width: int = 1920
    out_height: int = 1080

    def validate(self) -> "SamplingConfig":
        if self.num_views < 3:
            raise ValidationError("sampling requires T >= 3 views")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValidationError("sampling requires 0 < fov_deg < 180")
        if self.num_views * self.fov_deg < 360.0 + self.fov_deg:
            raise ValidationError(
                "sampling requires T * fov_deg >= 360 + fov_deg so consecutive views overlap"
            )
        if self.out_width <= 0 or self.out_height <= 0:
            raise ValidationError("output image size must be positive")
        return self

    def ideal_intrinsics(self) -> CameraIntrinsics:
        f = (self.out_width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)
        return CameraIntrinsics(
            fx=f,
            fy=f,
            px=self.out_width / 2.0,
            py=self.out_height / 2.0,
            width=self.out_width,
            height=self.out_height,
        )


def sample_perspective_views(pano: PanoramaMeta, cfg: SamplingConfig, center=None):
    """Ideal pinhole views sampled uniformly in yaw from one panorama.

    View j looks at compass azimuth heading + 2*pi*j/T with pitch 0; all views
    share the panorama center (the world position of the panorama, origin by
    default) and one zero-distortion intrinsics.
    """
    cfg.validate()
    if center is None:
        center = np.zeros(3)
    intr = cfg.ideal_intrinsics()
    heading = math.radians(pano.heading_deg)
    out = []
    for j in range(cfg.num_views):
        rot = yaw_orientation(heading + 2.0 * math.pi * j / cfg.num_views)
        out.append((ViewPose(rot, center, pano_id=pano.pano_id, slot_index=j), intr))
    return out


def equirect_pixel_to_ray(pano: PanoramaMeta, pixel) -> np.ndarray:
    """Unit direction in the panorama frame for an equirectangular pixel.

    Longitude = 2*pi*u/width - pi, latitude = pi/2 - pi*v/height; longitude 0
    is the panorama's zero-yaw (forward) direction, +y in the panorama frame.
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u < pano.width) or not (0.0 <= v < pano.height):
        raise RangeError(f"pixel ({u:g}, {v:g}) outside [0,{pano.width})x[0,{pano.height})")
    lon = 2.0 * math.pi * u / pano.width - math.pi
    lat = math.pi / 2.0 - math.pi * v / pano.height
    cl = math.cos(lat)
    return np.array([cl * math.sin(lon), cl * math.cos(lon), math.sin(lat)])


def ray_to_equirect_pixel(pano: PanoramaMeta, direction) -> np.ndarray:
    """Forward equirectangular mapping, the inverse of equirect_pixel_to_ray.

    The south pole maps to v = height (just outside the half-open pixel range).
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    lon = math.atan2(d[0], d[1])
    lat = math.asin(float(np.clip(d[2], -1.0, 1.0)))
    u = (lon + math.pi) * pano.width / (2.0 * math.pi)
    v = (math.pi / 2.0 - lat) * pano.height / math.pi
    return np.array([u % pano.width, v])


def distort_normalized(params, xy) -> np.ndarray:
    """Apply Brown-Conrady distortion to normalized coordinates (..., 2).

    params is anything exposing k1, k2, p1, p2 (CameraIntrinsics included).
    """
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    k1, k2, p1, p2 = params.k1, params.k2, params.p1, params.p2
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort_jacobian(params, xy) -> np.ndarray:
    """d(distorted)/d(undistorted) as (..., 2, 2)."""
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    k1, k2, p1, p2 = params.k1, params.k2, params.p1, params.p2
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dr = k1 + 2.0 * k2 * r2  # d(radial)/d(r2)
    jxx = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
    jxy = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
    jyy = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
    J = np.empty(xy.shape[:-1] + (2, 2))
    J[..., 0, 0] = jxx
    J[..., 0, 1] = jxy
    J[..., 1, 0] = jxy
    J[..., 1, 1] = jyy
    return J


def project(intr: CameraIntrinsics, pose: ViewPose, point) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises CheiralityError when the point has non-positive depth.
    """
    q = pose.world_to_camera(np.asarray(point, dtype=float))
    if q[2] <= 1e-12:
        raise CheiralityError(f"point at depth {q[2]:g} is not in front of the camera")
    xy = q[:2] / q[2]
    xd = distort_normalized(intr, xy)
    return np.array([intr.fx * xd[0] + intr.px, intr.fy * xd[1] + intr.py])


def project_points(intr: CameraIntrinsics, pose: ViewPose, points):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,)); rows with depth <= 0 hold garbage
    and must be filtered by the caller.
    """
    q = pose.world_to_camera(points)
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = q[:, :2] / z[:, None]
        xd = distort_normalized(intr, xy)
    pix = xd * [intr.fx, intr.fy] + [intr.px, intr.py]
    return pix, z


def undistort_pixel(intr: CameraIntrinsics, pixel) -> np.ndarray:
    """Invert distortion: pixel to undistorted normalized coordinates.

    Damped fixed-point iteration with a Newton fallback; stops when the update
    drops below 1e-12 or raises NumericalError after 50 iterations.
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u < intr.width) or not (0.0 <= v < intr.height):
        raise RangeError(f"pixel ({u:g}, {v:g}) outside image bounds {intr.width}x{intr.height}")
    target = np.array([(u - intr.px) / intr.fx, (v - intr.py) / intr.fy])
    xy = target.copy()
    res = distort_normalized(intr, xy) - target
    it = 0
    while it < _UNDISTORT_FIXED_POINT_ITER:
        it += 1
        x, y = xy
        r2 = x * x + y * y
        radial = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        tang_x = 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
        tang_y = intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
        new_xy = (target - [tang_x, tang_y]) / radial
        step = new_xy - xy
        new_res = distort_normalized(intr, new_xy) - target
        if np.linalg.norm(new_res) > np.linalg.norm(res):
            step = 0.5 * step  # damp when the plain fixed point overshoots
            new_xy = xy + step
            new_res = distort_normalized(intr, new_xy) - target
        xy, res = new_xy, new_res
        if np.linalg.norm(step) < _UNDISTORT_TOL:
            return _newton_polish(intr, xy, target)
    while it < _UNDISTORT_MAX_ITER:
        it += 1
        J = distort_jacobian(intr, xy)
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            break
        xy = xy + step
        res = distort_normalized(intr, xy) - target
        if np.linalg.norm(step) < _UNDISTORT_TOL:
            return xy
    raise NumericalError(
        f"undistortion did not converge after {_UNDISTORT_MAX_ITER} iterations",
        residual=float(np.linalg.norm(res)),
    )


def _newton_polish(intr: CameraIntrinsics, xy: np.ndarray, target: np.ndarray) -> np.ndarray:
    # one quadratic-convergence step drives the residual to machine level
    res = distort_normalized(intr, xy) - target
    try:
        return xy + np.linalg.solve(distort_jacobian(intr, xy), -res)
    except np.linalg.LinAlgError:
        return xy


def pixel_to_world_ray(intr: CameraIntrinsics, pose: ViewPose, pixel):
    """Back-project a pixel: returns (origin, unit world direction)."""
    xy = undistort_pixel(intr, pixel)
    d_cam = np.array([xy[0], xy[1], 1.0])
    d_world = pose.rotation.apply(d_cam)
    return pose.center.copy(), d_world / np.linalg.norm(d_world)
