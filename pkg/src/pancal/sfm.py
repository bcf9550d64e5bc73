"""Incremental reconstruction from supplied correspondences.

Feature detection and matching are out of scope: MatchSet is their output,
consumed from files. The pipeline is COLMAP-shaped: two-view bootstrap from
an essential matrix, P3P registration of the next best view, DLT+Gauss-Newton
triangulation, local BA per registration, global BA (with the panoramic
constraints) every 25% view growth, and outlier pruning between BAs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import optim
from ._ransac import iterations_needed
from .errors import (
    CheiralityError,
    DegeneratePairError,
    LocalizationFailedError,
    LowParallaxError,
    NumericalError,
    ReconstructionFailedError,
    RotationOnlyError,
    ValidationError,
)
from .geometry import (
    CameraIntrinsics,
    PanoramaMeta,
    Rotation,
    SamplingConfig,
    ViewPose,
    project_points,
    sample_perspective_views,
    undistort_pixel,
)

DB_INTRINSICS_ID = "db"


def view_id_of(pano_id: str, slot: int) -> str:
    return f"{pano_id}#{slot}"


@dataclass
class MatchPair:
    view_a: str
    view_b: str
    pixels_a: np.ndarray  # (N, 2)
    pixels_b: np.ndarray  # (N, 2)

    def __len__(self):
        return self.pixels_a.shape[0]


@dataclass
class MatchSet:
    pairs: list

    def __iter__(self):
        return iter(self.pairs)


@dataclass
class Track:
    point_id: int
    observations: list  # [(view_id, np.ndarray(2,))]

    def observing_views(self):
        return [vid for vid, _ in self.observations]


@dataclass
class ViewRecord:
    pose: ViewPose
    intrinsics_id: str
    registered: bool = False


@dataclass
class ReconstructionSummary:
    registered_views: int = 0
    total_views: int = 0
    triangulated_points: int = 0
    rms_reprojection_px: float = math.nan
    final_cost: float = math.nan
    pano_constraint: bool = True
    pano_mode: str = "soft"
    failed_views: list = field(default_factory=list)
    notes: list = field(default_factory=list)


class Reconstruction:
    """Views, tracks, 3D points, and the scale state of one scene."""

    def __init__(self, num_slots: int = 0):
        self.views: dict[str, ViewRecord] = {}
        self.intrinsics: dict[str, CameraIntrinsics] = {}
        self.points: dict[int, np.ndarray] = {}
        self.tracks: dict[int, Track] = {}
        self.road_marks: set[int] = set()
        self.scale_state: str = "arbitrary"
        self.num_slots: int = num_slots
        self.enu_origin = None
        self._view_order: dict[str, int] = {}
        self.summary = ReconstructionSummary()

    def add_view(self, view_id: str, record: ViewRecord):
        if view_id in self.views:
            raise ValidationError(f"duplicate view id {view_id!r}")
        self._view_order[view_id] = len(self._view_order)
        self.views[view_id] = record

    def view_order_key(self, view_id: str) -> int:
        return self._view_order[view_id]

    def registered_view_ids(self) -> list:
        return sorted((v for v, r in self.views.items() if r.registered), key=self.view_order_key)

    def panorama_centers(self) -> dict:
        centers: dict[str, list] = {}
        for rec in self.views.values():
            if rec.registered and rec.pose.pano_id is not None:
                centers.setdefault(rec.pose.pano_id, []).append(rec.pose.center)
        return {p: np.mean(cs, axis=0) for p, cs in centers.items()}

    def apply_similarity(self, sim) -> "Reconstruction":
        out = Reconstruction(self.num_slots)
        out.intrinsics = dict(self.intrinsics)
        out.scale_state = self.scale_state
        out.enu_origin = self.enu_origin
        out.road_marks = set(self.road_marks)
        out.summary = replace(self.summary)
        for vid in self.views:
            rec = self.views[vid]
            pose = sim.transform_pose(rec.pose) if rec.registered else rec.pose
            out.add_view(vid, ViewRecord(pose, rec.intrinsics_id, rec.registered))
        out.tracks = {pid: Track(pid, list(t.observations)) for pid, t in self.tracks.items()}
        out.points = {pid: sim.apply(xyz) for pid, xyz in self.points.items()}
        return out

    def observations_by_view(self) -> dict:
        """view_id -> list of (point_id, pixel) over all tracks."""
        out: dict[str, list] = {vid: [] for vid in self.views}
        for pid, track in self.tracks.items():
            for vid, px in track.observations:
                if vid in out:
                    out[vid].append((pid, px))
        return out

    def reprojection_errors(self) -> np.ndarray:
        """Pixel error of every observation of a triangulated point."""
        by_view = self.observations_by_view()
        errs = []
        for vid in self.registered_view_ids():
            rec = self.views[vid]
            intr = self.intrinsics[rec.intrinsics_id]
            rows = [(self.points[pid], px) for pid, px in by_view[vid] if pid in self.points]
            if not rows:
                continue
            proj, z = project_points(intr, rec.pose, np.array([r[0] for r in rows]))
            e = np.linalg.norm(proj - np.array([r[1] for r in rows]), axis=1)
            e[z <= 0] = np.inf
            errs.append(e)
        return np.concatenate(errs) if errs else np.zeros(0)

    def rms_reprojection_error(self) -> float:
        e = self.reprojection_errors()
        e = e[np.isfinite(e)]
        return float(np.sqrt(np.mean(e * e))) if e.size else math.nan


def candidate_pairs_by_proximity(panos, positions: dict, radius_m: float = 60.0):
    """Panorama id pairs whose centers lie within radius_m of each other.

    Stands in for the paper pipeline's image-retrieval pair selection; the
    positions map carries panorama centers in a shared metric frame.
    """
    ids = sorted(p.pano_id for p in panos)
    out = []
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            if np.linalg.norm(np.asarray(positions[a]) - np.asarray(positions[b])) <= radius_m:
                out.append((a, b))
    return out


# ---------------------------------------------------------------------------
# two-view geometry


def _normalized_coords(intr: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if intr.k1 == intr.k2 == intr.p1 == intr.p2 == 0.0:
        return (pixels - [intr.px, intr.py]) / [intr.fx, intr.fy]
    return np.array([undistort_pixel(intr, px) for px in pixels])


def _essential_from_eight(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Least-squares essential matrix from >= 8 normalized correspondences."""
    A = np.column_stack(
        [
            xb[:, 0] * xa[:, 0],
            xb[:, 0] * xa[:, 1],
            xb[:, 0],
            xb[:, 1] * xa[:, 0],
            xb[:, 1] * xa[:, 1],
            xb[:, 1],
            xa[:, 0],
            xa[:, 1],
            np.ones(len(xa)),
        ]
    )
    _, _, vt = np.linalg.svd(A)
    E = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(E)
    sigma = (s[0] + s[1]) / 2.0
    return u @ np.diag([sigma, sigma, 0.0]) @ vt


def _sampson_sq(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    Ex = ha @ E.T  # rows E @ xa
    Etx = hb @ E  # rows E^T @ xb
    num = np.einsum("ni,ni->n", hb, Ex) ** 2
    den = Ex[:, 0] ** 2 + Ex[:, 1] ** 2 + Etx[:, 0] ** 2 + Etx[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def _midpoint_triangulate(R_cw: np.ndarray, t_cw: np.ndarray, xa: np.ndarray, xb: np.ndarray):
    """Midpoint triangulation in the frame of camera a; returns (points, depths_a, depths_b, angles)."""
    da = np.column_stack([xa, np.ones(len(xa))])
    da /= np.linalg.norm(da, axis=1, keepdims=True)
    db_cam = np.column_stack([xb, np.ones(len(xb))])
    db = db_cam @ R_cw  # R_cw^T @ db_cam, per row
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    cb = -R_cw.T @ t_cw  # center of camera b in frame a
    # minimize |s*da - (cb + t*db)|^2 -> 2x2 normal equations per row
    dd = np.einsum("ni,ni->n", da, db)
    rhs_a = da @ cb
    rhs_b = db @ cb
    det = 1.0 - dd * dd
    det = np.where(np.abs(det) < 1e-12, np.nan, det)
    s = (rhs_a - dd * rhs_b) / det
    t = (dd * rhs_a - rhs_b) / det
    pa = s[:, None] * da
    pb = cb + t[:, None] * db
    mid = 0.5 * (pa + pb)
    depth_a = mid[:, 2]
    depth_b = (mid @ R_cw.T + t_cw)[:, 2]
    rays_b = mid - cb
    cosang = np.einsum("ni,ni->n", mid, rays_b) / np.maximum(
        np.linalg.norm(mid, axis=1) * np.linalg.norm(rays_b, axis=1), 1e-300
    )
    angles = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return mid, depth_a, depth_b, angles


def _decompose_essential(E: np.ndarray, xa: np.ndarray, xb: np.ndarray):
    """Cheirality-consistent (R_cw, t_cw) with camera a as the world frame."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for R in (u @ W @ vt, u @ W.T @ vt):
        for tsign in (1.0, -1.0):
            t = tsign * u[:, 2]
            _, da, db, angles = _midpoint_triangulate(R, t, xa, xb)
            good = int(np.sum((da > 0) & (db > 0)))
            if best is None or good > best[0]:
                ang = angles[(da > 0) & (db > 0)]
                med = float(np.median(ang)) if ang.size else 0.0
                best = (good, R, t, med)
    _, R, t, med_angle = best
    return R, t, med_angle


def bootstrap_two_view(
    pixels_a,
    pixels_b,
    intr: CameraIntrinsics,
    threshold_px: float = 1.0,
    confidence: float = 0.9999,
    max_iter: int = 2000,
    seed: int = 0,
):
    """Relative pose of view b w.r.t. view a from 2D-2D correspondences.

    Essential-matrix RANSAC over an 8-point solver on normalized coordinates,
    refit on the consensus set, then decomposed to the cheirality-consistent
    pose with unit-norm baseline. Raises DegeneratePairError when fewer than
    max(15, 50%) correspondences agree and RotationOnlyError when the median
    triangulation angle of the inliers is below 1 degree.
    """
    pose, mask, _ = _bootstrap_scored(
        pixels_a, pixels_b, intr, threshold_px, confidence, max_iter, seed
    )
    return pose, mask


def _bootstrap_scored(pixels_a, pixels_b, intr, threshold_px, confidence, max_iter, seed):
    xa = _normalized_coords(intr, pixels_a)
    xb = _normalized_coords(intr, pixels_b)
    n = len(xa)
    if n < 8:
        raise DegeneratePairError(f"two-view bootstrap needs >= 8 correspondences, got {n}")
    f_avg = 0.5 * (intr.fx + intr.fy)
    thr = (threshold_px / f_avg) ** 2
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    needed = max_iter
    it = 0
    while it < needed and it < max_iter:
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = _essential_from_eight(xa[idx], xb[idx])
        except np.linalg.LinAlgError:
            continue
        mask = _sampson_sq(E, xa, xb) < thr
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count == n:
                break
            needed = iterations_needed(confidence, count / n, 8, max_iter)
    if best_count < max(15, math.ceil(0.5 * n)):
        raise DegeneratePairError(
            f"two-view bootstrap found only {max(best_count, 0)}/{n} consistent correspondences"
        )
    E = _essential_from_eight(xa[best_mask], xb[best_mask])
    mask = _sampson_sq(E, xa, xb) < thr
    if mask.sum() >= 8:
        E = _essential_from_eight(xa[mask], xb[mask])
        mask = _sampson_sq(E, xa, xb) < thr
    R_cw, t_cw, med_angle = _decompose_essential(E, xa[mask], xb[mask])
    if med_angle < 1.0:
        raise RotationOnlyError(
            f"pair is rotation-only (median triangulation angle {med_angle:.3f} deg)"
        )
    pose_b = ViewPose(Rotation(R_cw.T), -R_cw.T @ t_cw)
    return pose_b, mask, med_angle


def triangulate(views, pixels, min_angle_deg: float = 0.5) -> np.ndarray:
    """DLT triangulation over >= 2 registered views plus one GN refinement.

    views is a list of (ViewPose, CameraIntrinsics); pixels the matching
    observations. Raises LowParallaxError when all ray pairs are within
    min_angle_deg and CheiralityError on non-positive depth.
    """
    if len(views) < 2 or len(views) != len(pixels):
        raise ValidationError("triangulation needs >= 2 (view, pixel) pairs")
    norm_xy = []
    rows = []
    cams = []
    for (pose, intr), px in zip(views, pixels):
        xy = undistort_pixel(intr, px) if any((intr.k1, intr.k2, intr.p1, intr.p2)) else (
            (np.asarray(px, dtype=float) - [intr.px, intr.py]) / [intr.fx, intr.fy]
        )
        norm_xy.append(xy)
        R_cw = pose.rotation.matrix.T
        t_cw = -R_cw @ pose.center
        P = np.hstack([R_cw, t_cw[:, None]])
        rows.append(xy[0] * P[2] - P[0])
        rows.append(xy[1] * P[2] - P[1])
        cams.append((pose, R_cw, t_cw))
    dirs = []
    for (pose, _, _), xy in zip(cams, norm_xy):
        d = pose.rotation.apply(np.array([xy[0], xy[1], 1.0]))
        dirs.append(d / np.linalg.norm(d))
    max_angle = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            c = float(np.clip(dirs[i] @ dirs[j], -1.0, 1.0))
            max_angle = max(max_angle, math.degrees(math.acos(c)))
    if max_angle < min_angle_deg:
        raise LowParallaxError(f"triangulation rays within {max_angle:.3f} deg of parallel")
    A = np.array(rows)
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise LowParallaxError("triangulated point at infinity")
    X = X[:3] / X[3]
    # one Gauss-Newton step on the normalized reprojection residuals
    J = np.zeros((2 * len(cams), 3))
    r = np.zeros(2 * len(cams))
    for i, ((pose, R_cw, t_cw), xy) in enumerate(zip(cams, norm_xy)):
        q = R_cw @ X + t_cw
        if q[2] <= 1e-12:
            raise CheiralityError("triangulated point behind a camera")
        A2 = np.array([[1.0 / q[2], 0.0, -q[0] / q[2] ** 2], [0.0, 1.0 / q[2], -q[1] / q[2] ** 2]])
        J[2 * i : 2 * i + 2] = A2 @ R_cw
        r[2 * i : 2 * i + 2] = q[:2] / q[2] - xy
    JtJ = J.T @ J
    try:
        X = X - np.linalg.solve(JtJ + 1e-12 * np.eye(3), J.T @ r)
    except np.linalg.LinAlgError:
        pass
    for pose, R_cw, t_cw in cams:
        if (R_cw @ X + t_cw)[2] <= 1e-12:
            raise CheiralityError("triangulated point behind a camera")
    return X


# ---------------------------------------------------------------------------
# P3P


def _p3p_solutions(pts: np.ndarray, bearings: np.ndarray):
    """Grunert's P3P: up to four (R_cw, t_cw) solutions for 3 correspondences.

    The quartic is assembled numerically from the two law-of-cosines ratios,
    avoiding hand-transcribed coefficient tables.
    """
    P1, P2, P3 = pts
    a = float(np.linalg.norm(P2 - P3))
    b = float(np.linalg.norm(P1 - P3))
    c = float(np.linalg.norm(P1 - P2))
    if min(a, b, c) < 1e-9:
        return []
    f1, f2, f3 = bearings
    ca = float(f2 @ f3)
    cb = float(f1 @ f3)
    cg = float(f1 @ f2)
    a2b = (a * a - c * c) / (b * b)
    # u = s2/s1 = N(v)/D(v) from eliminating u between the two ratio equations
    N = np.array([a2b - 1.0, -2.0 * a2b * cb, a2b + 1.0])
    D = np.array([-2.0 * ca, 2.0 * cg])
    Q = np.array([1.0, -2.0 * cb, 1.0])  # 1 + v^2 - 2 v cb, in v
    DD = np.polymul(D, D)
    lhs = np.polyadd(np.polyadd(DD, np.polymul(N, N)), -2.0 * cg * np.polymul(N, D))
    poly = np.polyadd(b * b * lhs, -c * c * np.polymul(Q, DD))
    if np.max(np.abs(poly)) < 1e-18:
        return []
    roots = np.roots(poly)
    sols = []
    for v in roots:
        if abs(v.imag) > 1e-8 * max(1.0, abs(v.real)):
            continue
        v = float(v.real)
        if v <= 0:
            continue
        dv = float(np.polyval(D, v))
        if abs(dv) < 1e-12:
            continue
        u = float(np.polyval(N, v)) / dv
        if u <= 0:
            continue
        denom = 1.0 + v * v - 2.0 * v * cb
        if denom <= 1e-12:
            continue
        s1 = b / math.sqrt(denom)
        s2, s3 = u * s1, v * s1
        Q_cam = np.array([s1 * f1, s2 * f2, s3 * f3])
        d_cam = (
            np.linalg.norm(Q_cam[1] - Q_cam[2]),
            np.linalg.norm(Q_cam[0] - Q_cam[2]),
            np.linalg.norm(Q_cam[0] - Q_cam[1]),
        )
        if not np.allclose(d_cam, (a, b, c), rtol=1e-4, atol=1e-9 * max(a, b, c)):
            continue
        R_cw, t_cw = _rigid_fit(pts, Q_cam)
        sols.append((R_cw, t_cw))
    return sols


def _rigid_fit(P: np.ndarray, Q: np.ndarray):
    """Least-squares rigid transform with Q ~= R @ P + t."""
    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    H = (Q - cq).T @ (P - cp)
    u, _, vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(u @ vt))
    R = u @ np.diag([1.0, 1.0, d]) @ vt
    return R, cq - R @ cp


def _project_cw(intr: CameraIntrinsics, R_cw: np.ndarray, t_cw: np.ndarray, pts: np.ndarray):
    q = pts @ R_cw.T + t_cw
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = q[:, :2] / z[:, None]
        from .geometry import distort_normalized

        xd = distort_normalized(intr, xy)
    pix = xd * [intr.fx, intr.fy] + [intr.px, intr.py]
    return pix, z


def register_view_p3p(
    points3d,
    pixels,
    intr: CameraIntrinsics,
    threshold_px: float = 2.0,
    confidence: float = 0.9999,
    max_iter: int = 10000,
    seed: int = 0,
    min_inliers: int = 4,
    refine: bool = True,
):
    """Absolute pose from 2D-3D correspondences: P3P inside RANSAC, LM refit.

    Samples 3 correspondences for the minimal solver plus a 4th to pick among
    its solutions; inliers are reprojection errors below threshold_px. Raises
    LocalizationFailedError when no model reaches min_inliers.
    """
    pts = np.asarray(points3d, dtype=float).reshape(-1, 3)
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = pts.shape[0]
    if n < 4:
        raise ValidationError(f"P3P registration needs >= 4 correspondences, got {n}")
    xy = _normalized_coords(intr, pix)
    bearings = np.column_stack([xy, np.ones(n)])
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    needed = max_iter
    it = 0
    while it < needed and it < max_iter:
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        sols = _p3p_solutions(pts[idx[:3]], bearings[idx[:3]])
        if not sols:
            continue
        model = None
        model_err = math.inf
        for R_cw, t_cw in sols:
            proj, z = _project_cw(intr, R_cw, t_cw, pts[idx[3:4]])
            if z[0] <= 0 or not np.all(np.isfinite(proj)):
                continue
            err = float(np.linalg.norm(proj[0] - pix[idx[3]]))
            if err < model_err:
                model_err = err
                model = (R_cw, t_cw)
        if model is None:
            continue
        proj, z = _project_cw(intr, model[0], model[1], pts)
        err = np.linalg.norm(proj - pix, axis=1)
        mask = (z > 0) & np.isfinite(err) & (err < threshold_px)
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best = (model[0], model[1], mask)
            if count == n:
                break
            needed = iterations_needed(confidence, count / n, 4, max_iter)
    if best is None or best_count < min_inliers:
        raise LocalizationFailedError(
            f"P3P RANSAC found no pose with >= {min_inliers} inliers (best {max(best_count, 0)})"
        )
    R_cw, t_cw, mask = best
    pose = ViewPose(Rotation(R_cw.T), -R_cw.T @ t_cw)
    if refine:
        pose = _refine_pose(pose, intr, pts[mask], pix[mask])
        proj, z = _project_cw(intr, pose.rotation.matrix.T, -pose.rotation.matrix.T @ pose.center, pts)
        err = np.linalg.norm(proj - pix, axis=1)
        mask = (z > 0) & np.isfinite(err) & (err < threshold_px)
    return pose, mask


def _refine_pose(pose: ViewPose, intr: CameraIntrinsics, pts: np.ndarray, pix: np.ndarray) -> ViewPose:
    problem = optim.Problem.from_views([ViewPose(pose.rotation, pose.center)], pts, [intr], points_free=False)
    n = pts.shape[0]
    problem.set_observations(np.zeros(n, dtype=int), np.arange(n), np.zeros(n, dtype=int), pix)
    solved, _ = optim.solve_lm(problem, optim.LMOptions(max_iter=30))
    refined = solved.view_pose(0)
    return ViewPose(refined.rotation, refined.center, pano_id=pose.pano_id, slot_index=pose.slot_index)


# ---------------------------------------------------------------------------
# track building


class _UnionFind:
    def __init__(self):
        self.parent = []
        self.obs = []  # root -> {view_id: pixel tuple}

    def add(self, view_id, pixel):
        self.parent.append(len(self.parent))
        self.obs.append({view_id: pixel})
        return len(self.parent) - 1

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        """Merge unless the merged track would see one view at two pixels."""
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return
        if len(self.obs[ri]) < len(self.obs[rj]):
            ri, rj = rj, ri
        big, small = self.obs[ri], self.obs[rj]
        for vid, px in small.items():
            if big.get(vid, px) != px:
                return  # conflicting link dropped
        big.update(small)
        self.parent[rj] = ri
        self.obs[rj] = {}


def build_tracks(matches: MatchSet, masks: Optional[dict] = None):
    """Transitive linking of pairwise correspondences into tracks.

    masks optionally maps view_id to a list of (u0, v0, u1, v1) boxes;
    correspondences whose pixel falls inside a box of its view are dropped
    before linking (dynamic-object suppression).
    """
    uf = _UnionFind()
    index: dict = {}

    def node(vid, px):
        key = (vid, px[0], px[1])
        found = index.get(key)
        if found is None:
            found = uf.add(vid, (px[0], px[1]))
            index[key] = found
        return found

    for pair in matches:
        pa, pb = pair.pixels_a, pair.pixels_b
        keep = np.ones(len(pair), dtype=bool)
        if masks:
            keep &= ~_masked(masks.get(pair.view_a), pa)
            keep &= ~_masked(masks.get(pair.view_b), pb)
        for k in np.nonzero(keep)[0]:
            ia = node(pair.view_a, (float(pa[k, 0]), float(pa[k, 1])))
            ib = node(pair.view_b, (float(pb[k, 0]), float(pb[k, 1])))
            uf.union(ia, ib)

    roots: dict[int, int] = {}
    tracks: dict[int, Track] = {}
    for i in range(len(uf.parent)):
        r = uf.find(i)
        if r in roots or len(uf.obs[r]) < 2:
            continue
        pid = len(roots)
        roots[r] = pid
        obs = [(vid, np.array(px)) for vid, px in uf.obs[r].items()]
        tracks[pid] = Track(pid, obs)
    return tracks


def _masked(boxes, pixels: np.ndarray) -> np.ndarray:
    out = np.zeros(len(pixels), dtype=bool)
    if not boxes:
        return out
    for u0, v0, u1, v1 in boxes:
        out |= (
            (pixels[:, 0] >= u0) & (pixels[:, 0] <= u1) & (pixels[:, 1] >= v0) & (pixels[:, 1] <= v1)
        )
    return out


# ---------------------------------------------------------------------------
# incremental reconstruction


@dataclass
class ReconstructOptions:
    pano_mode: str = "soft"
    pano_weight: float = 1e4
    pano_constraint: bool = True
    fix_intrinsics: bool = True
    robust_delta: float = 2.0
    seed: int = 0
    bootstrap_threshold_px: float = 1.0
    p3p_threshold_px: float = 2.0
    ransac_confidence: float = 0.9999
    p3p_max_iter: int = 10000
    min_tri_angle_deg: float = 0.5
    prune_reproj_px: float = 4.0
    prune_tri_angle_deg: float = 1.0
    ba_growth: float = 1.25
    max_bootstrap_pairs: int = 32
    min_bootstrap_angle_deg: float = 3.0
    min_register_correspondences: int = 6
    local_ba_iters: int = 8
    global_ba_iters: int = 30
    final_ba_iters: int = 80


def reconstruct(
    panos,
    cfg: SamplingConfig,
    matches: MatchSet,
    options: Optional[ReconstructOptions] = None,
    masks: Optional[dict] = None,
    road_labels: Optional[set] = None,
) -> Reconstruction:
    """Incremental SfM over the sampled views of the given panoramas.

    Bootstraps from the candidate pair maximizing inliers x median
    triangulation angle, then repeatedly registers the view with the most
    2D-3D correspondences, triangulates, locally adjusts, and runs a global
    BA (panorama constraints included per options) whenever the registered
    view count has grown 25%. Outlier tracks are pruned between BAs.
    Partial registration is reported in the summary, not raised.
    """
    opts = options or ReconstructOptions()
    cfg.validate()
    if len(panos) < 2:
        raise ValidationError(f"reconstruction needs >= 2 panoramas, got {len(panos)}")
    recon = Reconstruction(num_slots=cfg.num_views)
    recon.intrinsics[DB_INTRINSICS_ID] = cfg.ideal_intrinsics()
    for pano in sorted(panos, key=lambda p: p.pano_id):
        for pose, _ in sample_perspective_views(pano, cfg):
            recon.add_view(view_id_of(pano.pano_id, pose.slot_index), ViewRecord(pose, DB_INTRINSICS_ID))
    unknown = [p.view_a for p in matches if p.view_a not in recon.views]
    unknown += [p.view_b for p in matches if p.view_b not in recon.views]
    if unknown:
        raise ValidationError(f"match file references unknown views: {sorted(set(unknown))[:4]}")

    recon.tracks = build_tracks(matches, masks)
    recon.summary.total_views = len(recon.views)
    recon.summary.pano_constraint = opts.pano_constraint
    recon.summary.pano_mode = opts.pano_mode

    view_obs = recon.observations_by_view()
    view_tracks: dict[str, list] = {vid: [pid for pid, _ in obs] for vid, obs in view_obs.items()}

    _bootstrap(recon, matches, view_obs, opts)
    intr = recon.intrinsics[DB_INTRINSICS_ID]
    registered = set(recon.registered_view_ids())
    _triangulate_pending(recon, view_obs, intr, opts)

    last_ba_count = len(registered)
    failed: set = set()
    seed_counter = 1000
    while True:
        candidate = _next_view(recon, view_obs, registered, failed, opts)
        if candidate is None:
            if failed:
                recon.summary.failed_views = sorted(failed)
            break
        vid, corr = candidate
        pts = np.array([recon.points[pid] for pid, _ in corr])
        pix = np.array([px for _, px in corr])
        seed_counter += 1
        try:
            pose, mask = register_view_p3p(
                pts,
                pix,
                intr,
                threshold_px=opts.p3p_threshold_px,
                confidence=opts.ransac_confidence,
                max_iter=opts.p3p_max_iter,
                seed=opts.seed + seed_counter,
            )
        except LocalizationFailedError:
            failed.add(vid)
            continue
        if opts.pano_constraint and _violates_rig(recon, vid, pose, opts):
            # the known rig says sibling views share a center; a registration
            # landing far from its siblings is wrong (or they are) and would
            # be amplified by the constraint, so retry it after the next BA
            failed.add(vid)
            continue
        old = recon.views[vid].pose
        recon.views[vid].pose = ViewPose(pose.rotation, pose.center, old.pano_id, old.slot_index)
        recon.views[vid].registered = True
        registered.add(vid)
        new_pids = _triangulate_pending(recon, view_obs, intr, opts, only_tracks=view_tracks[vid])
        _local_ba(recon, vid, new_pids, opts)
        if len(registered) >= opts.ba_growth * last_ba_count:
            _global_ba(recon, opts, final=False)
            _prune_tracks(recon, opts)
            _triangulate_pending(recon, view_obs, intr, opts)
            last_ba_count = len(registered)
            failed.clear()

    _global_ba(recon, opts, final=True)
    _prune_tracks(recon, opts)
    if road_labels:
        _mark_road_points(recon, road_labels)
    recon.summary.registered_views = len(recon.registered_view_ids())
    recon.summary.triangulated_points = len(recon.points)
    recon.summary.rms_reprojection_px = recon.rms_reprojection_error()
    return recon


def _bootstrap(recon: Reconstruction, matches: MatchSet, view_obs, opts: ReconstructOptions):
    intr = recon.intrinsics[DB_INTRINSICS_ID]
    cross = [
        p
        for p in matches
        if len(p) >= 8 and p.view_a.rsplit("#", 1)[0] != p.view_b.rsplit("#", 1)[0]
    ]
    cross.sort(key=lambda p: (-len(p), p.view_a, p.view_b))
    scored = []
    for i, pair in enumerate(cross[: opts.max_bootstrap_pairs]):
        try:
            # scoring pass at a reduced RANSAC budget; winners rerun fully
            _, mask, angle = _bootstrap_scored(
                pair.pixels_a,
                pair.pixels_b,
                intr,
                opts.bootstrap_threshold_px,
                opts.ransac_confidence,
                400,
                opts.seed + i,
            )
        except DegeneratePairError:
            continue
        scored.append((float(mask.sum()) * angle, i, pair))
    scored.sort(key=lambda t: (-t[0], t[1]))
    chosen = None
    fallback = None
    for _, i, cand in scored:
        try:
            pose_c, _, angle = _bootstrap_scored(
                cand.pixels_a,
                cand.pixels_b,
                intr,
                opts.bootstrap_threshold_px,
                opts.ransac_confidence,
                2000,
                opts.seed + i,
            )
        except DegeneratePairError:
            continue
        if fallback is None:
            fallback = (pose_c, cand)
        if angle >= opts.min_bootstrap_angle_deg:
            chosen = (pose_c, cand)
            break
    chosen = chosen or fallback
    if chosen is None:
        raise ReconstructionFailedError(
            "two-view bootstrap failed on all candidate pairs", stage="bootstrap"
        )
    pose_b, pair = chosen
    rec_a, rec_b = recon.views[pair.view_a], recon.views[pair.view_b]
    rec_a.pose = ViewPose(
        Rotation.identity(), np.zeros(3), rec_a.pose.pano_id, rec_a.pose.slot_index
    )
    rec_b.pose = ViewPose(pose_b.rotation, pose_b.center, rec_b.pose.pano_id, rec_b.pose.slot_index)
    rec_a.registered = True
    rec_b.registered = True


def _violates_rig(recon: Reconstruction, vid: str, pose: ViewPose, opts: ReconstructOptions) -> bool:
    pano = recon.views[vid].pose.pano_id
    siblings = [
        recon.views[v].pose.center
        for v in recon.registered_view_ids()
        if recon.views[v].pose.pano_id == pano
    ]
    if not siblings:
        return False
    centers = recon.panorama_centers()
    if len(centers) >= 2:
        pts = np.array(list(centers.values()))
        sep = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        scale = float(np.median(sep[np.triu_indices(len(pts), 1)]))
    else:
        scale = 1.0
    gap = float(np.linalg.norm(pose.center - np.mean(siblings, axis=0)))
    return gap > max(0.15 * scale, 1e-6)


def _next_view(recon, view_obs, registered, failed, opts):
    best = None
    for vid in recon.views:
        if vid in registered or vid in failed:
            continue
        corr = [(pid, px) for pid, px in view_obs[vid] if pid in recon.points]
        if len(corr) < max(4, opts.min_register_correspondences):
            continue
        key = (-len(corr), recon.view_order_key(vid))
        if best is None or key < best[0]:
            best = (key, vid, corr)
    if best is None:
        return None
    return best[1], best[2]


def _triangulate_pending(recon: Reconstruction, view_obs, intr, opts: ReconstructOptions, only_tracks=None):
    """Triangulate pending tracks; returns the list of newly solved point ids."""
    pids = sorted(set(only_tracks)) if only_tracks is not None else sorted(recon.tracks)
    solved = []
    for pid in pids:
        if pid in recon.points:
            continue
        track = recon.tracks[pid]
        vp = [
            (recon.views[vid].pose, intr, px)
            for vid, px in track.observations
            if recon.views[vid].registered
        ]
        if len(vp) < 2:
            continue
        try:
            xyz = triangulate([(p, i) for p, i, _ in vp], [px for _, _, px in vp], opts.min_tri_angle_deg)
        except (LowParallaxError, CheiralityError):
            continue
        recon.points[pid] = xyz
        solved.append(pid)
    return solved


def _local_ba(recon: Reconstruction, new_view: str, new_pids, opts: ReconstructOptions):
    """Adjust the newly registered pose plus the points triangulated with it."""
    pids = [pid for pid in new_pids if pid in recon.points]
    involved = [new_view]
    seen = {new_view}
    for pid in pids:
        for vid, _ in recon.tracks[pid].observations:
            if vid not in seen and recon.views[vid].registered:
                seen.add(vid)
                involved.append(vid)
    vindex = {vid: i for i, vid in enumerate(involved)}
    pindex = {pid: i for i, pid in enumerate(pids)}
    poses = [recon.views[vid].pose for vid in involved]
    intr = recon.intrinsics[DB_INTRINSICS_ID]
    pose_free = np.zeros((len(involved), 6), dtype=bool)
    pose_free[0, :] = True
    ov, op, oi, opx = [], [], [], []
    for pid in pids:
        for vid, px in recon.tracks[pid].observations:
            if vid in vindex:
                ov.append(vindex[vid])
                op.append(pindex[pid])
                oi.append(0)
                opx.append(px)
    if not pids:
        return
    problem = optim.Problem.from_views(
        poses, np.array([recon.points[p] for p in pids]), [intr], pose_free=pose_free
    )
    problem.set_observations(ov, op, oi, opx, huber_delta=opts.robust_delta)
    try:
        solved, _ = optim.solve_lm(problem, optim.LMOptions(max_iter=opts.local_ba_iters))
    except ValidationError:
        return  # e.g. the new pose sees none of the new points; global BA covers it
    new_pose = solved.view_pose(0)
    old = recon.views[new_view].pose
    recon.views[new_view].pose = ViewPose(new_pose.rotation, new_pose.center, old.pano_id, old.slot_index)
    for pid, row in zip(pids, solved.points):
        recon.points[pid] = row


def _global_ba(recon: Reconstruction, opts: ReconstructOptions, final: bool):
    if len(recon.registered_view_ids()) < 2 or not recon.points:
        return
    cfg = optim.BAConfig(
        pano_weight=opts.pano_weight,
        fix_intrinsics=opts.fix_intrinsics,
        robust_delta=opts.robust_delta,
        pano_mode=opts.pano_mode,
        pano_constraint=opts.pano_constraint,
    )
    problem = optim.build_ba_problem(recon, cfg)
    iters = opts.final_ba_iters if final else opts.global_ba_iters
    try:
        solved, report = optim.solve_lm(problem, optim.LMOptions(max_iter=iters))
    except NumericalError as exc:
        recon.summary.notes.append(f"global BA skipped: {exc}")
        return
    for vid, pose in zip(solved.view_ids, solved.view_poses()):
        old = recon.views[vid].pose
        recon.views[vid].pose = ViewPose(pose.rotation, pose.center, old.pano_id, old.slot_index)
    for pid, row in zip(solved.point_ids, solved.points):
        recon.points[pid] = row
    if not cfg.fix_intrinsics:
        for iid, intr in zip(sorted(recon.intrinsics), solved.intrinsics):
            recon.intrinsics[iid] = intr
    recon.summary.final_cost = report.final_cost


def _prune_tracks(recon: Reconstruction, opts: ReconstructOptions):
    """Drop triangulated tracks with large reprojection error or low parallax.

    Vectorized per view: observation errors accumulate into per-point maxima,
    then the max pairwise ray angle is checked per point.
    """
    pids = sorted(recon.points)
    if not pids:
        return
    pindex = {pid: i for i, pid in enumerate(pids)}
    xyz = np.array([recon.points[p] for p in pids])
    max_err = np.zeros(len(pids))
    bad_depth = np.zeros(len(pids), dtype=bool)
    dirs_by_point: list = [[] for _ in pids]
    by_view = recon.observations_by_view()
    for vid in recon.registered_view_ids():
        rows = [(pindex[pid], px) for pid, px in by_view[vid] if pid in pindex]
        if not rows:
            continue
        rec = recon.views[vid]
        intr = recon.intrinsics[rec.intrinsics_id]
        idx = np.array([r[0] for r in rows])
        obs = np.array([r[1] for r in rows])
        proj, z = project_points(intr, rec.pose, xyz[idx])
        err = np.linalg.norm(proj - obs, axis=1)
        bad = (z <= 1e-12) | ~np.isfinite(err)
        np.maximum.at(max_err, idx[~bad], err[~bad])
        bad_depth[idx[bad]] = True
        d = xyz[idx] - rec.pose.center
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        for k, i in enumerate(idx):
            dirs_by_point[i].append(d[k])
    cos_lim = math.cos(math.radians(opts.prune_tri_angle_deg))
    for i, pid in enumerate(pids):
        dirs = dirs_by_point[i]
        drop = bad_depth[i] or max_err[i] > opts.prune_reproj_px or len(dirs) < 2
        if not drop:
            D = np.array(dirs)
            min_cos = float((D @ D.T).min())
            drop = min_cos > cos_lim  # all ray pairs nearly parallel
        if drop:
            del recon.points[pid]


def _mark_road_points(recon: Reconstruction, road_labels: set):
    for pid in recon.points:
        obs = recon.tracks[pid].observations
        hits = sum(1 for vid, px in obs if (vid, float(px[0]), float(px[1])) in road_labels)
        if hits * 2 >= len(obs):
            recon.road_marks.add(pid)
