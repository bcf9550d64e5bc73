"""Sparse Levenberg-Marquardt engine and the bundle-adjustment residual blocks.

Residual kinds:

* reprojection: project(intr, pose, point) - observation, optionally Huber;
* pano_translation: center(view_b) - center(view_a) for consecutive slots of
  one panorama;
* pano_rotation: vec(R_b^T R_a - S_T) where S_T is the exact yaw-step rotation
  of the sampling construction (geometry.slot_relative_rotation). This is the
  camera-frame relative rotation, so the penalty is invariant under global
  rigid transforms and does not fight the gauge.

Pose parameters use a right-multiplied local tangent: R <- R @ exp([dr]x),
C <- C + dc. In hard pano mode several views share one pose parameter group
through fixed slot rotations; Jacobians are chain-ruled through those maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .errors import CheiralityError, NumericalError, UsageError, ValidationError
from .geometry import (
    CameraIntrinsics,
    Rotation,
    ViewPose,
    distort_jacobian,
    distort_normalized,
    skew,
    slot_relative_rotation,
)

_GENERATORS = np.stack([skew([1.0, 0.0, 0.0]), skew([0.0, 1.0, 0.0]), skew([0.0, 0.0, 1.0])])
_MIN_DEPTH = 1e-9


# ---------------------------------------------------------------------------
# residual blocks


@dataclass
class ReprojectionBlocks:
    """One reprojection residual per observation (structure of arrays)."""

    view_idx: np.ndarray
    point_idx: np.ndarray
    intr_idx: np.ndarray
    pixels: np.ndarray
    weights: np.ndarray
    huber_delta: np.ndarray  # nan disables the robust loss for that row

    @staticmethod
    def empty() -> "ReprojectionBlocks":
        z = np.zeros(0, dtype=int)
        return ReprojectionBlocks(z, z.copy(), z.copy(), np.zeros((0, 2)), np.zeros(0), np.zeros(0))

    def __len__(self):
        return self.view_idx.shape[0]


@dataclass
class PanoramaBlocks:
    """Paired translation+rotation constraints for consecutive panorama slots."""

    view_a: np.ndarray
    view_b: np.ndarray
    weights: np.ndarray
    targets: np.ndarray  # (K, 3, 3) expected R_b^T R_a

    @staticmethod
    def empty() -> "PanoramaBlocks":
        z = np.zeros(0, dtype=int)
        return PanoramaBlocks(z, z.copy(), np.zeros(0), np.zeros((0, 3, 3)))

    def __len__(self):
        return self.view_a.shape[0]


@dataclass
class Problem:
    """Parameter blocks, residual blocks, and the gauge policy of one solve.

    Views map to pose parameter groups: in soft mode every view is its own
    group with an identity slot rotation; in hard mode all views of a panorama
    share a group and differ by fixed slot rotations.
    """

    group_rotations: np.ndarray  # (G, 3, 3)
    group_centers: np.ndarray  # (G, 3)
    points: np.ndarray  # (P, 3)
    intrinsics: list
    view_group: np.ndarray  # (Nv,)
    view_slot_rot: np.ndarray  # (Nv, 3, 3)
    view_meta: list  # (pano_id, slot_index) per view
    pose_free: np.ndarray  # (G, 6) bool: rot xyz then center xyz
    intr_free: np.ndarray  # (M, 8) bool
    points_free: bool
    reproj: ReprojectionBlocks
    pano: PanoramaBlocks
    view_ids: Optional[list] = None
    point_ids: Optional[list] = None

    @staticmethod
    def from_views(poses, points, intrinsics, pose_free=None, intr_free=None, points_free=True):
        """Soft-mode problem: one parameter group per view."""
        n = len(poses)
        rot = np.array([p.rotation.matrix for p in poses]).reshape(n, 3, 3)
        cen = np.array([p.center for p in poses]).reshape(n, 3)
        meta = [(p.pano_id, p.slot_index) for p in poses]
        if pose_free is None:
            pose_free = np.ones((n, 6), dtype=bool)
        m = len(intrinsics)
        if intr_free is None:
            intr_free = np.zeros((m, 8), dtype=bool)
        return Problem(
            group_rotations=rot,
            group_centers=cen,
            points=np.asarray(points, dtype=float).reshape(-1, 3).copy(),
            intrinsics=list(intrinsics),
            view_group=np.arange(n),
            view_slot_rot=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
            view_meta=meta,
            pose_free=np.asarray(pose_free, dtype=bool),
            intr_free=np.asarray(intr_free, dtype=bool),
            points_free=points_free,
            reproj=ReprojectionBlocks.empty(),
            pano=PanoramaBlocks.empty(),
        )

    def num_views(self) -> int:
        return self.view_group.shape[0]

    def view_pose(self, v: int) -> ViewPose:
        g = self.view_group[v]
        pano_id, slot = self.view_meta[v]
        rot = Rotation(self.group_rotations[g] @ self.view_slot_rot[v])
        return ViewPose(rot, self.group_centers[g], pano_id=pano_id, slot_index=slot)

    def view_poses(self) -> list:
        return [self.view_pose(v) for v in range(self.num_views())]

    def copy_values(self) -> "Problem":
        out = Problem(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.group_rotations = self.group_rotations.copy()
        out.group_centers = self.group_centers.copy()
        out.points = self.points.copy()
        out.intrinsics = list(self.intrinsics)
        return out

    def add_observation(self, view: int, point: int, intr: int, pixel, weight=1.0, huber_delta=None):
        r = self.reproj
        self.reproj = ReprojectionBlocks(
            np.append(r.view_idx, view),
            np.append(r.point_idx, point),
            np.append(r.intr_idx, intr),
            np.vstack([r.pixels, np.asarray(pixel, dtype=float).reshape(1, 2)]),
            np.append(r.weights, float(weight)),
            np.append(r.huber_delta, math.nan if huber_delta is None else float(huber_delta)),
        )

    def set_observations(self, view_idx, point_idx, intr_idx, pixels, weights=None, huber_delta=None):
        n = len(view_idx)
        self.reproj = ReprojectionBlocks(
            np.asarray(view_idx, dtype=int),
            np.asarray(point_idx, dtype=int),
            np.asarray(intr_idx, dtype=int),
            np.asarray(pixels, dtype=float).reshape(n, 2),
            np.full(n, 1.0) if weights is None else np.asarray(weights, dtype=float),
            np.full(n, math.nan) if huber_delta is None else np.full(n, float(huber_delta)),
        )

    def set_pano_pairs(self, view_a, view_b, num_slots: int, weight: float):
        k = len(view_a)
        target = slot_relative_rotation(num_slots)
        self.pano = PanoramaBlocks(
            np.asarray(view_a, dtype=int),
            np.asarray(view_b, dtype=int),
            np.full(k, float(weight)),
            np.broadcast_to(target, (k, 3, 3)).copy(),
        )

    def total_cost(self) -> float:
        return _evaluate(self, with_jac=False)[0]

    def validate(self):
        nv, ng = self.num_views(), self.group_rotations.shape[0]
        npts, nintr = self.points.shape[0], len(self.intrinsics)
        r, pa = self.reproj, self.pano
        for name, arr, bound in (
            ("view", r.view_idx, nv),
            ("point", r.point_idx, npts),
            ("intrinsics", r.intr_idx, nintr),
            ("view_a", pa.view_a, nv),
            ("view_b", pa.view_b, nv),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise ValidationError(f"residual block references unknown {name} id")
        if np.any(r.weights < 0) or np.any(pa.weights < 0):
            raise ValidationError("residual weights must be nonnegative")
        touched_rot = np.zeros(ng, dtype=bool)
        touched_cen = np.zeros(ng, dtype=bool)
        touched_pt = np.zeros(npts, dtype=bool)
        g_of_view = self.view_group
        touched_rot[g_of_view[r.view_idx]] = True
        touched_cen[g_of_view[r.view_idx]] = True
        touched_pt[r.point_idx] = True
        touched_rot[g_of_view[pa.view_a]] = True
        touched_rot[g_of_view[pa.view_b]] = True
        touched_cen[g_of_view[pa.view_a]] = True
        touched_cen[g_of_view[pa.view_b]] = True
        for g in range(ng):
            if self.pose_free[g, :3].any() and not touched_rot[g]:
                raise ValidationError(f"free rotation of pose group {g} is touched by no residual block")
            if self.pose_free[g, 3:].any() and not touched_cen[g]:
                raise ValidationError(f"free center of pose group {g} is touched by no residual block")
        if self.points_free:
            untouched = np.nonzero(~touched_pt)[0]
            if untouched.size:
                raise ValidationError(f"free point {int(untouched[0])} is touched by no residual block")
        touched_intr = np.zeros(nintr, dtype=bool)
        touched_intr[r.intr_idx] = True
        for m in range(nintr):
            if self.intr_free[m].any() and not touched_intr[m]:
                raise ValidationError(f"free intrinsics {m} are touched by no residual block")
        if self.points_free and npts and len(r) and not (~self.pose_free).any():
            raise ValidationError("problem has gauge freedom: no pose parameter is frozen")


# ---------------------------------------------------------------------------
# public residual operations


def reprojection_residual(intr: CameraIntrinsics, pose: ViewPose, point, observation) -> np.ndarray:
    q = pose.world_to_camera(np.asarray(point, dtype=float))
    if q[2] <= _MIN_DEPTH:
        raise CheiralityError(f"point at depth {q[2]:g} behind camera")
    xy = q[:2] / q[2]
    xd = distort_normalized(intr, xy)
    proj = np.array([intr.fx * xd[0] + intr.px, intr.fy * xd[1] + intr.py])
    return proj - np.asarray(observation, dtype=float)


def reprojection_jacobians(intr: CameraIntrinsics, pose: ViewPose, point):
    """Analytic Jacobians of the reprojection residual.

    Returns (J_pose (2,6) over [rot tangent, center], J_point (2,3),
    J_intr (2,8) over [fx, fy, px, py, k1, k2, p1, p2]).
    """
    R = pose.rotation.matrix
    q = R.T @ (np.asarray(point, dtype=float) - pose.center)
    if q[2] <= _MIN_DEPTH:
        raise CheiralityError(f"point at depth {q[2]:g} behind camera")
    x, y = q[0] / q[2], q[1] / q[2]
    A = np.array([[1.0 / q[2], 0.0, -x / q[2]], [0.0, 1.0 / q[2], -y / q[2]]])
    D = distort_jacobian(intr, np.array([x, y]))
    F = np.diag([intr.fx, intr.fy])
    B = F @ D @ A  # pixel wrt camera-frame point
    J_rot = B @ skew(q)
    J_center = -B @ R.T
    J_point = B @ R.T
    r2 = x * x + y * y
    xd, yd = distort_normalized(intr, np.array([x, y]))
    J_intr = np.array(
        [
            [xd, 0.0, 1.0, 0.0, intr.fx * x * r2, intr.fx * x * r2 * r2, intr.fx * 2 * x * y, intr.fx * (r2 + 2 * x * x)],
            [0.0, yd, 0.0, 1.0, intr.fy * y * r2, intr.fy * y * r2 * r2, intr.fy * (r2 + 2 * y * y), intr.fy * 2 * x * y],
        ]
    )
    return np.hstack([J_rot, J_center]), J_point, J_intr


def pano_residuals(view_a: ViewPose, view_b: ViewPose, num_slots: int):
    """Translation and rotation residuals of one consecutive-slot pair.

    view_a holds slot j-1 and view_b slot j of the same panorama. Residuals
    are zero exactly when the two views share a center and differ by the
    sampling yaw step.
    """
    if view_a.pano_id is None or view_a.pano_id != view_b.pano_id:
        raise UsageError("pano residuals require two views of the same panorama")
    if view_b.slot_index != view_a.slot_index + 1:
        raise UsageError(
            f"pano residuals require consecutive slots, got {view_a.slot_index} and {view_b.slot_index}"
        )
    trans = view_b.center - view_a.center
    rel = view_b.rotation.matrix.T @ view_a.rotation.matrix
    rot = (rel - slot_relative_rotation(num_slots)).reshape(9)
    return trans, rot


def pano_jacobians(view_a: ViewPose, view_b: ViewPose):
    """Analytic Jacobians of pano_residuals wrt the two pose tangents.

    Returns (Jt_a, Jt_b, Jr_a, Jr_b) with Jt (3,6) and Jr (9,6).
    """
    rel = view_b.rotation.matrix.T @ view_a.rotation.matrix
    Jt_a = np.hstack([np.zeros((3, 3)), -np.eye(3)])
    Jt_b = np.hstack([np.zeros((3, 3)), np.eye(3)])
    Jr_a = np.zeros((9, 6))
    Jr_b = np.zeros((9, 6))
    for i in range(3):
        Jr_a[:, i] = (rel @ _GENERATORS[i]).reshape(9)
        Jr_b[:, i] = (-_GENERATORS[i] @ rel).reshape(9)
    return Jt_a, Jt_b, Jr_a, Jr_b


# ---------------------------------------------------------------------------
# evaluation


def _robust_weights(s: np.ndarray, delta: np.ndarray):
    """rho(s) and rho'(s) for the Huber loss on squared norms s."""
    rho = s.copy()
    dr = np.ones_like(s)
    mask = np.isfinite(delta) & (s > delta * delta)
    if np.any(mask):
        root = np.sqrt(s[mask])
        rho[mask] = 2.0 * delta[mask] * root - delta[mask] * delta[mask]
        dr[mask] = delta[mask] / root
    return rho, dr


def _evaluate(p: Problem, with_jac: bool, layout: Optional["_Layout"] = None):
    """Total cost, IRLS-scaled residual vector, and (optionally) sparse J."""
    r = p.reproj
    pa = p.pano
    n = len(r)
    k = len(pa)
    m_rows = 2 * n + 12 * k
    res = np.zeros(m_rows)
    cost = 0.0
    trips = [] if with_jac else None

    Rg = p.group_rotations
    Cg = p.group_centers
    if n:
        vg = p.view_group[r.view_idx]
        Rv = np.einsum("nij,njk->nik", Rg[vg], p.view_slot_rot[r.view_idx])
        Cv = Cg[vg]
        pts = p.points[r.point_idx]
        params = np.array([it.as_params() for it in p.intrinsics])[r.intr_idx]
        fx, fy, px, py = params[:, 0], params[:, 1], params[:, 2], params[:, 3]
        k1, k2, p1, p2 = params[:, 4], params[:, 5], params[:, 6], params[:, 7]
        q = np.einsum("nji,nj->ni", Rv, pts - Cv)
        z = q[:, 2]
        valid = z > _MIN_DEPTH
        zs = np.where(valid, z, 1.0)
        x = q[:, 0] / zs
        y = q[:, 1] / zs
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        raw = np.stack([fx * xd + px, fy * yd + py], axis=1) - r.pixels
        valid &= np.isfinite(raw).all(axis=1)
        raw[~valid] = 0.0
        s = (raw * raw).sum(axis=1)
        rho, dr = _robust_weights(s, r.huber_delta)
        cost += 0.5 * float((r.weights * rho * valid).sum())
        scale = np.sqrt(r.weights * dr) * valid
        res[: 2 * n] = (raw * scale[:, None]).reshape(-1)
        if with_jac:
            A = np.zeros((n, 2, 3))
            A[:, 0, 0] = 1.0 / zs
            A[:, 1, 1] = 1.0 / zs
            A[:, 0, 2] = -x / zs
            A[:, 1, 2] = -y / zs
            ddr = k1 + 2.0 * k2 * r2
            D = np.empty((n, 2, 2))
            D[:, 0, 0] = radial + 2.0 * x * x * ddr + 2.0 * p1 * y + 6.0 * p2 * x
            D[:, 0, 1] = 2.0 * x * y * ddr + 2.0 * p1 * x + 2.0 * p2 * y
            D[:, 1, 0] = D[:, 0, 1]
            D[:, 1, 1] = radial + 2.0 * y * y * ddr + 6.0 * p1 * y + 2.0 * p2 * x
            D[:, 0, :] *= fx[:, None]
            D[:, 1, :] *= fy[:, None]
            B = np.einsum("nij,njk->nik", D, A)  # pixel wrt camera point q
            sq = np.zeros((n, 3, 3))
            sq[:, 0, 1] = -q[:, 2]
            sq[:, 0, 2] = q[:, 1]
            sq[:, 1, 0] = q[:, 2]
            sq[:, 1, 2] = -q[:, 0]
            sq[:, 2, 0] = -q[:, 1]
            sq[:, 2, 1] = q[:, 0]
            J_rot_v = np.einsum("nij,njk->nik", B, sq)
            J_rot = np.einsum("nij,nkj->nik", J_rot_v, p.view_slot_rot[r.view_idx])
            BRt = np.einsum("nij,nkj->nik", B, Rv)  # B @ R^T
            J_pose = np.concatenate([J_rot, -BRt], axis=2) * scale[:, None, None]
            J_pt = BRt * scale[:, None, None]
            J_intr = np.zeros((n, 2, 8))
            J_intr[:, 0, 0] = xd
            J_intr[:, 1, 1] = yd
            J_intr[:, 0, 2] = 1.0
            J_intr[:, 1, 3] = 1.0
            J_intr[:, 0, 4] = fx * x * r2
            J_intr[:, 1, 4] = fy * y * r2
            J_intr[:, 0, 5] = fx * x * r2 * r2
            J_intr[:, 1, 5] = fy * y * r2 * r2
            J_intr[:, 0, 6] = fx * 2.0 * x * y
            J_intr[:, 1, 6] = fy * (r2 + 2.0 * y * y)
            J_intr[:, 0, 7] = fx * (r2 + 2.0 * x * x)
            J_intr[:, 1, 7] = fy * 2.0 * x * y
            J_intr *= scale[:, None, None]
            rows2 = (2 * np.arange(n))[:, None, None] + np.array([0, 1])[None, :, None]
            _push(trips, rows2, layout.pose_cols[vg][:, None, :], J_pose)
            _push(trips, rows2, layout.intr_cols[r.intr_idx][:, None, :], J_intr)
            if p.points_free:
                ptc = layout.point_base + 3 * r.point_idx[:, None, None] + np.arange(3)[None, None, :]
                _push(trips, rows2, np.broadcast_to(ptc, (n, 1, 3)), J_pt)

    if k:
        ga = p.view_group[pa.view_a]
        gb = p.view_group[pa.view_b]
        Ra = np.einsum("nij,njk->nik", Rg[ga], p.view_slot_rot[pa.view_a])
        Rb = np.einsum("nij,njk->nik", Rg[gb], p.view_slot_rot[pa.view_b])
        w = np.sqrt(pa.weights)
        rt = (Cg[gb] - Cg[ga]) * w[:, None]
        rel = np.einsum("nji,njk->nik", Rb, Ra)
        rr = (rel - pa.targets).reshape(k, 9) * w[:, None]
        base_t = 2 * n
        base_r = 2 * n + 3 * k
        res[base_t : base_t + 3 * k] = rt.reshape(-1)
        res[base_r:] = rr.reshape(-1)
        cost += 0.5 * float((rt * rt).sum() + (rr * rr).sum())
        if with_jac:
            rows_t = (base_t + 3 * np.arange(k))[:, None, None] + np.arange(3)[None, :, None]
            eye = np.broadcast_to(np.eye(3), (k, 3, 3))
            cen_a = layout.pose_cols[ga][:, None, 3:6]
            cen_b = layout.pose_cols[gb][:, None, 3:6]
            _push(trips, rows_t, cen_a, -eye * w[:, None, None])
            _push(trips, rows_t, cen_b, eye * w[:, None, None])
            JA = np.einsum("nab,ibc->naci", rel, _GENERATORS).reshape(k, 9, 3)
            JB = -np.einsum("iab,nbc->naci", _GENERATORS, rel).reshape(k, 9, 3)
            JA = np.einsum("nij,nkj->nik", JA, p.view_slot_rot[pa.view_a]) * w[:, None, None]
            JB = np.einsum("nij,nkj->nik", JB, p.view_slot_rot[pa.view_b]) * w[:, None, None]
            rows_r = (base_r + 9 * np.arange(k))[:, None, None] + np.arange(9)[None, :, None]
            _push(trips, rows_r, layout.pose_cols[ga][:, None, :3], JA)
            _push(trips, rows_r, layout.pose_cols[gb][:, None, :3], JB)

    if not with_jac:
        return cost, res, None
    if trips:
        rows = np.concatenate([t[0] for t in trips])
        cols = np.concatenate([t[1] for t in trips])
        vals = np.concatenate([t[2] for t in trips])
        J = sp.coo_matrix((vals, (rows, cols)), shape=(m_rows, layout.ncols)).tocsr()
    else:
        J = sp.csr_matrix((m_rows, layout.ncols))
    return cost, res, J


def _push(trips, rows, cols, vals):
    rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
    keep = cols >= 0
    trips.append((rows[keep].ravel(), cols[keep].ravel(), vals[keep].ravel()))


@dataclass
class _Layout:
    pose_cols: np.ndarray  # (G, 6) int, -1 frozen
    intr_cols: np.ndarray  # (M, 8) int
    point_base: int
    ncam: int
    ncols: int
    descriptions: list


def _build_layout(p: Problem) -> _Layout:
    g, m = p.pose_free.shape[0], len(p.intrinsics)
    pose_cols = -np.ones((g, 6), dtype=int)
    desc = []
    slot_names = ["rot_x", "rot_y", "rot_z", "center_x", "center_y", "center_z"]
    intr_names = ["fx", "fy", "px", "py", "k1", "k2", "p1", "p2"]
    col = 0
    for i in range(g):
        for j in range(6):
            if p.pose_free[i, j]:
                pose_cols[i, j] = col
                desc.append(f"pose group {i} {slot_names[j]}")
                col += 1
    intr_cols = -np.ones((m, 8), dtype=int)
    for i in range(m):
        for j in range(8):
            if p.intr_free[i, j]:
                intr_cols[i, j] = col
                desc.append(f"intrinsics {i} {intr_names[j]}")
                col += 1
    ncam = col
    npt = 3 * p.points.shape[0] if p.points_free else 0
    return _Layout(pose_cols, intr_cols, ncam, ncam, ncam + npt, desc)


def _apply_step(p: Problem, layout: _Layout, delta: np.ndarray) -> Problem:
    out = p.copy_values()
    for g in range(p.pose_free.shape[0]):
        cols = layout.pose_cols[g]
        if (cols[:3] >= 0).any():
            dr = np.where(cols[:3] >= 0, delta[np.maximum(cols[:3], 0)], 0.0)
            out.group_rotations[g] = out.group_rotations[g] @ Rotation.exp(dr).matrix
        if (cols[3:] >= 0).any():
            dc = np.where(cols[3:] >= 0, delta[np.maximum(cols[3:], 0)], 0.0)
            out.group_centers[g] = out.group_centers[g] + dc
    for i in range(len(p.intrinsics)):
        cols = layout.intr_cols[i]
        if (cols >= 0).any():
            params = out.intrinsics[i].as_params()
            params += np.where(cols >= 0, delta[np.maximum(cols, 0)], 0.0)
            out.intrinsics[i] = out.intrinsics[i].with_params(params)
    if p.points_free and p.points.shape[0]:
        out.points = out.points + delta[layout.ncam :].reshape(-1, 3)
    return out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt driver


@dataclass
class LMOptions:
    max_iter: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    gradient_tol: float = 1e-10
    param_tol: float = 1e-12
    max_lambda: float = 1e14


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str  # converged | max_iter | trust_region_collapse
    cost_trace: list = field(default_factory=list)


def _solve_damped(H, g, lam, layout: _Layout, points_free: bool, npts: int):
    """One damped normal-equations solve; Schur-eliminates point blocks."""
    diag = H.diagonal()
    nc = layout.ncam
    if not points_free or npts == 0:
        U = H.toarray()
        U[np.diag_indices_from(U)] += lam * diag
        c = cho_factor(U)
        return cho_solve(c, -g)
    Hc = H.tocsr()
    U = Hc[:nc, :nc].toarray()
    U[np.diag_indices_from(U)] += lam * diag[:nc]
    W = Hc[:nc, nc:].tocsr()
    Hpp = Hc[nc:, nc:].tocoo()
    V = np.zeros((npts, 3, 3))
    np.add.at(V, (Hpp.row // 3, Hpp.row % 3, Hpp.col % 3), Hpp.data)
    idx = np.arange(npts)
    V[:, [0, 1, 2], [0, 1, 2]] += lam * diag[nc:].reshape(-1, 3)
    # points whose observations were all invalidated this iteration (behind a
    # camera) have a numerically empty block; hold them in place
    g = g.copy()
    dead = V[:, [0, 1, 2], [0, 1, 2]].sum(axis=1) < 1e-14
    if np.any(dead):
        V[dead] = np.eye(3)
        gp = g[nc:].reshape(-1, 3)
        gp[dead] = 0.0
    Vinv = np.linalg.inv(V)
    Vb = sp.bsr_matrix((Vinv, idx, np.arange(npts + 1)), shape=(3 * npts, 3 * npts))
    S = U - (W @ Vb @ W.T).toarray()
    rhs = -g[:nc] + W @ (Vb @ g[nc:])
    c = cho_factor(S)
    dc = cho_solve(c, rhs)
    dp = -Vb @ (g[nc:] + W.T @ dc)
    return np.concatenate([dc, dp])


def solve_lm(problem: Problem, options: Optional[LMOptions] = None):
    """Minimize the problem cost with damped Gauss-Newton steps.

    Accepted steps strictly decrease the robust cost; damping is multiplicative
    on the normal-equation diagonal (Marquardt scaling), which keeps the solve
    equivariant under metric rescaling of the scene. Returns a new Problem
    with updated parameter values plus a SolveReport; the input is unchanged.
    """
    opts = options or LMOptions()
    problem.validate()
    layout = _build_layout(problem)
    state = problem.copy_values()
    npts = state.points.shape[0]
    cost, res, J = _evaluate(state, with_jac=True, layout=layout)
    trace = [cost]
    report = SolveReport(0, cost, cost, "max_iter", trace)
    if layout.ncols == 0:
        report.termination = "converged"
        return state, report
    g = J.T @ res
    H = (J.T @ J).tocsr()
    if _check_gradient(g, opts):
        report.termination = "converged"
        return state, report
    lam = opts.initial_lambda
    it = 0
    while it < opts.max_iter:
        it += 1
        report.iterations = it
        try:
            delta = _solve_damped(H, g, lam, layout, state.points_free, npts)
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            lam *= opts.lambda_up
            if lam > opts.max_lambda:
                bad = _suspect_column(H, layout)
                raise NumericalError(f"singular reduced system (rank-deficient block: {bad})")
            continue
        candidate = _apply_step(state, layout, delta)
        new_cost = candidate.total_cost()
        if np.isfinite(new_cost) and new_cost < cost:
            state = candidate
            cost = new_cost
            trace.append(cost)
            lam = max(lam * opts.lambda_down, 1e-18)
            if float(np.linalg.norm(delta)) < opts.param_tol:
                report.termination = "converged"
                break
            _, res, J = _evaluate(state, with_jac=True, layout=layout)
            g = J.T @ res
            H = (J.T @ J).tocsr()
            if _check_gradient(g, opts):
                report.termination = "converged"
                break
        else:
            if float(np.linalg.norm(delta)) < opts.param_tol:
                report.termination = "converged"
                break
            lam *= opts.lambda_up
            if lam > opts.max_lambda:
                report.termination = "trust_region_collapse"
                break
    report.final_cost = cost
    return state, report


def _check_gradient(g: np.ndarray, opts: LMOptions) -> bool:
    return float(np.max(np.abs(g), initial=0.0)) < opts.gradient_tol


def _suspect_column(H, layout: _Layout) -> str:
    diag = H.diagonal()
    bad = np.nonzero(~np.isfinite(diag) | (diag <= 0.0))[0]
    if bad.size:
        i = int(bad[0])
        if i < len(layout.descriptions):
            return layout.descriptions[i]
        return f"point parameter {i - layout.ncam}"
    return "unknown"


# ---------------------------------------------------------------------------
# bundle-adjustment problem construction


@dataclass
class BAConfig:
    pano_weight: float = 1e4
    fix_intrinsics: bool = True
    robust_delta: float = 2.0
    pano_mode: str = "soft"  # soft | hard
    pano_constraint: bool = True
    fix_points: bool = False
    fix_gauge: bool = True


def build_ba_problem(recon, config: Optional[BAConfig] = None) -> Problem:
    """Bundle-adjustment problem over a reconstruction's registered views.

    One Huber reprojection block per observation of a triangulated track, one
    pano translation+rotation pair per consecutive registered slot pair when
    the constraint is on (weight pano_weight), intrinsics frozen when
    fix_intrinsics. Gauge: the first view's pose group is frozen and, while
    the reconstruction is still up-to-scale, one additional center coordinate.
    """
    cfg = config or BAConfig()
    view_ids = sorted(
        (vid for vid, rec in recon.views.items() if rec.registered), key=recon.view_order_key
    )
    if len(view_ids) < 2:
        raise ValidationError(f"bundle adjustment needs >= 2 registered views, got {len(view_ids)}")
    vindex = {vid: i for i, vid in enumerate(view_ids)}
    poses = [recon.views[vid].pose for vid in view_ids]
    intr_ids = sorted(recon.intrinsics)
    iindex = {iid: i for i, iid in enumerate(intr_ids)}

    point_ids = []
    obs_v, obs_p, obs_i, obs_px = [], [], [], []
    for pid in sorted(recon.points):
        track = recon.tracks[pid]
        rows = [(vid, px) for vid, px in track.observations if vid in vindex]
        if len(rows) < 2:
            continue
        pi = len(point_ids)
        point_ids.append(pid)
        for vid, px in rows:
            obs_v.append(vindex[vid])
            obs_p.append(pi)
            obs_i.append(iindex[recon.views[vid].intrinsics_id])
            obs_px.append(px)
    if not point_ids:
        raise ValidationError("reconstruction has no triangulated tracks to adjust")
    points = np.array([recon.points[pid] for pid in point_ids])

    num_slots = recon.num_slots
    if cfg.pano_mode == "hard":
        problem = _hard_mode_problem(recon, view_ids, poses, num_slots)
    elif cfg.pano_mode == "soft":
        problem = Problem.from_views(poses, points, [recon.intrinsics[i] for i in intr_ids])
    else:
        raise ValidationError(f"unknown pano mode {cfg.pano_mode!r}")
    problem.points = points
    problem.intrinsics = [recon.intrinsics[i] for i in intr_ids]
    problem.intr_free = np.zeros((len(intr_ids), 8), dtype=bool) if cfg.fix_intrinsics else np.ones(
        (len(intr_ids), 8), dtype=bool
    )
    problem.points_free = not cfg.fix_points
    problem.view_ids = view_ids
    problem.point_ids = point_ids
    problem.set_observations(obs_v, obs_p, obs_i, obs_px, huber_delta=cfg.robust_delta)

    if cfg.pano_constraint and cfg.pano_mode == "soft":
        pair_a, pair_b = [], []
        by_pano = {}
        for i, vid in enumerate(view_ids):
            pose = poses[i]
            if pose.pano_id is not None:
                by_pano.setdefault(pose.pano_id, {})[pose.slot_index] = i
        for pano in sorted(by_pano):
            slots = by_pano[pano]
            for j in sorted(slots):
                if j - 1 in slots:
                    pair_a.append(slots[j - 1])
                    pair_b.append(slots[j])
        problem.set_pano_pairs(pair_a, pair_b, num_slots, cfg.pano_weight)

    if cfg.fix_gauge:
        _freeze_gauge(problem, metric=recon.scale_state == "metric")
    _freeze_untouched_views(problem)
    return problem


def _hard_mode_problem(recon, view_ids, poses, num_slots: int) -> Problem:
    """Group all views of a panorama into one pose parameter block."""
    step = slot_relative_rotation(num_slots)
    fmaps = [np.eye(3)]
    for _ in range(1, num_slots):
        fmaps.append(fmaps[-1] @ step.T)  # F_j = R_0^T R_j
    group_of = {}
    group_rot, group_cen = [], []
    view_group = np.zeros(len(view_ids), dtype=int)
    view_slot = np.zeros((len(view_ids), 3, 3))
    centers_by_group = {}
    for i, pose in enumerate(poses):
        key = pose.pano_id if pose.pano_id is not None else f"#view{i}"
        slot = pose.slot_index or 0
        F = fmaps[slot] if pose.pano_id is not None else np.eye(3)
        if key not in group_of:
            group_of[key] = len(group_rot)
            group_rot.append(pose.rotation.matrix @ F.T)
            group_cen.append(pose.center.copy())
            centers_by_group[group_of[key]] = [pose.center]
        else:
            centers_by_group[group_of[key]].append(pose.center)
        view_group[i] = group_of[key]
        view_slot[i] = F
    for g, centers in centers_by_group.items():
        group_cen[g] = np.mean(centers, axis=0)
    return Problem(
        group_rotations=np.array(group_rot),
        group_centers=np.array(group_cen),
        points=np.zeros((0, 3)),
        intrinsics=[],
        view_group=view_group,
        view_slot_rot=view_slot,
        view_meta=[(p.pano_id, p.slot_index) for p in poses],
        pose_free=np.ones((len(group_rot), 6), dtype=bool),
        intr_free=np.zeros((0, 8), dtype=bool),
        points_free=True,
        reproj=ReprojectionBlocks.empty(),
        pano=PanoramaBlocks.empty(),
    )


def _freeze_untouched_views(problem: Problem):
    """Freeze pose groups no residual block reaches (e.g. a registered view
    whose every track was pruned); they keep their current pose."""
    ng = problem.pose_free.shape[0]
    touched = np.zeros(ng, dtype=bool)
    touched[problem.view_group[problem.reproj.view_idx]] = True
    touched[problem.view_group[problem.pano.view_a]] = True
    touched[problem.view_group[problem.pano.view_b]] = True
    problem.pose_free = problem.pose_free.copy()
    problem.pose_free[~touched] = False


def _freeze_gauge(problem: Problem, metric: bool):
    first = problem.view_group[0]
    problem.pose_free = problem.pose_free.copy()
    problem.pose_free[first, :] = False
    if metric:
        return
    # one extra center coordinate pins the scale; pick the group farthest from
    # the first along some axis (same-panorama views share a center and cannot)
    deltas = np.abs(problem.group_centers - problem.group_centers[first])
    deltas[first] = 0.0
    g, axis = np.unravel_index(int(np.argmax(deltas)), deltas.shape)
    if deltas[g, axis] > 0.0:
        problem.pose_free[g, 3 + axis] = False
