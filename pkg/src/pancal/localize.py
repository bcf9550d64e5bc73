"""Localize an uncalibrated query camera against a reconstruction.

Image retrieval is out of scope: query-to-database 2D-2D matches arrive from
files, are lifted to 2D-3D through the reconstruction's tracks, and the pose
plus focal length are found by P3P RANSAC over a deterministic FOV grid.
Refinement then frees the full intrinsics (focal lengths, principal point,
Brown-Conrady distortion) on the inlier set.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import optim
from .errors import LocalizationFailedError, LocalizationImpossibleError, ValidationError
from .geometry import CameraIntrinsics, ViewPose, project_points
from .sfm import Reconstruction, register_view_p3p


@dataclass
class QueryMatches:
    """Query pixels resolved to triangulated 3D points."""

    query_pixels: np.ndarray  # (N, 2)
    point_ids: list
    points: np.ndarray  # (N, 3)

    def __len__(self):
        return self.query_pixels.shape[0]


@dataclass
class FocalCandidate:
    fov_deg: float
    focal_px: float
    inliers: int
    rms_px: float


@dataclass
class LocalizationResult:
    intrinsics: CameraIntrinsics
    pose: ViewPose
    inlier_count: int
    rms_px: float
    focal_trace: list = field(default_factory=list)
    refinement_diverged: bool = False
    frame: str = "arbitrary"


@dataclass
class LocalizeOptions:
    fov_min_deg: float = 25.0
    fov_max_deg: float = 120.0
    fov_step_deg: float = 5.0
    ransac_threshold_px: float = 3.0
    confidence: float = 0.9999
    # per-candidate RANSAC cap: wrong-focal candidates never converge, so the
    # adaptive bound would otherwise burn the full budget on each of them
    grid_max_iter: int = 500
    min_inliers: int = 12
    seed: int = 0
    threads: int = 1
    estimate_distortion: bool = True
    estimate_pp: bool = True
    huber_delta: float = 2.0
    refine_max_iter: int = 100


def lift_matches(recon: Reconstruction, raw, snap_radius_px: float = 2.0) -> QueryMatches:
    """Resolve raw (query_pixel, db_view_id, db_pixel) rows to 3D points.

    Each db pixel snaps to the nearest observation of a triangulated track in
    that view within snap_radius_px; unmatched rows are dropped; rows voting
    for the same point are merged (median query pixel). Raises
    LocalizationImpossibleError when nothing resolves.
    """
    per_view: dict = {}
    for pid, track in recon.tracks.items():
        if pid not in recon.points:
            continue
        for vid, px in track.observations:
            per_view.setdefault(vid, ([], []))
            per_view[vid][0].append(px)
            per_view[vid][1].append(pid)
    trees = {}
    for vid, (pix, pids) in per_view.items():
        trees[vid] = (cKDTree(np.array(pix)), pids)
    votes: dict = {}
    order: list = []
    for q_px, vid, db_px in raw:
        if vid not in trees:
            continue
        tree, pids = trees[vid]
        dist, idx = tree.query(np.asarray(db_px, dtype=float), k=1)
        if dist > snap_radius_px:
            continue
        pid = pids[int(idx)]
        if pid not in votes:
            votes[pid] = []
            order.append(pid)
        votes[pid].append(np.asarray(q_px, dtype=float))
    if not order:
        raise LocalizationImpossibleError("no query match resolved to a triangulated track")
    qpix = np.array([np.median(np.array(votes[pid]), axis=0) for pid in order])
    pts = np.array([recon.points[pid] for pid in order])
    return QueryMatches(qpix, order, pts)


def localize_query(
    matches: QueryMatches,
    image_size,
    options: Optional[LocalizeOptions] = None,
    scale_state: str = "arbitrary",
) -> LocalizationResult:
    """Pose and intrinsics of the query from resolved 2D-3D correspondences.

    A deterministic FOV grid provides focal candidates (principal point at
    the image center, zero distortion); each runs P3P RANSAC and the winner
    by (inliers, lower RMS) is refined with the full intrinsics free. Raises
    LocalizationFailedError (carrying the search trace) when no candidate
    reaches min_inliers.
    """
    opts = options or LocalizeOptions()
    if len(matches) < opts.min_inliers:
        raise ValidationError(
            f"localization needs >= {opts.min_inliers} resolved correspondences, got {len(matches)}"
        )
    width, height = int(image_size[0]), int(image_size[1])
    fovs = []
    fov = opts.fov_min_deg
    while fov <= opts.fov_max_deg + 1e-9:
        fovs.append(round(fov, 9))
        fov += opts.fov_step_deg

    def try_candidate(i_fov):
        i, fov_deg = i_fov
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        intr = CameraIntrinsics(f, f, width / 2.0, height / 2.0, width=width, height=height)
        try:
            pose, mask = register_view_p3p(
                matches.points,
                matches.query_pixels,
                intr,
                threshold_px=opts.ransac_threshold_px,
                confidence=opts.confidence,
                max_iter=opts.grid_max_iter,
                seed=opts.seed + 101 * i,
                min_inliers=opts.min_inliers,
            )
        except LocalizationFailedError:
            return FocalCandidate(fov_deg, f, 0, math.inf), None, None
        rms = _rms_error(intr, pose, matches, mask)
        return FocalCandidate(fov_deg, f, int(mask.sum()), rms), pose, mask

    items = list(enumerate(fovs))
    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(try_candidate, items))
    else:
        results = [try_candidate(it) for it in items]

    trace = [r[0] for r in results]
    best = None
    for cand, pose, mask in results:
        if pose is None:
            continue
        key = (-cand.inliers, cand.rms_px)
        if best is None or key < best[0]:
            best = (key, cand, pose, mask)
    if best is None or best[1].inliers < opts.min_inliers:
        raise LocalizationFailedError("no focal candidate reached the inlier minimum", trace=trace)
    _, cand, pose, mask = best
    intr = CameraIntrinsics(
        cand.focal_px, cand.focal_px, width / 2.0, height / 2.0, width=width, height=height
    )
    initial = LocalizationResult(
        intrinsics=intr,
        pose=pose,
        inlier_count=cand.inliers,
        rms_px=cand.rms_px,
        focal_trace=trace,
        frame="metric" if scale_state == "metric" else "arbitrary",
    )
    return refine_query(initial, matches, opts)


def refine_query(
    initial: LocalizationResult, matches: QueryMatches, options: Optional[LocalizeOptions] = None
) -> LocalizationResult:
    """LM refinement of the query pose and intrinsics on inlier residuals.

    3D points stay fixed (a single query must not bend the map); inliers are
    re-evaluated once after convergence and the refinement repeated. If the
    refined model is worse than the start, the initial estimate is kept and
    the result flagged.
    """
    opts = options or LocalizeOptions()
    intr, pose = initial.intrinsics, initial.pose
    mask0 = _inlier_mask(intr, pose, matches, opts.ransac_threshold_px)
    if int(mask0.sum()) < opts.min_inliers:
        return replace(initial, refinement_diverged=True)
    start_rms = _rms_error(intr, pose, matches, mask0)
    mask = mask0
    for _ in range(2):  # refine, re-evaluate inliers once, refine again
        intr2, pose2 = _refine_once(intr, pose, matches, mask, opts)
        try:
            intr2.validate()  # a non-invertible distortion estimate is unusable
        except ValidationError:
            return replace(initial, refinement_diverged=True)
        new_mask = _inlier_mask(intr2, pose2, matches, opts.ransac_threshold_px)
        if int(new_mask.sum()) < opts.min_inliers:
            break
        intr, pose, mask = intr2, pose2, new_mask
    # divergence guard on the starting inlier set, so the comparison is
    # apples-to-apples even after inliers were re-evaluated
    check_rms = _rms_error(intr, pose, matches, mask0)
    if not math.isfinite(check_rms) or check_rms > start_rms * (1.0 + 1e-9) + 1e-12:
        return replace(initial, refinement_diverged=True)
    return replace(
        initial,
        intrinsics=intr,
        pose=pose,
        inlier_count=int(mask.sum()),
        rms_px=_rms_error(intr, pose, matches, mask),
        refinement_diverged=False,
    )


def _refine_once(intr, pose, matches: QueryMatches, mask, opts: LocalizeOptions):
    pts = matches.points[mask]
    pix = matches.query_pixels[mask]
    problem = optim.Problem.from_views(
        [ViewPose(pose.rotation, pose.center)], pts, [intr], points_free=False
    )
    free = np.zeros((1, 8), dtype=bool)
    free[0, 0] = free[0, 1] = True
    if opts.estimate_pp:
        free[0, 2] = free[0, 3] = True
    if opts.estimate_distortion:
        free[0, 4:8] = True
    problem.intr_free = free
    n = pts.shape[0]
    problem.set_observations(
        np.zeros(n, dtype=int), np.arange(n), np.zeros(n, dtype=int), pix, huber_delta=opts.huber_delta
    )
    solved, _ = optim.solve_lm(problem, optim.LMOptions(max_iter=opts.refine_max_iter))
    out_pose = solved.view_pose(0)
    return solved.intrinsics[0], ViewPose(out_pose.rotation, out_pose.center)


def refine_query_joint(
    recon: Reconstruction,
    initial: LocalizationResult,
    matches: QueryMatches,
    options: Optional[LocalizeOptions] = None,
    pano_weight: float = 1e4,
):
    """Joint refinement: full BA with panoramic constraints over the database
    views plus the query, query intrinsics free, database intrinsics fixed.

    Returns (LocalizationResult, refined Reconstruction copy).
    """
    opts = options or LocalizeOptions()
    work = recon.apply_similarity(_identity_sim())
    work.intrinsics["query"] = initial.intrinsics
    from .sfm import ViewRecord

    work.add_view("query", ViewRecord(initial.pose, "query", registered=True))
    mask = _inlier_mask(initial.intrinsics, initial.pose, matches, opts.ransac_threshold_px)
    for i, (pid, use) in enumerate(zip(matches.point_ids, mask)):
        if use and pid in work.tracks:
            work.tracks[pid].observations.append(("query", matches.query_pixels[i].copy()))
    cfg = optim.BAConfig(pano_weight=pano_weight, fix_intrinsics=False, robust_delta=opts.huber_delta)
    problem = optim.build_ba_problem(work, cfg)
    intr_ids = sorted(work.intrinsics)
    problem.intr_free[:] = False
    qi = intr_ids.index("query")
    problem.intr_free[qi, 0] = problem.intr_free[qi, 1] = True
    if opts.estimate_pp:
        problem.intr_free[qi, 2] = problem.intr_free[qi, 3] = True
    if opts.estimate_distortion:
        problem.intr_free[qi, 4:8] = True
    solved, _ = optim.solve_lm(problem, optim.LMOptions(max_iter=opts.refine_max_iter))
    for vid, pose in zip(solved.view_ids, solved.view_poses()):
        old = work.views[vid].pose
        work.views[vid].pose = ViewPose(pose.rotation, pose.center, old.pano_id, old.slot_index)
    for pid, row in zip(solved.point_ids, solved.points):
        work.points[pid] = row
    for iid, it in zip(intr_ids, solved.intrinsics):
        work.intrinsics[iid] = it
    q_pose = work.views["query"].pose
    q_intr = work.intrinsics["query"]
    new_mask = _inlier_mask(q_intr, q_pose, matches, opts.ransac_threshold_px)
    result = replace(
        initial,
        intrinsics=q_intr,
        pose=ViewPose(q_pose.rotation, q_pose.center),
        inlier_count=int(new_mask.sum()),
        rms_px=_rms_error(q_intr, q_pose, matches, new_mask),
    )
    return result, work


def _identity_sim():
    from .geodesy import SimilarityTransform

    return SimilarityTransform.identity()


def _inlier_mask(intr, pose, matches: QueryMatches, threshold_px: float) -> np.ndarray:
    proj, z = project_points(intr, pose, matches.points)
    err = np.linalg.norm(proj - matches.query_pixels, axis=1)
    return (z > 0) & np.isfinite(err) & (err < threshold_px)


def _rms_error(intr, pose, matches: QueryMatches, mask) -> float:
    if not np.any(mask):
        return math.inf
    proj, z = project_points(intr, pose, matches.points[mask])
    err = np.linalg.norm(proj - matches.query_pixels[mask], axis=1)
    err = err[np.isfinite(err) & (z > 0)]
    return float(np.sqrt(np.mean(err * err))) if err.size else math.inf


def rank_database_views(raw) -> list:
    """Diagnostic helper: database views ranked by raw match count."""
    counts: dict = {}
    for _, vid, _ in raw:
        counts[vid] = counts.get(vid, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
