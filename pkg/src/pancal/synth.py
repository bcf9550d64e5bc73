"""Synthetic ground-truth scenes: the verification oracle for the pipeline.

A scene is a street intersection: two perpendicular streets, panoramas along
both, building facades and road-surface points, one elevated query camera,
measured marks on the road plane, and constant-speed vehicles. Everything is
deterministic in the scene seed; rendering noise uses its own seed, so the
ground-truth geometry is unchanged when only the noise seed changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GenerationError, ValidationError
from .geodesy import GeodeticCoord, enu_to_geodetic, estimate_similarity
from .geometry import (
    CameraIntrinsics,
    PanoramaMeta,
    Rotation,
    SamplingConfig,
    ViewPose,
    project_points,
    sample_perspective_views,
)
from .groundplane import PlaneModel, distance_error_stats
from .sfm import MatchPair, MatchSet, view_id_of
from .traffic import GroundTrack, SpeedTrap

QUERY_VIEW_ID = "query"


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    gps_sigma_m: float = 0.0
    # marks are manually measured, not matched features; their pixel error is
    # modeled separately and defaults to none
    mark_pixel_sigma: float = 0.0
    seed: int = 0


@dataclass
class QueryCameraSpec:
    width: int = 1600
    height: int = 1200
    fov_deg_range: tuple = (50.0, 70.0)
    height_range_m: tuple = (4.0, 10.0)
    k1_range: tuple = (-0.22, -0.08)
    k2_range: tuple = (0.01, 0.05)
    p1_range: tuple = (-0.002, 0.002)
    p2_range: tuple = (-0.002, 0.002)
    pp_offset_frac: float = 0.01
    roll_deg: float = 2.0


@dataclass
class VehicleSpec:
    count: int = 1
    speed_range_mps: tuple = (8.0, 20.0)
    sample_rate_hz: float = 5.0
    duration_s: float = 6.0


@dataclass
class SceneSpec:
    seed: int = 0
    num_panos: int = 10
    radius_m: float = 40.0
    num_points: int = 2000
    road_point_fraction: float = 0.35
    num_marks: int = 12
    street_half_width_m: float = 7.0
    plane_tilt_deg: float = 0.0
    plane_height_m: float = 0.0
    # matching density knobs consumed by render_matches; capping rows per
    # cross-panorama pair emulates the scarcity of wide-baseline matches
    pairs_per_view: int = 3
    min_pair_matches: int = 12
    max_cross_pair_rows: Optional[int] = None
    origin: GeodeticCoord = field(default_factory=lambda: GeodeticCoord(40.44, -79.95, 240.0))
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    query: QueryCameraSpec = field(default_factory=QueryCameraSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    vehicles: VehicleSpec = field(default_factory=VehicleSpec)

    def validate(self) -> "SceneSpec":
        if self.num_panos < 2:
            raise ValidationError(f"scene requires N >= 2 panoramas, got {self.num_panos}")
        if self.radius_m <= 5.0:
            raise ValidationError("scene radius must exceed 5 m")
        if self.num_points < 10:
            raise ValidationError("scene requires >= 10 points")
        self.sampling.validate()
        return self


@dataclass
class GroundTruthBundle:
    spec: SceneSpec
    panos: list  # PanoramaMeta with true geodetic tags
    pano_enu: dict  # pano_id -> true ENU center
    view_poses: dict  # view_id -> true ViewPose (ENU frame)
    db_intrinsics: CameraIntrinsics
    points: np.ndarray  # (P, 3)
    road_mark: np.ndarray  # (P,) bool
    plane: PlaneModel
    query_intrinsics: CameraIntrinsics
    query_pose: ViewPose
    marks: list  # (pixel_a, pixel_b, point_a, point_b, gt_distance_m)
    trap: SpeedTrap
    vehicle_tracks: list  # true GroundTrack list
    enu_origin: GeodeticCoord


@dataclass
class RenderedScene:
    matches: MatchSet
    query_matches: list  # (query_pixel, db_view_id, db_pixel)
    pano_tags: dict  # pano_id -> GeodeticCoord (noisy when gps_sigma_m > 0)
    road_labels: set  # (view_id, u, v) of road-point observations
    mark_pixels: list  # (pixel_a, pixel_b, gt_distance_m)
    image_tracks: list  # (track_id, timestamps, pixels)
    outlier_labels: dict  # (view_a, view_b) -> bool array (True = genuine match)
    query_outlier_labels: np.ndarray


def _look_at(center, target, roll_rad: float = 0.0) -> Rotation:
    fwd = np.asarray(target, dtype=float) - np.asarray(center, dtype=float)
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    right = np.array([1.0, 0.0, 0.0]) if nr < 1e-9 else right / nr
    down = np.cross(fwd, right)
    R = Rotation(np.column_stack([right, down, fwd]))
    if roll_rad:
        R = R @ Rotation.exp([0.0, 0.0, roll_rad])
    return R


def _plane_of(spec: SceneSpec) -> PlaneModel:
    tilt = math.radians(spec.plane_tilt_deg)
    normal = np.array([0.0, -math.sin(tilt), math.cos(tilt)])
    return PlaneModel.canonical(normal, -spec.plane_height_m * math.cos(tilt))


def _plane_z(plane: PlaneModel, x, y):
    n = plane.normal
    return (-plane.offset - n[0] * x - n[1] * y) / n[2]


def generate_scene(spec: SceneSpec) -> GroundTruthBundle:
    """Deterministic ground-truth scene for the given spec.

    Panoramas sit along the two streets inside the radius; every emitted 3D
    point is visible from at least two sampled views; the query camera is
    elevated at a corner and oriented toward the intersection.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    plane = _plane_of(spec)
    R = spec.radius_m
    hw = spec.street_half_width_m

    panos = []
    pano_enu = {}
    per_street = (spec.num_panos + 1) // 2
    for i in range(spec.num_panos):
        street = i % 2
        k = i // 2
        n_on_street = per_street if street == 0 else spec.num_panos - per_street
        span = 1.7 * R
        u = 0.0 if n_on_street <= 1 else -0.85 * R + span * k / (n_on_street - 1)
        u += rng.uniform(-1.5, 1.5)
        lateral = rng.uniform(1.5, hw - 2.5) * (1 if k % 2 == 0 else -1)
        if street == 0:
            center = np.array([u, lateral, 0.0])
            heading = 90.0 if lateral <= 0 else 270.0
        else:
            center = np.array([lateral, u, 0.0])
            heading = 0.0 if lateral > 0 else 180.0
        center[2] = _plane_z(plane, center[0], center[1]) + rng.uniform(2.2, 2.7)
        heading += rng.uniform(-8.0, 8.0)
        pano_id = f"pano_{i:03d}"
        geod = enu_to_geodetic(spec.origin, center)
        panos.append(PanoramaMeta(pano_id, geod, heading % 360.0, 8192, 4096))
        pano_enu[pano_id] = center

    view_poses = {}
    db_intr = spec.sampling.ideal_intrinsics()
    for pano in panos:
        for pose, _ in sample_perspective_views(pano, spec.sampling, center=pano_enu[pano.pano_id]):
            view_poses[view_id_of(pano.pano_id, pose.slot_index)] = pose

    # facade content extends past the panorama placement radius (a street
    # canyon does not end where the sampling area does), so outward-looking
    # slots still observe structure; road points stay central where the
    # cameras have parallax on them
    span = 1.6 * R
    n_road = int(round(spec.road_point_fraction * spec.num_points))
    n_facade = spec.num_points - n_road
    pool = int(1.5 * spec.num_points) + 50
    pts = []
    road_flags = []
    n_road_pool = int(round(spec.road_point_fraction * pool))
    for _ in range(n_road_pool):
        street = rng.integers(0, 2)
        u = rng.uniform(-0.9 * R, 0.9 * R)
        v = rng.uniform(-hw * 0.95, hw * 0.95)
        x, y = (u, v) if street == 0 else (v, u)
        pts.append([x, y, _plane_z(plane, x, y)])
        road_flags.append(True)
    setback = hw + rng.uniform(3.0, 6.0)
    for _ in range(pool - n_road_pool):
        side = rng.integers(0, 4)  # +y, -y, +x, -x building faces
        along = rng.uniform(-span, span)
        depth = (setback + rng.uniform(0.0, 0.5)) * (1 if side % 2 == 0 else -1)
        height = rng.uniform(0.3, 12.0)
        x, y = (along, depth) if side < 2 else (depth, along)
        pts.append([x, y, _plane_z(plane, x, y) + height])
        road_flags.append(False)
    pts = np.array(pts)
    road_flags = np.array(road_flags)

    # keep points observed by >= 2 sampled views
    vis_count = np.zeros(len(pts), dtype=int)
    for vid, pose in view_poses.items():
        _, ok = _visible_in(db_intr, pose, pts)
        vis_count += ok
    good = np.nonzero(vis_count >= 2)[0]
    road_good = good[road_flags[good]][:n_road]
    facade_good = good[~road_flags[good]][:n_facade]
    if road_good.size < n_road or facade_good.size < n_facade:
        raise GenerationError(
            f"scene spec infeasible: only {road_good.size}+{facade_good.size} covisible points"
        )
    keep = np.concatenate([road_good, facade_good])
    points = pts[keep]
    road_mark = road_flags[keep]

    q = spec.query
    corner = rng.integers(0, 4)
    ang = math.radians(45.0 + 90.0 * corner + rng.uniform(-10.0, 10.0))
    dist = rng.uniform(0.45 * R, 0.7 * R)
    qc = np.array([dist * math.cos(ang), dist * math.sin(ang), 0.0])
    qc[2] = _plane_z(plane, qc[0], qc[1]) + rng.uniform(*q.height_range_m)
    target = np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), 0.0])
    target[2] = _plane_z(plane, target[0], target[1])
    roll = math.radians(rng.uniform(-q.roll_deg, q.roll_deg))
    query_pose = ViewPose(_look_at(qc, target, roll), qc)
    fov = rng.uniform(*q.fov_deg_range)
    f0 = (q.width / 2.0) / math.tan(math.radians(fov) / 2.0)
    query_intr = CameraIntrinsics(
        fx=f0 * (1.0 + rng.uniform(-0.003, 0.003)),
        fy=f0 * (1.0 + rng.uniform(-0.003, 0.003)),
        px=q.width / 2.0 + rng.uniform(-q.pp_offset_frac, q.pp_offset_frac) * q.width,
        py=q.height / 2.0 + rng.uniform(-q.pp_offset_frac, q.pp_offset_frac) * q.height,
        k1=rng.uniform(*q.k1_range),
        k2=rng.uniform(*q.k2_range),
        p1=rng.uniform(*q.p1_range),
        p2=rng.uniform(*q.p2_range),
        width=q.width,
        height=q.height,
    ).validate()

    marks = _make_marks(spec, rng, plane, query_intr, query_pose)
    trap, tracks = _make_vehicles(spec, rng, plane)
    return GroundTruthBundle(
        spec=spec,
        panos=panos,
        pano_enu=pano_enu,
        view_poses=view_poses,
        db_intrinsics=db_intr,
        points=points,
        road_mark=road_mark,
        plane=plane,
        query_intrinsics=query_intr,
        query_pose=query_pose,
        marks=marks,
        trap=trap,
        vehicle_tracks=tracks,
        enu_origin=spec.origin,
    )


def _visible_in(intr: CameraIntrinsics, pose: ViewPose, pts: np.ndarray, min_depth=0.5):
    pix, z = project_points(intr, pose, pts)
    ok = (
        (z > min_depth)
        & np.isfinite(pix).all(axis=1)
        & (pix[:, 0] >= 0)
        & (pix[:, 0] < intr.width)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] < intr.height)
    )
    return pix, ok


def _make_marks(spec, rng, plane, query_intr, query_pose):
    marks = []
    attempts = 0
    hw = spec.street_half_width_m
    while len(marks) < spec.num_marks and attempts < 4000:
        attempts += 1
        street = rng.integers(0, 2)
        u = rng.uniform(-0.7 * spec.radius_m, 0.7 * spec.radius_m)
        v = rng.uniform(-hw * 0.9, hw * 0.9)
        x, y = (u, v) if street == 0 else (v, u)
        a = np.array([x, y, _plane_z(plane, x, y)])
        length = rng.uniform(2.0, 12.0)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        b2 = a[:2] + length * np.array([math.cos(theta), math.sin(theta)])
        b = np.array([b2[0], b2[1], _plane_z(plane, b2[0], b2[1])])
        pix, ok = _visible_in(query_intr, query_pose, np.vstack([a, b]), min_depth=1.0)
        if not ok.all():
            continue
        marks.append((pix[0], pix[1], a, b, float(np.linalg.norm(a - b))))
    if len(marks) < spec.num_marks:
        raise GenerationError("could not place the requested ground marks in the query view")
    return marks


def _make_vehicles(spec, rng, plane):
    hw = spec.street_half_width_m
    trap_x = rng.uniform(-4.0, 4.0)
    trap = SpeedTrap(
        np.array([trap_x, -hw * 0.9, _plane_z(plane, trap_x, -hw * 0.9)]),
        np.array([trap_x, hw * 0.9, _plane_z(plane, trap_x, hw * 0.9)]),
    )
    tracks = []
    for v in range(spec.vehicles.count):
        speed = rng.uniform(*spec.vehicles.speed_range_mps)
        lane = rng.uniform(-hw * 0.6, hw * 0.6)
        direction = 1 if v % 2 == 0 else -1
        x0 = -direction * 0.9 * spec.radius_m
        steps = int(spec.vehicles.duration_s * spec.vehicles.sample_rate_hz) + 1
        ts = np.arange(steps) / spec.vehicles.sample_rate_hz
        xs = x0 + direction * speed * ts
        keep = np.abs(xs) <= 0.95 * spec.radius_m
        xs, ts = xs[keep], ts[keep]
        if xs.size < 2:
            continue
        ys = np.full_like(xs, lane)
        zs = _plane_z(plane, xs, ys)
        tracks.append(GroundTrack(f"veh_{v:03d}", ts, np.column_stack([xs, ys, zs])))
    return trap, tracks


def render_matches(
    bundle: GroundTruthBundle,
    cfg: SamplingConfig,
    noise: Optional[NoiseSpec] = None,
    pairs_per_view: Optional[int] = None,
    min_pair_matches: Optional[int] = None,
    query_views_per_point: int = 2,
) -> RenderedScene:
    """Project the true scene into measurement files' in-memory form.

    Adds isotropic pixel noise, replaces an outlier fraction of match rows
    with uniform random pixels (genuine-match labels retained in the truth
    sidecar), and drops projections outside bounds or behind cameras. One
    noisy pixel is drawn per (view, point) observation, so every match row
    referencing that observation carries the same pixel, as a real feature
    detector would.
    """
    noise = noise or bundle.spec.noise
    if pairs_per_view is None:
        pairs_per_view = bundle.spec.pairs_per_view
    if min_pair_matches is None:
        min_pair_matches = bundle.spec.min_pair_matches
    rng = np.random.default_rng(noise.seed)
    intr = cfg.ideal_intrinsics()
    view_ids = []
    poses = {}
    for pano in bundle.panos:
        for pose, _ in sample_perspective_views(pano, cfg, center=bundle.pano_enu[pano.pano_id]):
            vid = view_id_of(pano.pano_id, pose.slot_index)
            view_ids.append(vid)
            poses[vid] = pose

    pts = bundle.points
    obs_pix = {}
    obs_ok = {}
    for vid in view_ids:
        pix, ok = _visible_in(intr, poses[vid], pts)
        if noise.pixel_sigma > 0:
            pix = pix + rng.normal(scale=noise.pixel_sigma, size=pix.shape)
            ok &= (
                (pix[:, 0] >= 0)
                & (pix[:, 0] < intr.width)
                & (pix[:, 1] >= 0)
                & (pix[:, 1] < intr.height)
            )
        obs_pix[vid] = pix
        obs_ok[vid] = ok

    vis = np.array([obs_ok[vid] for vid in view_ids])
    covis = vis.astype(np.int32) @ vis.astype(np.int32).T
    vix = {vid: i for i, vid in enumerate(view_ids)}
    pano_of = {vid: vid.rsplit("#", 1)[0] for vid in view_ids}

    wanted = set()
    for pano in bundle.panos:
        t = cfg.num_views
        for j in range(t):
            a = view_id_of(pano.pano_id, j)
            b = view_id_of(pano.pano_id, (j + 1) % t)
            wanted.add((a, b) if vix[a] < vix[b] else (b, a))
    pano_ids = sorted(bundle.pano_enu)
    for ia, pa in enumerate(pano_ids):
        for pb in pano_ids[ia + 1 :]:
            if np.linalg.norm(bundle.pano_enu[pa] - bundle.pano_enu[pb]) > 60.0:
                continue
            va = [v for v in view_ids if pano_of[v] == pa]
            vb = [v for v in view_ids if pano_of[v] == pb]
            for a in va:
                ranked = sorted(((covis[vix[a], vix[b]], b) for b in vb), key=lambda t: (-t[0], t[1]))
                for cnt, b in ranked[:pairs_per_view]:
                    if cnt >= min_pair_matches:
                        wanted.add((a, b) if vix[a] < vix[b] else (b, a))
            for b in vb:
                ranked = sorted(((covis[vix[a], vix[b]], a) for a in va), key=lambda t: (-t[0], t[1]))
                for cnt, a in ranked[:1]:
                    if cnt >= min_pair_matches:
                        wanted.add((a, b) if vix[a] < vix[b] else (b, a))

    cross_cap = bundle.spec.max_cross_pair_rows
    pairs = []
    outlier_labels = {}
    for a, b in sorted(wanted, key=lambda ab: (vix[ab[0]], vix[ab[1]])):
        both = np.nonzero(obs_ok[a] & obs_ok[b])[0]
        if both.size == 0 or (both.size < min_pair_matches and pano_of[a] != pano_of[b]):
            continue
        if cross_cap and pano_of[a] != pano_of[b] and both.size > cross_cap:
            both = both[np.sort(rng.choice(both.size, size=cross_cap, replace=False))]
        pxa = obs_pix[a][both].copy()
        pxb = obs_pix[b][both].copy()
        genuine = np.ones(both.size, dtype=bool)
        if noise.outlier_fraction > 0:
            n_out = int(round(noise.outlier_fraction * both.size))
            if n_out:
                idx = rng.choice(both.size, size=n_out, replace=False)
                pxb[idx] = rng.uniform([0, 0], [intr.width, intr.height], size=(n_out, 2))
                genuine[idx] = False
        pairs.append(MatchPair(a, b, pxa, pxb))
        outlier_labels[(a, b)] = genuine

    road_labels = set()
    road_idx = np.nonzero(bundle.road_mark)[0]
    road_set = set(int(i) for i in road_idx)
    for vid in view_ids:
        ok = obs_ok[vid]
        for p in np.nonzero(ok)[0]:
            if int(p) in road_set:
                px = obs_pix[vid][p]
                road_labels.add((vid, float(px[0]), float(px[1])))

    qpix, qok = _visible_in(bundle.query_intrinsics, bundle.query_pose, pts, min_depth=1.0)
    if noise.pixel_sigma > 0:
        qpix = qpix + rng.normal(scale=noise.pixel_sigma, size=qpix.shape)
        qok &= (
            (qpix[:, 0] >= 0)
            & (qpix[:, 0] < bundle.query_intrinsics.width)
            & (qpix[:, 1] >= 0)
            & (qpix[:, 1] < bundle.query_intrinsics.height)
        )
    query_matches = []
    q_labels = []
    for p in np.nonzero(qok)[0]:
        seen = [vid for vid in view_ids if obs_ok[vid][p]]
        for vid in seen[:query_views_per_point]:
            query_matches.append((qpix[p].copy(), vid, obs_pix[vid][p].copy()))
            q_labels.append(True)
    if noise.outlier_fraction > 0 and query_matches:
        n_out = int(round(noise.outlier_fraction * len(query_matches)))
        if n_out:
            idx = rng.choice(len(query_matches), size=n_out, replace=False)
            for i in idx:
                qp, vid, _ = query_matches[i]
                bad = rng.uniform([0, 0], [intr.width, intr.height])
                query_matches[i] = (qp, vid, bad)
                q_labels[i] = False

    pano_tags = {}
    for pano in bundle.panos:
        true_enu = bundle.pano_enu[pano.pano_id]
        tag_enu = true_enu
        if noise.gps_sigma_m > 0:
            tag_enu = true_enu + rng.normal(scale=noise.gps_sigma_m, size=3)
        pano_tags[pano.pano_id] = enu_to_geodetic(bundle.enu_origin, tag_enu)

    mark_pixels = []
    for pa, pb, _, _, d in bundle.marks:
        if noise.mark_pixel_sigma > 0:
            pa = pa + rng.normal(scale=noise.mark_pixel_sigma, size=2)
            pb = pb + rng.normal(scale=noise.mark_pixel_sigma, size=2)
        mark_pixels.append((pa, pb, d))

    image_tracks = []
    for track in bundle.vehicle_tracks:
        pix, ok = _visible_in(bundle.query_intrinsics, bundle.query_pose, track.positions, 1.0)
        if noise.pixel_sigma > 0:
            pix = pix + rng.normal(scale=noise.pixel_sigma, size=pix.shape)
        keep = np.nonzero(ok)[0]
        if keep.size >= 2:
            image_tracks.append((track.track_id, track.timestamps[keep], pix[keep]))

    return RenderedScene(
        matches=MatchSet(pairs),
        query_matches=query_matches,
        pano_tags=pano_tags,
        road_labels=road_labels,
        mark_pixels=mark_pixels,
        image_tracks=image_tracks,
        outlier_labels=outlier_labels,
        query_outlier_labels=np.array(q_labels, dtype=bool),
    )


# ---------------------------------------------------------------------------
# evaluation against ground truth


@dataclass
class ReconstructionErrors:
    aligned: bool
    rotation_err_deg: np.ndarray
    center_err_m: np.ndarray
    mean_rotation_err_deg: float
    mean_center_err_m: float
    rms_reprojection_px: float


@dataclass
class CalibrationErrors:
    focal_pct: dict
    principal_point_pct: dict
    distortion_pct: dict
    rotation_err_deg: float
    center_err_m: float

    def focal_mean_pct(self) -> float:
        return float(np.mean(list(self.focal_pct.values())))

    def pp_mean_pct(self) -> float:
        return float(np.mean(list(self.principal_point_pct.values())))

    def distortion_mean_pct(self) -> float:
        return float(np.mean(list(self.distortion_pct.values())))


def evaluate_reconstruction(recon, bundle: GroundTruthBundle) -> ReconstructionErrors:
    """Pose errors of registered views vs truth, gauge-aligned when needed.

    Up-to-scale reconstructions are first aligned to the true view centers by
    a similarity fit, so the reported errors are invariant to the arbitrary
    gauge choice. Metric reconstructions are compared directly in ENU.
    """
    vids = [v for v in recon.registered_view_ids() if v in bundle.view_poses]
    if len(vids) < 3:
        raise ValidationError("too few registered views overlap the ground truth")
    est = np.array([recon.views[v].pose.center for v in vids])
    true = np.array([bundle.view_poses[v].center for v in vids])
    true_rot = [bundle.view_poses[v].rotation for v in vids]
    if recon.scale_state == "metric" and recon.enu_origin is not None:
        # express the truth in the reconstruction's ENU frame
        from .geodesy import enu_frame_change

        Rf, tf = enu_frame_change(bundle.enu_origin, recon.enu_origin)
        true = true @ Rf.T + tf
        true_rot = [Rotation(Rf) @ r for r in true_rot]
    sim = None
    est_aligned = est
    if recon.scale_state != "metric":
        sim = estimate_similarity(est, true)
        est_aligned = sim.apply(est)
    cen = np.linalg.norm(est_aligned - true, axis=1)
    rot = []
    for i, v in enumerate(vids):
        Re = recon.views[v].pose.rotation
        if sim is not None:
            Re = sim.rotation @ Re
        diff = Re.inverse() @ true_rot[i]
        rot.append(math.degrees(np.linalg.norm(diff.log())))
    rot = np.array(rot)
    return ReconstructionErrors(
        aligned=sim is not None,
        rotation_err_deg=rot,
        center_err_m=cen,
        mean_rotation_err_deg=float(rot.mean()),
        mean_center_err_m=float(cen.mean()),
        rms_reprojection_px=recon.rms_reprojection_error(),
    )


def evaluate_localization(result, bundle: GroundTruthBundle, metric_frame: bool = True) -> CalibrationErrors:
    """Intrinsics percent errors plus pose errors of a localization result.

    metric_frame must reflect the frame the query was localized in; comparing
    an up-to-scale localization against the metric truth raises.
    """
    if not metric_frame:
        raise ValidationError("localization frame mismatch: arbitrary-scale vs metric ground truth")
    est = result.intrinsics
    true = bundle.query_intrinsics
    pct = lambda a, b: abs(a - b) / abs(b) * 100.0  # noqa: E731
    diff = result.pose.rotation.inverse() @ bundle.query_pose.rotation
    return CalibrationErrors(
        focal_pct={"fx": pct(est.fx, true.fx), "fy": pct(est.fy, true.fy)},
        principal_point_pct={"px": pct(est.px, true.px), "py": pct(est.py, true.py)},
        distortion_pct={
            "k1": pct(est.k1, true.k1),
            "k2": pct(est.k2, true.k2),
            "p1": pct(est.p1, true.p1),
            "p2": pct(est.p2, true.p2),
        },
        rotation_err_deg=math.degrees(np.linalg.norm(diff.log())),
        center_err_m=float(np.linalg.norm(result.pose.center - bundle.query_pose.center)),
    )


def evaluate_distances(intr, pose, plane, mark_pixels):
    """Measure each mark through an estimated calibration.

    Returns (estimates, ground truths, DistanceErrorStats).
    """
    from .groundplane import measure_ground_distance

    est, gt = [], []
    for pa, pb, d in mark_pixels:
        est.append(measure_ground_distance(intr, pose, plane, pa, pb))
        gt.append(d)
    stats = distance_error_stats(est, gt)
    return np.array(est), np.array(gt), stats


def true_trap_speeds(bundle: GroundTruthBundle):
    """Per-vehicle true crossing (time, speed) readings over the bundle trap."""
    from .traffic import trap_speed

    return {t.track_id: trap_speed(t, bundle.trap, bundle.plane) for t in bundle.vehicle_tracks}
