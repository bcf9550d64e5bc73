"""Batch command-line front end: pancal <subcommand>.

Exit codes: 0 success, 2 usage/validation errors, 3 pipeline failures.
Stdout carries one-line summaries; all data goes to files in --out-dir.
Every randomized stage takes --seed (default 0) and is byte-identical across
reruns and across --threads values.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geodesy, groundplane, io, localize, sfm, synth, traffic
from .errors import GenerationError, PancalError, ParseError, ValidationError
from .geometry import SamplingConfig


def _threads_default() -> int:
    try:
        return max(1, int(os.environ.get("PANCAL_THREADS", "1")))
    except ValueError:
        return 1


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _require_file(path, flag):
    if path is None:
        raise ValidationError(f"missing required path: {flag}")
    if not os.path.exists(path):
        raise ValidationError(f"{flag}: file not found: {path}")
    return path


# ---------------------------------------------------------------------------
# synth


def _scene_spec_from_args(args) -> synth.SceneSpec:
    spec = synth.SceneSpec(
        seed=args.seed,
        num_panos=args.panos,
        radius_m=args.radius,
        num_points=args.points,
        num_marks=args.marks,
        sampling=SamplingConfig(args.views_per_pano, args.fov, args.width, args.height),
        noise=synth.NoiseSpec(
            pixel_sigma=args.noise_sigma,
            outlier_fraction=args.outlier_frac,
            gps_sigma_m=args.gps_sigma,
            seed=args.noise_seed if args.noise_seed is not None else args.seed,
        ),
        vehicles=synth.VehicleSpec(count=args.vehicles),
    )
    if args.spec_file:
        doc = io._load_json(args.spec_file)
        for key, value in doc.items():
            if key in ("sampling", "noise", "query", "vehicles"):
                sub = getattr(spec, key)
                for k2, v2 in value.items():
                    setattr(sub, k2, tuple(v2) if isinstance(v2, list) else v2)
            elif key == "origin":
                spec.origin = geodesy.GeodeticCoord(**value)
            elif hasattr(spec, key):
                setattr(spec, key, value)
            else:
                raise ValidationError(f"{args.spec_file}: unknown scene spec field {key!r}")
    return spec


def _cmd_synth(args) -> int:
    spec = _scene_spec_from_args(args)
    bundle = synth.generate_scene(spec)
    rendered = synth.render_matches(bundle, spec.sampling)
    io.write_panoramas(_out(args, io.PANORAMAS_FILE), bundle.panos, rendered.pano_tags)
    io.write_matches(_out(args, io.MATCHES_FILE), rendered.matches)
    io.write_query_matches(_out(args, io.QUERY_MATCHES_FILE), rendered.query_matches)
    io.write_road_labels(_out(args, io.ROAD_LABELS_FILE), rendered.road_labels)
    io.write_marks(_out(args, io.MARKS_FILE), rendered.mark_pixels)
    io.write_tracks(_out(args, io.TRACKS_FILE), rendered.image_tracks)
    io.write_trap(_out(args, io.TRAP_FILE), bundle.trap)
    io.write_truth(_out(args, io.TRUTH_FILE), bundle, rendered)
    paths = {
        "panoramas": io.PANORAMAS_FILE,
        "matches": io.MATCHES_FILE,
        "query_matches": io.QUERY_MATCHES_FILE,
        "road_labels": io.ROAD_LABELS_FILE,
        "marks": io.MARKS_FILE,
        "tracks": io.TRACKS_FILE,
        "trap": io.TRAP_FILE,
        "truth": io.TRUTH_FILE,
    }
    io.write_manifest(_out(args, io.MANIFEST_FILE), paths, spec.sampling, {"synth": "done"})
    rows = sum(len(p) for p in rendered.matches.pairs)
    print(
        f"synth: {spec.num_panos} panoramas (radius {spec.radius_m:g} m), "
        f"{bundle.points.shape[0]} points, {len(bundle.marks)} marks, "
        f"{len(bundle.vehicle_tracks)} vehicles, {len(rendered.matches.pairs)} match pairs "
        f"({rows} rows), {len(rendered.query_matches)} query matches -> {args.out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# reconstruct / georegister / fit-plane


def _cmd_reconstruct(args) -> int:
    panos, _ = io.read_panoramas(_require_file(args.panoramas, "--panoramas"))
    matches = io.read_matches(_require_file(args.matches, "--matches"))
    masks = io.read_masks(args.masks) if args.masks else None
    labels = io.read_road_labels(args.road_labels) if args.road_labels else None
    cfg = SamplingConfig(args.views_per_pano, args.fov, args.width, args.height)
    opts = sfm.ReconstructOptions(
        pano_mode=args.pano_mode,
        pano_weight=args.pano_weight,
        pano_constraint=not args.no_pano_constraint,
        fix_intrinsics=not args.free_intrinsics,
        seed=args.seed,
    )
    recon = sfm.reconstruct(panos, cfg, matches, opts, masks=masks, road_labels=labels)
    io.write_reconstruction(_out(args, io.RECONSTRUCTION_FILE), recon)
    s = recon.summary
    constraint = "off" if args.no_pano_constraint else f"{args.pano_mode} (weight {args.pano_weight:g})"
    print(
        f"reconstruct: registered {s.registered_views}/{s.total_views} views, "
        f"{s.triangulated_points} points, RMS reprojection {s.rms_reprojection_px:.6g} px, "
        f"final cost {s.final_cost:.6g}, pano constraint {constraint}"
    )
    return 0


def _cmd_georegister(args) -> int:
    recon = io.read_reconstruction(_require_file(args.reconstruction, "--reconstruction"))
    _, tags = io.read_panoramas(_require_file(args.panoramas, "--panoramas"))
    origin = None
    if args.origin:
        parts = [float(v) for v in args.origin.split(",")]
        if len(parts) != 3:
            raise ValidationError("--origin expects 'lat,lon,alt'")
        origin = geodesy.GeodeticCoord(*parts)
    metric, sim = geodesy.georegister(recon, tags, enu_origin=origin)
    io.write_reconstruction(_out(args, io.RECONSTRUCTION_FILE), metric)
    angle = math.degrees(np.linalg.norm(sim.rotation.log()))
    print(
        f"georegister: scale {sim.scale:.9g}, rotation {angle:.4f} deg, "
        f"translation {np.array2string(sim.translation, precision=3)} m, scale_state metric"
    )
    return 0


def _cmd_fit_plane(args) -> int:
    recon = io.read_reconstruction(_require_file(args.reconstruction, "--reconstruction"))
    pids = sorted(recon.points)
    if not pids:
        raise ValidationError("reconstruction has no 3D points")
    pts = np.array([recon.points[p] for p in pids])
    labels = np.array([p in recon.road_marks for p in pids])
    plane, inliers = groundplane.fit_plane_ransac(
        pts,
        labels if labels.any() else None,
        threshold_m=args.threshold,
        seed=args.seed,
    )
    io.write_plane(_out(args, io.PLANE_FILE), plane, int(inliers.sum()))
    print(
        f"fit-plane: normal {np.array2string(plane.normal, precision=6)}, offset {plane.offset:.6g}, "
        f"{int(inliers.sum())} inliers"
    )
    return 0


# ---------------------------------------------------------------------------
# localize / measure / speed / heatmap


def _cmd_localize(args) -> int:
    recon = io.read_reconstruction(_require_file(args.reconstruction, "--reconstruction"))
    raw = io.read_query_matches(_require_file(args.query_matches, "--query-matches"))
    try:
        width, height = (int(v) for v in args.image_size.lower().split("x"))
    except ValueError:
        raise ValidationError("--image-size expects WIDTHxHEIGHT, e.g. 1600x1200")
    opts = localize.LocalizeOptions(
        fov_min_deg=args.fov_min,
        fov_max_deg=args.fov_max,
        fov_step_deg=args.fov_step,
        ransac_threshold_px=args.ransac_threshold,
        min_inliers=args.min_inliers,
        seed=args.seed,
        threads=args.threads,
        estimate_distortion=not args.no_distortion,
        estimate_pp=not args.fix_pp,
    )
    qm = localize.lift_matches(recon, raw)
    result = localize.localize_query(qm, (width, height), opts, scale_state=recon.scale_state)
    if args.joint:
        result, _ = localize.refine_query_joint(recon, result, qm, opts)
    io.write_calibration(_out(args, io.CALIBRATION_FILE), result)
    intr = result.intrinsics
    print(
        f"localize: {result.inlier_count} inliers, RMS {result.rms_px:.6g} px, "
        f"fx {intr.fx:.2f} fy {intr.fy:.2f} px {intr.px:.2f} py {intr.py:.2f}, "
        f"k1 {intr.k1:.5f} k2 {intr.k2:.5f} p1 {intr.p1:.5f} p2 {intr.p2:.5f}, "
        f"frame {result.frame}"
    )
    return 0


def _load_metric_calibration(args):
    cal = io.read_calibration(_require_file(args.calibration, "--calibration"))
    if cal.frame != "metric":
        raise ValidationError(
            "calibration is in an arbitrary-scale frame; georegister the reconstruction "
            "before localizing to enable metric measurements"
        )
    plane = io.read_plane(_require_file(args.plane, "--plane"))
    return cal, plane


def _cmd_measure(args) -> int:
    cal, plane = _load_metric_calibration(args)
    marks = io.read_marks(_require_file(args.marks, "--marks"))
    estimates, gts = [], []
    for pa, pb, gt in marks:
        d = groundplane.measure_ground_distance(cal.intrinsics, cal.pose, plane, pa, pb)
        estimates.append(d)
        gts.append(gt)
    have_gt = [i for i, g in enumerate(gts) if g is not None]
    if not have_gt:
        raise ValidationError("marks file has no ground-truth distances to evaluate")
    stats = groundplane.distance_error_stats(
        [estimates[i] for i in have_gt], [gts[i] for i in have_gt]
    )
    io.write_distance_report(
        _out(args, io.MEASURE_REPORT_JSON),
        _out(args, io.MEASURE_REPORT_TXT),
        stats,
        [estimates[i] for i in have_gt],
        [gts[i] for i in have_gt],
    )
    print(
        f"measure: {len(have_gt)} marks, max {stats.max_pct:.2f}% "
        f"median {stats.median_pct:.2f}% RMSE {stats.rmse_pct:.2f}%"
    )
    return 0


def _cmd_speed(args) -> int:
    cal, plane = _load_metric_calibration(args)
    tracks = io.read_tracks(_require_file(args.tracks, "--tracks"))
    trap = io.read_trap(_require_file(args.trap, "--trap"), cal, plane)
    per_track = {}
    for track in tracks:
        try:
            ground, _ = traffic.lift_track(cal.intrinsics, cal.pose, plane, track)
        except PancalError:
            continue
        per_track[track.track_id] = traffic.trap_speed(ground, trap, plane, window=args.window)
    io.write_speeds(_out(args, io.SPEEDS_FILE), per_track)
    readings = [r for rs in per_track.values() for r in rs]
    if readings:
        speeds = ", ".join(f"{s:.1f} m/s ({s * 3.6:.1f} km/h)" for _, s in readings)
    else:
        speeds = "no crossings"
    print(f"speed: {len(readings)} crossings over {len(per_track)} tracks: {speeds}")
    return 0


def _cmd_heatmap(args) -> int:
    cal, plane = _load_metric_calibration(args)
    tracks = io.read_tracks(_require_file(args.tracks, "--tracks"))
    grounds = []
    for track in tracks:
        try:
            ground, _ = traffic.lift_track(cal.intrinsics, cal.pose, plane, track)
            grounds.append(ground)
        except PancalError:
            continue
    if not grounds:
        raise ValidationError("no track could be lifted onto the plane")
    e1, e2 = plane.basis()
    xy = np.vstack([np.column_stack([g.positions @ e1, g.positions @ e2]) for g in grounds])
    lo = np.floor(xy.min(axis=0)) - args.cell_size
    hi = np.ceil(xy.max(axis=0)) + args.cell_size
    grid = traffic.HeatmapGrid(
        origin=lo,
        cell_size_m=args.cell_size,
        num_x=int(math.ceil((hi[0] - lo[0]) / args.cell_size)),
        num_y=int(math.ceil((hi[1] - lo[1]) / args.cell_size)),
    )
    hm = traffic.activity_heatmap(grounds, grid, plane)
    io.write_heatmap(_out(args, io.HEATMAP_FILE), hm)
    print(
        f"heatmap: {grid.num_x}x{grid.num_y} cells of {args.cell_size:g} m, "
        f"peak count {int(hm.counts.max())}, spillover {hm.spillover}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args) -> int:
    truth = io.read_truth(_require_file(args.truth, "--truth"))
    bundle = _truth_as_bundle(truth)
    payload: dict = {}
    if args.reconstruction:
        recon = io.read_reconstruction(args.reconstruction)
        errs = synth.evaluate_reconstruction(recon, bundle)
        payload["reconstruction"] = {
            "aligned": errs.aligned,
            "mean_rotation_err_deg": errs.mean_rotation_err_deg,
            "mean_center_err_m": errs.mean_center_err_m,
            "rms_reprojection_px": errs.rms_reprojection_px,
        }
    if args.calibration:
        cal = io.read_calibration(args.calibration)
        c = synth.evaluate_localization(cal, bundle, metric_frame=cal.frame == "metric")
        payload["calibration"] = {
            "focal_pct": c.focal_pct,
            "principal_point_pct": c.principal_point_pct,
            "distortion_pct": c.distortion_pct,
            "rotation_err_deg": c.rotation_err_deg,
            "center_err_m": c.center_err_m,
        }
        if args.plane:
            plane = io.read_plane(args.plane)
            mark_pixels = [(pa, pb, d) for pa, pb, _, _, d in bundle.marks]
            _, _, stats = synth.evaluate_distances(cal.intrinsics, cal.pose, plane, mark_pixels)
            per_cam = {"max_pct": stats.max_pct, "median_pct": stats.median_pct, "rmse_pct": stats.rmse_pct}
            payload["ground_distance"] = dict(per_cam, per_camera={"query": per_cam})
    if not payload:
        raise ValidationError("eval: nothing to evaluate; pass --reconstruction and/or --calibration")
    io.write_eval_report(_out(args, io.EVAL_FILE), payload)
    keys = ", ".join(sorted(payload))
    print(f"eval: wrote {io.EVAL_FILE} with sections: {keys}")
    return 0


def _truth_as_bundle(truth: dict):
    """Adapter: truth sidecar dict to the GroundTruthBundle interface."""
    spec = synth.SceneSpec(
        seed=truth["seed"],
        num_panos=max(2, len(truth["pano_enu"])),
        radius_m=truth.get("radius_m") or 40.0,
        num_points=max(10, truth["points"].shape[0]),
        sampling=truth["sampling"],
    )
    return synth.GroundTruthBundle(
        spec=spec,
        panos=[],
        pano_enu=truth["pano_enu"],
        view_poses=truth["view_poses"],
        db_intrinsics=truth["sampling"].ideal_intrinsics(),
        points=truth["points"],
        road_mark=truth["road_mark"],
        plane=truth["plane"],
        query_intrinsics=truth["query_intrinsics"],
        query_pose=truth["query_pose"],
        marks=truth["marks"],
        trap=truth["trap"],
        vehicle_tracks=truth["vehicle_tracks"],
        enu_origin=truth["enu_origin"],
    )


# ---------------------------------------------------------------------------
# sweep-panos


@dataclass
class PipelineOutcome:
    """In-memory outcome of one synthetic pipeline run."""

    recon: object = None
    metric: object = None
    plane: object = None
    localization: object = None
    distance_stats: object = None
    calibration_errors: object = None
    error: Optional[str] = None
    registered_views: int = 0


def run_synthetic_pipeline(
    spec: synth.SceneSpec,
    pano_constraint: bool = True,
    pano_mode: str = "soft",
    pano_weight: float = 1e4,
    seed: int = 0,
    threads: int = 1,
) -> PipelineOutcome:
    """scene -> reconstruct -> georegister -> fit plane -> localize -> measure.

    Runs fully in memory against the scene's own rendered measurements; any
    pipeline failure is captured in the outcome instead of raised, so studies
    can tabulate failures.
    """
    out = PipelineOutcome()
    bundle = synth.generate_scene(spec)
    rendered = synth.render_matches(bundle, spec.sampling)
    try:
        recon = sfm.reconstruct(
            bundle.panos,
            spec.sampling,
            rendered.matches,
            sfm.ReconstructOptions(
                pano_constraint=pano_constraint,
                pano_mode=pano_mode,
                pano_weight=pano_weight,
                seed=seed,
            ),
            road_labels=rendered.road_labels,
        )
        out.recon = recon
        out.registered_views = recon.summary.registered_views
        metric, _ = geodesy.georegister(recon, rendered.pano_tags, enu_origin=bundle.enu_origin)
        out.metric = metric
        pids = sorted(metric.points)
        pts = np.array([metric.points[p] for p in pids])
        labels = np.array([p in metric.road_marks for p in pids])
        plane, _ = groundplane.fit_plane_ransac(pts, labels if labels.any() else None, seed=seed)
        out.plane = plane
        qm = localize.lift_matches(metric, rendered.query_matches)
        result = localize.localize_query(
            qm,
            (bundle.query_intrinsics.width, bundle.query_intrinsics.height),
            localize.LocalizeOptions(seed=seed, threads=threads),
            scale_state=metric.scale_state,
        )
        out.localization = result
        out.calibration_errors = synth.evaluate_localization(result, bundle)
        _, _, stats = synth.evaluate_distances(
            result.intrinsics, result.pose, plane, rendered.mark_pixels
        )
        out.distance_stats = stats
    except PancalError as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def _cmd_sweep_panos(args) -> int:
    rows = []
    for n in range(args.min, args.max + 1):
        cells = {}
        for constraint in (True, False):
            errs = []
            registered = []
            for s in range(args.sweep_seeds):
                spec = synth.SceneSpec(
                    seed=args.seed + 1000 * s + n,
                    num_panos=n,
                    num_points=args.points,
                    num_marks=args.marks,
                    sampling=SamplingConfig(args.views_per_pano, args.fov, args.width, args.height),
                    noise=synth.NoiseSpec(
                        pixel_sigma=args.noise_sigma,
                        outlier_fraction=args.outlier_frac,
                        seed=args.seed + 1000 * s + n,
                    ),
                )
                outcome = run_synthetic_pipeline(
                    spec, pano_constraint=constraint, seed=args.seed, threads=args.threads
                )
                if outcome.distance_stats is not None:
                    errs.append(float(np.mean(outcome.distance_stats.errors_pct)))
                registered.append(outcome.registered_views)
            cells[constraint] = (
                float(np.mean(errs)) if errs else None,
                float(np.mean(registered)) if registered else 0.0,
            )
        rows.append(
            {
                "num_panos": n,
                "with_constraint_mean_pct": cells[True][0],
                "without_constraint_mean_pct": cells[False][0],
                "with_constraint_registered": cells[True][1],
                "without_constraint_registered": cells[False][1],
            }
        )
        if args.verbose:
            print(f"  n={n}: with={cells[True][0]} without={cells[False][0]}")
    io.write_sweep_csv(_out(args, io.SWEEP_CSV), rows)
    print(f"sweep-panos: {len(rows)} rows (N={args.min}..{args.max}) -> {io.SWEEP_CSV}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pancal",
        description="Metric scene reconstruction from panorama-derived views, "
        "camera localization, and ground-plane metrology.",
    )
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed (default: 0)")
    parser.add_argument(
        "--threads",
        type=int,
        default=_threads_default(),
        help="worker threads for independent candidates; results are "
        "thread-count independent (default: PANCAL_THREADS or 1)",
    )
    parser.add_argument("--verbose", action="store_true", help="extra progress output")
    parser.add_argument("--out-dir", default=".", help="output directory (default: .)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--panos", type=int, default=10, help="panorama count N >= 2 (default: 10)")
    p.add_argument("--radius", type=float, default=40.0, help="placement radius in m (default: 40)")
    p.add_argument("--points", type=int, default=2000, help="3D point count (default: 2000)")
    p.add_argument("--marks", type=int, default=12, help="ground marks (default: 12)")
    p.add_argument("--vehicles", type=int, default=1, help="vehicle tracks (default: 1)")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="pixel noise sigma (default: 0)")
    p.add_argument("--outlier-frac", type=float, default=0.0, help="outlier fraction (default: 0)")
    p.add_argument("--gps-sigma", type=float, default=0.0, help="GPS noise sigma m (default: 0)")
    p.add_argument("--noise-seed", type=int, default=None, help="noise seed (default: --seed)")
    p.add_argument("--spec-file", default=None, help="JSON file overriding scene spec fields")
    _sampling_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("reconstruct", help="incremental SfM from panoramas + matches")
    p.add_argument("--panoramas", help="panoramas JSON (default: <out-dir>/panoramas.json)")
    p.add_argument("--matches", help="match file (default: <out-dir>/matches.txt)")
    p.add_argument("--masks", default=None, help="optional dynamic-object mask JSON")
    p.add_argument("--road-labels", default=None, help="optional road-pixel labels CSV")
    p.add_argument(
        "--pano-mode",
        choices=("soft", "hard"),
        default="soft",
        help="panoramic constraint mode (default: soft)",
    )
    p.add_argument("--pano-weight", type=float, default=1e4, help="constraint weight (default: 1e4)")
    p.add_argument("--no-pano-constraint", action="store_true", help="disable panoramic constraints")
    p.add_argument(
        "--free-intrinsics",
        action="store_true",
        help="optimize shared intrinsics during BA (default: fixed)",
    )
    _sampling_flags(p)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("georegister", help="similarity-register a reconstruction to GPS tags")
    p.add_argument("--reconstruction", help="input reconstruction JSON")
    p.add_argument("--panoramas", help="panoramas JSON with GPS tags")
    p.add_argument("--origin", default=None, help="ENU origin 'lat,lon,alt' (default: tag centroid)")
    p.set_defaults(func=_cmd_georegister)

    p = sub.add_parser("fit-plane", help="fit the road plane to road-marked points")
    p.add_argument("--reconstruction", help="reconstruction JSON")
    p.add_argument("--threshold", type=float, default=0.05, help="inlier threshold m (default: 0.05)")
    p.set_defaults(func=_cmd_fit_plane)

    p = sub.add_parser("localize", help="localize an uncalibrated query camera")
    p.add_argument("--reconstruction", help="reconstruction JSON")
    p.add_argument("--query-matches", help="query match file")
    p.add_argument("--image-size", required=True, help="query image size WIDTHxHEIGHT")
    p.add_argument("--fov-min", type=float, default=25.0, help="FOV grid start deg (default: 25)")
    p.add_argument("--fov-max", type=float, default=120.0, help="FOV grid end deg (default: 120)")
    p.add_argument("--fov-step", type=float, default=5.0, help="FOV grid step deg (default: 5)")
    p.add_argument(
        "--ransac-threshold", type=float, default=3.0, help="RANSAC threshold px (default: 3)"
    )
    p.add_argument("--min-inliers", type=int, default=12, help="minimum inliers (default: 12)")
    p.add_argument("--no-distortion", action="store_true", help="freeze distortion at zero")
    p.add_argument("--fix-pp", action="store_true", help="freeze principal point at image center")
    p.add_argument(
        "--joint",
        action="store_true",
        help="joint refinement: full BA with pano constraints over database views",
    )
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("measure", help="measure marked ground distances")
    p.add_argument("--calibration", help="calibration JSON from localize")
    p.add_argument("--plane", help="plane JSON from fit-plane")
    p.add_argument("--marks", help="marks CSV")
    p.set_defaults(func=_cmd_measure)

    p = sub.add_parser("speed", help="virtual speed-trap readings for image tracks")
    p.add_argument("--calibration", help="calibration JSON")
    p.add_argument("--plane", help="plane JSON")
    p.add_argument("--tracks", help="tracks CSV")
    p.add_argument("--trap", help="trap JSON")
    p.add_argument("--window", type=int, default=0, help="extra segments averaged (default: 0)")
    p.set_defaults(func=_cmd_speed)

    p = sub.add_parser("heatmap", help="activity heatmap of lifted tracks")
    p.add_argument("--calibration", help="calibration JSON")
    p.add_argument("--plane", help="plane JSON")
    p.add_argument("--tracks", help="tracks CSV")
    p.add_argument("--cell-size", type=float, default=1.0, help="cell size m (default: 1)")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("eval", help="compare stage outputs against the truth sidecar")
    p.add_argument("--truth", help="truth sidecar JSON")
    p.add_argument("--reconstruction", default=None)
    p.add_argument("--calibration", default=None)
    p.add_argument("--plane", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-panos", help="sparse-view study: error vs panorama count")
    p.add_argument("--min", type=int, default=2, help="smallest N (default: 2)")
    p.add_argument("--max", type=int, default=10, help="largest N (default: 10)")
    p.add_argument("--sweep-seeds", type=int, default=1, help="seeds per cell (default: 1)")
    p.add_argument("--points", type=int, default=500, help="scene points (default: 500)")
    p.add_argument("--marks", type=int, default=10, help="marks per scene (default: 10)")
    p.add_argument("--noise-sigma", type=float, default=1.0, help="pixel sigma (default: 1)")
    p.add_argument("--outlier-frac", type=float, default=0.0, help="outlier fraction (default: 0)")
    _sampling_flags(p, views=8, fov=75.0, width=1280, height=720)
    p.set_defaults(func=_cmd_sweep_panos)
    return parser


def _sampling_flags(p, views=12, fov=90.0, width=1920, height=1080):
    p.add_argument(
        "--views-per-pano", type=int, default=views, help=f"views per panorama T (default: {views})"
    )
    p.add_argument("--fov", type=float, default=fov, help=f"horizontal FOV deg (default: {fov:g})")
    p.add_argument("--width", type=int, default=width, help=f"view width px (default: {width})")
    p.add_argument("--height", type=int, default=height, help=f"view height px (default: {height})")


def _resolve_manifest_defaults(args):
    """Fill omitted input paths from conventional out-dir file names."""
    defaults = {
        "panoramas": io.PANORAMAS_FILE,
        "matches": io.MATCHES_FILE,
        "query_matches": io.QUERY_MATCHES_FILE,
        "reconstruction": io.RECONSTRUCTION_FILE,
        "plane": io.PLANE_FILE,
        "calibration": io.CALIBRATION_FILE,
        "marks": io.MARKS_FILE,
        "tracks": io.TRACKS_FILE,
        "trap": io.TRAP_FILE,
        "truth": io.TRUTH_FILE,
    }
    for attr, fallback in defaults.items():
        if hasattr(args, attr) and getattr(args, attr) is None:
            candidate = os.path.join(args.out_dir, fallback)
            if os.path.exists(candidate):
                setattr(args, attr, candidate)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _resolve_manifest_defaults(args)
    try:
        return args.func(args)
    except (ValidationError, ParseError, GenerationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PancalError as exc:
        stage = getattr(exc, "stage", None)
        where = f" (stage: {stage})" if stage else ""
        print(f"pipeline failure{where}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
