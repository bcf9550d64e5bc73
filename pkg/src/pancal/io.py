"""File formats, persistence, and report emission for all pipeline stages.

All JSON documents carry a format_version field and are written with sorted
keys, so every writer/reader pair round-trips byte-identically. Angles are
degrees in files and radians in memory; numbers serialize with full
round-trip precision (repr).
"""

from __future__ import annotations

import json
import math
import os
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError
from .geodesy import GeodeticCoord
from .geometry import CameraIntrinsics, PanoramaMeta, Rotation, SamplingConfig, ViewPose
from .groundplane import DistanceErrorStats, PlaneModel
from .localize import FocalCandidate, LocalizationResult
from .sfm import MatchPair, MatchSet, Reconstruction, Track, ViewRecord
from .traffic import Heatmap, ImageTrack, SpeedTrap

FORMAT_VERSION = 1

PANORAMAS_FILE = "panoramas.json"
MATCHES_FILE = "matches.txt"
QUERY_MATCHES_FILE = "query_matches.txt"
ROAD_LABELS_FILE = "road_labels.csv"
MARKS_FILE = "marks.csv"
TRACKS_FILE = "tracks.csv"
TRAP_FILE = "trap.json"
MASKS_FILE = "masks.json"
TRUTH_FILE = "truth.json"
MANIFEST_FILE = "manifest.json"
RECONSTRUCTION_FILE = "reconstruction.json"
PLANE_FILE = "plane.json"
CALIBRATION_FILE = "calibration.json"
MEASURE_REPORT_JSON = "measure_report.json"
MEASURE_REPORT_TXT = "measure_report.txt"
SPEEDS_FILE = "speeds.json"
HEATMAP_FILE = "heatmap.json"
EVAL_FILE = "eval.json"
SWEEP_CSV = "sweep_panos.csv"


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, separators=(",", ": "))
        fh.write("\n")


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _check_version(doc, path):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ParseError(
            f"{path}: unsupported format_version {version!r}; this build reads version "
            f"{FORMAT_VERSION} -- upgrade the file or the package"
        )


def _field(doc, name, path, ctx=""):
    if name not in doc:
        raise ParseError(f"{path}: missing field {name!r}{' in ' + ctx if ctx else ''}")
    return doc[name]


# ---------------------------------------------------------------------------
# panoramas


def write_panoramas(path, panos, tags: Optional[dict] = None):
    """tags optionally override each panorama's geodetic (e.g. noisy GPS)."""
    rows = []
    for p in sorted(panos, key=lambda p: p.pano_id):
        g = tags[p.pano_id] if tags else p.geodetic
        rows.append(
            {
                "pano_id": p.pano_id,
                "lat_deg": g.lat_deg,
                "lon_deg": g.lon_deg,
                "alt_m": g.alt_m,
                "heading_deg": p.heading_deg,
                "width": p.width,
                "height": p.height,
            }
        )
    _dump_json(path, {"format_version": FORMAT_VERSION, "panoramas": rows})


def read_panoramas(path):
    """Returns (list of PanoramaMeta, dict pano_id -> GeodeticCoord)."""
    doc = _load_json(path)
    _check_version(doc, path)
    panos = []
    tags = {}
    for i, row in enumerate(_field(doc, "panoramas", path)):
        ctx = f"panoramas[{i}]"
        pano_id = _field(row, "pano_id", path, ctx)
        if pano_id in tags:
            raise ValidationError(f"{path}: duplicate pano_id {pano_id!r}")
        geod = GeodeticCoord(
            _field(row, "lat_deg", path, ctx),
            _field(row, "lon_deg", path, ctx),
            _field(row, "alt_m", path, ctx),
        )
        panos.append(
            PanoramaMeta(
                pano_id,
                geod,
                _field(row, "heading_deg", path, ctx),
                int(_field(row, "width", path, ctx)),
                int(_field(row, "height", path, ctx)),
            )
        )
        tags[pano_id] = geod
    return panos, tags


# ---------------------------------------------------------------------------
# match files


def write_matches(path, matches: MatchSet):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in matches:
            fh.write(f"pair {pair.view_a} {pair.view_b} {len(pair)}\n")
            for (ua, va), (ub, vb) in zip(pair.pixels_a, pair.pixels_b):
                fh.write(f"{float(ua)!r} {float(va)!r} {float(ub)!r} {float(vb)!r}\n")


def read_matches(path) -> MatchSet:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        parts = line.split()
        if parts[0] != "pair" or len(parts) != 4:
            raise ParseError(f"{path}:{i + 1}: expected 'pair <a> <b> <count>', got {line!r}")
        va, vb = parts[1], parts[2]
        try:
            count = int(parts[3])
        except ValueError:
            raise ParseError(f"{path}:{i + 1}: malformed count in header {line!r}")
        rows = lines[i + 1 : i + 1 + count]
        if len(rows) < count:
            raise ParseError(
                f"{path}:{i + 1}: header {line!r} declares {count} rows but only {len(rows)} remain"
            )
        pa = np.empty((count, 2))
        pb = np.empty((count, 2))
        for k, row in enumerate(rows):
            vals = row.split()
            if len(vals) != 4:
                raise ParseError(f"{path}:{i + 2 + k}: expected 4 pixel values (pair {line!r})")
            try:
                pa[k] = (float(vals[0]), float(vals[1]))
                pb[k] = (float(vals[2]), float(vals[3]))
            except ValueError:
                raise ParseError(f"{path}:{i + 2 + k}: non-numeric pixel (pair {line!r})")
        pairs.append(MatchPair(va, vb, pa, pb))
        i += 1 + count
    return MatchSet(pairs)


def write_query_matches(path, rows):
    """rows: iterable of (query_pixel, db_view_id, db_pixel); one pair record
    per db view, query side first."""
    by_view: dict = {}
    order = []
    for q_px, vid, db_px in rows:
        if vid not in by_view:
            by_view[vid] = []
            order.append(vid)
        by_view[vid].append((q_px, db_px))
    ms = MatchSet(
        [
            MatchPair(
                "query",
                vid,
                np.array([r[0] for r in by_view[vid]], dtype=float).reshape(-1, 2),
                np.array([r[1] for r in by_view[vid]], dtype=float).reshape(-1, 2),
            )
            for vid in order
        ]
    )
    write_matches(path, ms)


def read_query_matches(path):
    """Returns list of (query_pixel, db_view_id, db_pixel)."""
    out = []
    for pair in read_matches(path):
        if pair.view_a == "query":
            qs, dbs, vid = pair.pixels_a, pair.pixels_b, pair.view_b
        elif pair.view_b == "query":
            qs, dbs, vid = pair.pixels_b, pair.pixels_a, pair.view_a
        else:
            raise ParseError(f"{path}: pair {pair.view_a} {pair.view_b} does not involve 'query'")
        for q, d in zip(qs, dbs):
            out.append((q, vid, d))
    return out


# ---------------------------------------------------------------------------
# masks / road labels


def write_masks(path, masks: dict):
    rows = [
        {"view_id": vid, "boxes": [[float(v) for v in box] for box in boxes]}
        for vid, boxes in sorted(masks.items())
    ]
    _dump_json(path, {"format_version": FORMAT_VERSION, "masks": rows})


def read_masks(path) -> dict:
    doc = _load_json(path)
    _check_version(doc, path)
    out = {}
    for i, row in enumerate(_field(doc, "masks", path)):
        vid = _field(row, "view_id", path, f"masks[{i}]")
        out[vid] = [tuple(float(v) for v in box) for box in _field(row, "boxes", path, f"masks[{i}]")]
    return out


def write_road_labels(path, labels):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("view_id,u,v\n")
        for vid, u, v in sorted(labels):
            fh.write(f"{vid},{float(u)!r},{float(v)!r}\n")


def read_road_labels(path) -> set:
    out = set()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "view_id,u,v":
            raise ParseError(f"{path}:1: expected header 'view_id,u,v', got {header!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"{path}:{ln}: expected 3 columns")
            out.add((parts[0], float(parts[1]), float(parts[2])))
    return out


# ---------------------------------------------------------------------------
# reconstruction


def _intr_to_json(intr: CameraIntrinsics) -> dict:
    return {
        "fx": intr.fx,
        "fy": intr.fy,
        "px": intr.px,
        "py": intr.py,
        "k1": intr.k1,
        "k2": intr.k2,
        "p1": intr.p1,
        "p2": intr.p2,
        "width": intr.width,
        "height": intr.height,
    }


def _intr_from_json(doc, path, ctx) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(_field(doc, "fx", path, ctx)),
        fy=float(_field(doc, "fy", path, ctx)),
        px=float(_field(doc, "px", path, ctx)),
        py=float(_field(doc, "py", path, ctx)),
        k1=float(doc.get("k1", 0.0)),
        k2=float(doc.get("k2", 0.0)),
        p1=float(doc.get("p1", 0.0)),
        p2=float(doc.get("p2", 0.0)),
        width=int(_field(doc, "width", path, ctx)),
        height=int(_field(doc, "height", path, ctx)),
    )


def _pose_to_json(pose: ViewPose) -> dict:
    return {
        "quat_wxyz": [float(v) for v in pose.rotation.to_quat()],
        "center": [float(v) for v in pose.center],
    }


def _pose_from_json(doc, path, ctx, pano_id=None, slot_index=None) -> ViewPose:
    quat = np.asarray(_field(doc, "quat_wxyz", path, ctx), dtype=float)
    norm = float(np.linalg.norm(quat))
    if norm < 1e-6:
        raise ParseError(f"{path}: {ctx}: quaternion norm {norm:g} is not normalizable")
    rot = Rotation.from_quat(quat)
    return ViewPose(rot, np.asarray(_field(doc, "center", path, ctx), dtype=float), pano_id, slot_index)


def _geodetic_to_json(g: GeodeticCoord) -> dict:
    return {"lat_deg": g.lat_deg, "lon_deg": g.lon_deg, "alt_m": g.alt_m}


def _geodetic_from_json(doc) -> GeodeticCoord:
    return GeodeticCoord(doc["lat_deg"], doc["lon_deg"], doc.get("alt_m", 0.0))


def write_reconstruction(path, recon: Reconstruction):
    views = []
    for vid in sorted(recon.views, key=recon.view_order_key):
        rec = recon.views[vid]
        row = {
            "view_id": vid,
            "pano_id": rec.pose.pano_id,
            "slot_index": rec.pose.slot_index,
            "intrinsics_id": rec.intrinsics_id,
            "registered": rec.registered,
        }
        row.update(_pose_to_json(rec.pose))
        views.append(row)
    points = []
    for pid in sorted(recon.points):
        track = recon.tracks.get(pid)
        obs = [[vid, float(px[0]), float(px[1])] for vid, px in (track.observations if track else [])]
        points.append(
            {
                "point_id": pid,
                "xyz": [float(v) for v in recon.points[pid]],
                "road_mark": pid in recon.road_marks,
                "observations": obs,
            }
        )
    doc = {
        "format_version": FORMAT_VERSION,
        "scale_state": recon.scale_state,
        "num_slots": recon.num_slots,
        "enu_origin": _geodetic_to_json(recon.enu_origin) if recon.enu_origin else None,
        "intrinsics": {iid: _intr_to_json(i) for iid, i in sorted(recon.intrinsics.items())},
        "views": views,
        "points": points,
    }
    _dump_json(path, doc)


def read_reconstruction(path) -> Reconstruction:
    doc = _load_json(path)
    _check_version(doc, path)
    recon = Reconstruction(num_slots=int(doc.get("num_slots", 0)))
    recon.scale_state = _field(doc, "scale_state", path)
    if doc.get("enu_origin"):
        recon.enu_origin = _geodetic_from_json(doc["enu_origin"])
    for iid, row in _field(doc, "intrinsics", path).items():
        recon.intrinsics[iid] = _intr_from_json(row, path, f"intrinsics[{iid}]")
    for i, row in enumerate(_field(doc, "views", path)):
        ctx = f"views[{i}]"
        vid = _field(row, "view_id", path, ctx)
        iid = _field(row, "intrinsics_id", path, ctx)
        if iid not in recon.intrinsics:
            raise ValidationError(f"{path}: {ctx}: unknown intrinsics ref {iid!r}")
        pose = _pose_from_json(row, path, ctx, row.get("pano_id"), row.get("slot_index"))
        recon.add_view(vid, ViewRecord(pose, iid, bool(_field(row, "registered", path, ctx))))
    for i, row in enumerate(_field(doc, "points", path)):
        ctx = f"points[{i}]"
        pid = int(_field(row, "point_id", path, ctx))
        recon.points[pid] = np.asarray(_field(row, "xyz", path, ctx), dtype=float)
        obs = [
            (vid, np.array([u, v], dtype=float)) for vid, u, v in _field(row, "observations", path, ctx)
        ]
        recon.tracks[pid] = Track(pid, obs)
        if row.get("road_mark"):
            recon.road_marks.add(pid)
    return recon


# ---------------------------------------------------------------------------
# plane / calibration / reports


def write_plane(path, plane: PlaneModel, inlier_count: int = 0):
    _dump_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "normal": [float(v) for v in plane.normal],
            "offset": float(plane.offset),
            "inlier_count": int(inlier_count),
        },
    )


def read_plane(path) -> PlaneModel:
    doc = _load_json(path)
    _check_version(doc, path)
    return PlaneModel.canonical(
        np.asarray(_field(doc, "normal", path), dtype=float), float(_field(doc, "offset", path))
    )


def write_calibration(path, result: LocalizationResult):
    doc = {
        "format_version": FORMAT_VERSION,
        "intrinsics": _intr_to_json(result.intrinsics),
        "pose": _pose_to_json(result.pose),
        "inlier_count": result.inlier_count,
        "rms_px": result.rms_px,
        "frame": result.frame,
        "refinement_diverged": result.refinement_diverged,
        "focal_trace": [
            {
                "fov_deg": c.fov_deg,
                "focal_px": c.focal_px,
                "inliers": c.inliers,
                "rms_px": c.rms_px if math.isfinite(c.rms_px) else None,
            }
            for c in result.focal_trace
        ],
    }
    _dump_json(path, doc)


def read_calibration(path) -> LocalizationResult:
    doc = _load_json(path)
    _check_version(doc, path)
    trace = [
        FocalCandidate(
            row["fov_deg"],
            row["focal_px"],
            row["inliers"],
            math.inf if row.get("rms_px") is None else row["rms_px"],
        )
        for row in doc.get("focal_trace", [])
    ]
    return LocalizationResult(
        intrinsics=_intr_from_json(_field(doc, "intrinsics", path), path, "intrinsics"),
        pose=_pose_from_json(_field(doc, "pose", path), path, "pose"),
        inlier_count=int(_field(doc, "inlier_count", path)),
        rms_px=float(_field(doc, "rms_px", path)),
        focal_trace=trace,
        refinement_diverged=bool(doc.get("refinement_diverged", False)),
        frame=doc.get("frame", "arbitrary"),
    )


def write_distance_report(json_path, txt_path, stats: DistanceErrorStats, estimates, ground_truth):
    rows = [
        {"estimate_m": float(e), "ground_truth_m": float(g), "error_pct": float(r)}
        for e, g, r in zip(estimates, ground_truth, stats.errors_pct)
    ]
    _dump_json(
        json_path,
        {
            "format_version": FORMAT_VERSION,
            "marks": rows,
            "max_error_pct": stats.max_pct,
            "median_error_pct": stats.median_pct,
            "rmse_pct": stats.rmse_pct,
        },
    )
    header = f"{'Max Error (%)':>14} {'Median Error (%)':>17} {'RMSE (%)':>9}"
    line = f"{stats.max_pct:>14.2f} {stats.median_pct:>17.2f} {stats.rmse_pct:>9.2f}"
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n" + line + "\n")


def write_sweep_csv(path, rows):
    """Sparse-view study: one row per panorama count, both conditions."""
    cols = [
        "num_panos",
        "with_constraint_mean_pct",
        "without_constraint_mean_pct",
        "with_constraint_registered",
        "without_constraint_registered",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join("" if row.get(c) is None else repr(row[c]) for c in cols) + "\n")


def write_eval_report(path, payload: dict):
    payload = dict(payload)
    payload["format_version"] = FORMAT_VERSION
    _dump_json(path, payload)


# ---------------------------------------------------------------------------
# marks / tracks / trap


def write_marks(path, marks):
    """marks: iterable of (pixel_a, pixel_b, gt_distance_m or None)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("u_a,v_a,u_b,v_b,gt_distance_m\n")
        for pa, pb, gt in marks:
            gt_txt = "" if gt is None else repr(float(gt))
            fh.write(f"{float(pa[0])!r},{float(pa[1])!r},{float(pb[0])!r},{float(pb[1])!r},{gt_txt}\n")


def read_marks(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "u_a,v_a,u_b,v_b,gt_distance_m":
            raise ParseError(f"{path}:1: expected marks header, got {header!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ParseError(f"{path}:{ln}: expected 5 columns")
            gt = None if parts[4] == "" else float(parts[4])
            out.append(
                (
                    np.array([float(parts[0]), float(parts[1])]),
                    np.array([float(parts[2]), float(parts[3])]),
                    gt,
                )
            )
    return out


def write_tracks(path, tracks):
    """tracks: iterable of (track_id, timestamps, pixels)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("track_id,timestamp_s,u,v\n")
        for tid, ts, px in tracks:
            for t, (u, v) in zip(ts, px):
                fh.write(f"{tid},{float(t)!r},{float(u)!r},{float(v)!r}\n")


def read_tracks(path):
    """Returns list of ImageTrack, in file order of first appearance."""
    rows: dict = {}
    order = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "track_id,timestamp_s,u,v":
            raise ParseError(f"{path}:1: expected tracks header, got {header!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"{path}:{ln}: expected 4 columns")
            tid = parts[0]
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            rows[tid].append((float(parts[1]), float(parts[2]), float(parts[3])))
    tracks = []
    for tid in order:
        data = rows[tid]
        tracks.append(
            ImageTrack(
                tid,
                np.array([d[0] for d in data]),
                np.array([[d[1], d[2]] for d in data]),
            )
        )
    return tracks


def write_trap(path, trap: SpeedTrap):
    _dump_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "endpoints_enu": [
                [float(v) for v in trap.endpoint_a],
                [float(v) for v in trap.endpoint_b],
            ],
        },
    )


def read_trap(path, calibration: Optional[LocalizationResult] = None, plane: Optional[PlaneModel] = None):
    """Trap from ENU endpoints, or from two pixels through a calibration+plane."""
    doc = _load_json(path)
    _check_version(doc, path)
    if "endpoints_enu" in doc:
        a, b = doc["endpoints_enu"]
        return SpeedTrap(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    if "pixels" in doc:
        if calibration is None or plane is None:
            raise ValidationError(f"{path}: pixel-defined trap needs a calibration and plane")
        from .geometry import pixel_to_world_ray
        from .groundplane import ray_plane_intersect

        pts = []
        for px in doc["pixels"]:
            ray = pixel_to_world_ray(calibration.intrinsics, calibration.pose, np.asarray(px, float))
            pts.append(ray_plane_intersect(ray, plane))
        return SpeedTrap(pts[0], pts[1])
    raise ParseError(f"{path}: trap needs 'endpoints_enu' or 'pixels'")


def write_speeds(path, per_track: dict):
    doc = {
        "format_version": FORMAT_VERSION,
        "speeds": {
            tid: [
                {"crossing_time_s": float(t), "speed_mps": float(s), "speed_kmh": float(s) * 3.6}
                for t, s in readings
            ]
            for tid, readings in sorted(per_track.items())
        },
    }
    _dump_json(path, doc)


def write_heatmap(path, hm: Heatmap):
    _dump_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "origin": [float(v) for v in hm.grid.origin],
            "cell_size_m": hm.grid.cell_size_m,
            "num_x": hm.grid.num_x,
            "num_y": hm.grid.num_y,
            "counts": hm.counts.tolist(),
            "normalized": hm.normalized.tolist(),
            "spillover": hm.spillover,
        },
    )


# ---------------------------------------------------------------------------
# truth sidecar


def write_truth(path, bundle, rendered=None):
    doc = {
        "format_version": FORMAT_VERSION,
        "seed": bundle.spec.seed,
        "enu_origin": _geodetic_to_json(bundle.enu_origin),
        "radius_m": bundle.spec.radius_m,
        "sampling": {
            "num_views": bundle.spec.sampling.num_views,
            "fov_deg": bundle.spec.sampling.fov_deg,
            "out_width": bundle.spec.sampling.out_width,
            "out_height": bundle.spec.sampling.out_height,
        },
        "pano_enu": {pid: [float(v) for v in c] for pid, c in sorted(bundle.pano_enu.items())},
        "view_poses": {vid: _pose_to_json(p) for vid, p in sorted(bundle.view_poses.items())},
        "points": bundle.points.tolist(),
        "road_mark": bundle.road_mark.astype(int).tolist(),
        "plane": {"normal": [float(v) for v in bundle.plane.normal], "offset": bundle.plane.offset},
        "query_intrinsics": _intr_to_json(bundle.query_intrinsics),
        "query_pose": _pose_to_json(bundle.query_pose),
        "marks": [
            {
                "pixel_a": [float(v) for v in pa],
                "pixel_b": [float(v) for v in pb],
                "point_a": [float(v) for v in xa],
                "point_b": [float(v) for v in xb],
                "gt_distance_m": float(d),
            }
            for pa, pb, xa, xb, d in bundle.marks
        ],
        "trap": [
            [float(v) for v in bundle.trap.endpoint_a],
            [float(v) for v in bundle.trap.endpoint_b],
        ],
        "vehicle_tracks": [
            {
                "track_id": t.track_id,
                "timestamps": t.timestamps.tolist(),
                "positions": t.positions.tolist(),
            }
            for t in bundle.vehicle_tracks
        ],
    }
    if rendered is not None:
        doc["outlier_labels"] = {
            f"{a}|{b}": mask.astype(int).tolist()
            for (a, b), mask in sorted(rendered.outlier_labels.items())
        }
        doc["query_outlier_labels"] = rendered.query_outlier_labels.astype(int).tolist()
    _dump_json(path, doc)


def read_truth(path) -> dict:
    """Truth sidecar as a plain dict with reconstructed value objects."""
    doc = _load_json(path)
    _check_version(doc, path)
    from .traffic import GroundTrack

    out = {
        "seed": doc["seed"],
        "enu_origin": _geodetic_from_json(doc["enu_origin"]),
        "radius_m": doc.get("radius_m"),
        "sampling": SamplingConfig(
            doc["sampling"]["num_views"],
            doc["sampling"]["fov_deg"],
            doc["sampling"]["out_width"],
            doc["sampling"]["out_height"],
        ),
        "pano_enu": {k: np.asarray(v, dtype=float) for k, v in doc["pano_enu"].items()},
        "view_poses": {
            vid: _pose_from_json(row, path, f"view_poses[{vid}]")
            for vid, row in doc["view_poses"].items()
        },
        "points": np.asarray(doc["points"], dtype=float),
        "road_mark": np.asarray(doc["road_mark"], dtype=bool),
        "plane": PlaneModel.canonical(np.asarray(doc["plane"]["normal"], float), doc["plane"]["offset"]),
        "query_intrinsics": _intr_from_json(doc["query_intrinsics"], path, "query_intrinsics"),
        "query_pose": _pose_from_json(doc["query_pose"], path, "query_pose"),
        "marks": [
            (
                np.asarray(m["pixel_a"], float),
                np.asarray(m["pixel_b"], float),
                np.asarray(m["point_a"], float),
                np.asarray(m["point_b"], float),
                m["gt_distance_m"],
            )
            for m in doc["marks"]
        ],
        "trap": SpeedTrap(np.asarray(doc["trap"][0], float), np.asarray(doc["trap"][1], float)),
        "vehicle_tracks": [
            GroundTrack(
                t["track_id"], np.asarray(t["timestamps"], float), np.asarray(t["positions"], float)
            )
            for t in doc["vehicle_tracks"]
        ],
    }
    if "outlier_labels" in doc:
        out["outlier_labels"] = {
            tuple(k.split("|")): np.asarray(v, dtype=bool) for k, v in doc["outlier_labels"].items()
        }
        out["query_outlier_labels"] = np.asarray(doc.get("query_outlier_labels", []), dtype=bool)
    return out


# ---------------------------------------------------------------------------
# project manifest


def write_manifest(path, paths: dict, sampling: SamplingConfig, stages: Optional[dict] = None):
    doc = {
        "format_version": FORMAT_VERSION,
        "paths": dict(sorted(paths.items())),
        "sampling": {
            "num_views": sampling.num_views,
            "fov_deg": sampling.fov_deg,
            "out_width": sampling.out_width,
            "out_height": sampling.out_height,
        },
        "stages": dict(sorted((stages or {}).items())),
    }
    _dump_json(path, doc)


def read_manifest(path, check_files: bool = True):
    doc = _load_json(path)
    _check_version(doc, path)
    paths = _field(doc, "paths", path)
    if check_files:
        base = os.path.dirname(os.path.abspath(path))
        for key, rel in paths.items():
            full = os.path.join(base, rel)
            if not os.path.exists(full):
                raise ValidationError(f"{path}: referenced file missing for {key!r}: {rel}")
    s = _field(doc, "sampling", path)
    cfg = SamplingConfig(s["num_views"], s["fov_deg"], s["out_width"], s["out_height"])
    return paths, cfg, doc.get("stages", {})
