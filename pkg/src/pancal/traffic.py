"""Traffic analytics on calibrated cameras: track lifting, speed traps, heatmaps.

Detection and tracking are out of scope; ImageTrack is their output. Each
track carries one reference point per sample (typically the detection-box
bottom center), so speeds are reported for that point rather than the vehicle
front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BehindCameraError,
    NoIntersectionError,
    RangeError,
    TrackUnusableError,
    ValidationError,
)
from .geometry import CameraIntrinsics, ViewPose, pixel_to_world_ray
from .groundplane import PlaneModel, ray_plane_intersect

_ON_PLANE_TOL = 1e-9


@dataclass(frozen=True)
class ImageTrack:
    track_id: str
    timestamps: np.ndarray  # (N,) seconds, strictly increasing
    pixels: np.ndarray  # (N, 2)

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        px = np.array(self.pixels, dtype=float).reshape(-1, 2)
        if ts.shape[0] != px.shape[0] or ts.shape[0] < 2:
            raise ValidationError("image track needs >= 2 (timestamp, pixel) samples")
        if not np.all(np.diff(ts) > 0):
            raise ValidationError("image track timestamps must be strictly increasing")
        ts.flags.writeable = False
        px.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "pixels", px)

    def __len__(self):
        return self.timestamps.shape[0]


@dataclass(frozen=True)
class GroundTrack:
    track_id: str
    timestamps: np.ndarray  # (N,)
    positions: np.ndarray  # (N, 3) on the plane

    def __len__(self):
        return self.timestamps.shape[0]


@dataclass(frozen=True)
class SpeedTrap:
    """A line segment on the ground plane."""

    endpoint_a: np.ndarray
    endpoint_b: np.ndarray

    def __post_init__(self):
        a = np.array(self.endpoint_a, dtype=float).reshape(3)
        b = np.array(self.endpoint_b, dtype=float).reshape(3)
        if np.linalg.norm(a - b) < 1e-12:
            raise ValidationError("speed trap endpoints must be distinct")
        a.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "endpoint_a", a)
        object.__setattr__(self, "endpoint_b", b)

    def validate_on_plane(self, plane: PlaneModel):
        for name, p in (("endpoint_a", self.endpoint_a), ("endpoint_b", self.endpoint_b)):
            if abs(float(plane.signed_distance(p))) > _ON_PLANE_TOL:
                raise ValidationError(f"trap {name} is not on the ground plane")
        return self


@dataclass
class HeatmapGrid:
    origin: np.ndarray  # (2,) in-plane coordinates of cell (0, 0)
    cell_size_m: float
    num_x: int
    num_y: int

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        if self.cell_size_m <= 0:
            raise ValidationError("heatmap cell size must be positive")
        if self.num_x <= 0 or self.num_y <= 0:
            raise ValidationError("heatmap grid must have positive extent")


@dataclass
class Heatmap:
    grid: HeatmapGrid
    counts: np.ndarray  # (num_y, num_x) int
    normalized: np.ndarray  # counts / max(counts) when max > 0
    spillover: int = 0


@dataclass
class LiftReport:
    dropped: list = field(default_factory=list)  # (sample index, reason)


def lift_track(
    intr: CameraIntrinsics,
    pose: ViewPose,
    plane: PlaneModel,
    track: ImageTrack,
):
    """Cast each track pixel onto the ground plane.

    Samples whose ray misses the plane (horizon or behind the camera) are
    dropped and reported per sample. Raises TrackUnusableError when fewer
    than 2 samples survive. Returns (GroundTrack, LiftReport).
    """
    times, points = [], []
    report = LiftReport()
    for i in range(len(track)):
        try:
            ray = pixel_to_world_ray(intr, pose, track.pixels[i])
            hit = ray_plane_intersect(ray, plane)
        except (NoIntersectionError, BehindCameraError, RangeError) as exc:
            report.dropped.append((i, str(exc)))
            continue
        times.append(track.timestamps[i])
        points.append(hit)
    if len(times) < 2:
        raise TrackUnusableError(
            f"track {track.track_id!r}: only {len(times)} samples intersect the plane"
        )
    return GroundTrack(track.track_id, np.array(times), np.array(points)), report


def trap_speed(track: GroundTrack, trap: SpeedTrap, plane: Optional[PlaneModel] = None, window: int = 0):
    """Crossing instants and speeds of a track over a virtual speed trap.

    Each consecutive track segment whose in-plane projection properly crosses
    the trap segment yields one reading: the crossing time is linearly
    interpolated inside the segment and the speed is segment length divided by
    segment duration (window > 0 averages over +-window extra segments).
    Returns a list of (crossing_time_s, speed_mps) in time order.
    """
    if plane is None:
        plane = _implied_plane(trap)
    e1, e2 = plane.basis()
    to2d = lambda p: np.column_stack([p @ e1, p @ e2])  # noqa: E731
    pts2 = to2d(track.positions)
    a2, b2 = to2d(trap.endpoint_a[None])[0], to2d(trap.endpoint_b[None])[0]
    d2 = b2 - a2
    trap_len2 = float(d2 @ d2)
    # signed side of the trap line per sample; a sign flip marks a crossing.
    # samples landing exactly on the line resolve against the last nonzero
    # side, so a vertex crossing counts once and a mere touch not at all
    sides = (pts2[:, 0] - a2[0]) * d2[1] - (pts2[:, 1] - a2[1]) * d2[0]
    out = []
    last_nonzero = 0.0
    for i in range(len(track) - 1):
        d0, d1 = sides[i], sides[i + 1]
        ref = d0 if d0 != 0.0 else last_nonzero
        if d0 != 0.0:
            last_nonzero = d0
        if d1 == 0.0 or ref == 0.0 or ref * d1 > 0.0:
            continue
        s = 0.0 if d0 == 0.0 else float(d0 / (d0 - d1))
        hit = pts2[i] + s * (pts2[i + 1] - pts2[i])
        u = float((hit - a2) @ d2) / trap_len2
        if not (0.0 <= u <= 1.0):
            continue
        t0, t1 = track.timestamps[i], track.timestamps[i + 1]
        lo = max(0, i - window)
        hi = min(len(track) - 1, i + 1 + window)
        length = float(np.sum(np.linalg.norm(np.diff(track.positions[lo : hi + 1], axis=0), axis=1)))
        duration = float(track.timestamps[hi] - track.timestamps[lo])
        if duration <= 0:
            continue
        out.append((float(t0 + s * (t1 - t0)), length / duration))
    return out


def _implied_plane(trap: SpeedTrap) -> PlaneModel:
    # fall back to the horizontal plane through the trap for 2D projection
    z = 0.5 * (trap.endpoint_a[2] + trap.endpoint_b[2])
    return PlaneModel.canonical([0.0, 0.0, 1.0], -z)


def activity_heatmap(tracks, grid: HeatmapGrid, plane: Optional[PlaneModel] = None) -> Heatmap:
    """Grid counts of track samples on the plane, normalized by the max count.

    Samples outside the grid are ignored but tallied in Heatmap.spillover.
    """
    counts = np.zeros((grid.num_y, grid.num_x), dtype=np.int64)
    spill = 0
    if plane is None:
        plane = PlaneModel.canonical([0.0, 0.0, 1.0], 0.0)
    e1, e2 = plane.basis()
    for track in tracks:
        xy = np.column_stack([track.positions @ e1, track.positions @ e2])
        ij = np.floor((xy - grid.origin) / grid.cell_size_m).astype(int)
        ok = (ij[:, 0] >= 0) & (ij[:, 0] < grid.num_x) & (ij[:, 1] >= 0) & (ij[:, 1] < grid.num_y)
        spill += int((~ok).sum())
        np.add.at(counts, (ij[ok, 1], ij[ok, 0]), 1)
    peak = counts.max() if counts.size else 0
    normalized = counts / peak if peak > 0 else np.zeros_like(counts, dtype=float)
    return Heatmap(grid=grid, counts=counts, normalized=normalized.astype(float), spillover=spill)
