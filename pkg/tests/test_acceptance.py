"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

These are end-to-end statistical checks on the synthetic oracle; the noisy
studies run the full pipeline over 20 seeds and take a few minutes each.
"""

import math
import time

import numpy as np
import pytest

from conftest import point_in_front, random_intrinsics, random_pose
from pancal import cli, geodesy, geometry as geo, io, localize, optim, sfm, synth, traffic
from pancal.geodesy import GeodeticCoord
from pancal.geometry import SamplingConfig
from pancal.groundplane import PlaneModel, distance_error_stats, ray_plane_intersect


def report(criterion, name, ok, detail):
    print(f"[ACCEPTANCE] criterion {criterion} ({name}): {'PASS' if ok else 'FAIL'} -- {detail}")
    return ok


# scene used by the noisy calibration/metrology analogs (criteria 2 and 3)
def study_spec(seed, sigma, outliers, noise_seed):
    return synth.SceneSpec(
        seed=seed,
        num_panos=6,
        num_points=500,
        num_marks=12,
        pairs_per_view=2,
        min_pair_matches=10,
        sampling=SamplingConfig(8, 75.0, 1280, 720),
        noise=synth.NoiseSpec(pixel_sigma=sigma, outlier_fraction=outliers, seed=noise_seed),
    )


# scene used by the sparse-view ablation (criterion 4)
def ablation_spec(seed, num_panos, noise_seed):
    return synth.SceneSpec(
        seed=seed,
        num_panos=num_panos,
        num_points=250,
        num_marks=10,
        pairs_per_view=1,
        min_pair_matches=8,
        sampling=SamplingConfig(6, 95.0, 960, 540),
        noise=synth.NoiseSpec(pixel_sigma=1.0, seed=noise_seed),
    )


def test_criterion_1_noiseless_end_to_end():
    t0 = time.time()
    spec = synth.SceneSpec(seed=0, num_panos=10, num_points=2000, num_marks=12)
    outcome = cli.run_synthetic_pipeline(spec, seed=0, threads=1)
    runtime = time.time() - t0
    assert outcome.error is None, outcome.error
    cal = outcome.calibration_errors
    stats = outcome.distance_stats
    focal = cal.focal_mean_pct()
    dist_rel = cal.distortion_mean_pct() / 100.0
    center = cal.center_err_m
    ok = (
        focal < 0.01
        and dist_rel < 1e-4
        and stats.max_pct < 0.01
        and stats.median_pct < 0.01
        and stats.rmse_pct < 0.01
        and center < 1e-4
        and runtime < 60.0
        and outcome.registered_views == 120
    )
    assert report(
        1,
        "noiseless end-to-end",
        ok,
        f"focal {focal:.2e}% distortion {dist_rel:.2e} rel, distance max/median/rmse "
        f"{stats.max_pct:.2e}/{stats.median_pct:.2e}/{stats.rmse_pct:.2e}%, "
        f"center {center:.2e} m, registered {outcome.registered_views}/120, runtime {runtime:.1f} s",
    )


def test_criterion_2_noisy_calibration_analog():
    focal, pp, dist = [], [], []
    failures = 0
    for s in range(20):
        spec = study_spec(seed=200 + s, sigma=0.5, outliers=0.2, noise_seed=800 + s)
        outcome = cli.run_synthetic_pipeline(spec, seed=0)
        if outcome.calibration_errors is None:
            failures += 1
            focal.append(math.inf)
            pp.append(math.inf)
            dist.append(math.inf)
            continue
        cal = outcome.calibration_errors
        focal.append(cal.focal_mean_pct())
        pp.append(cal.pp_mean_pct())
        dist.append(cal.distortion_mean_pct())
    med_f, med_p, med_d = (float(np.median(v)) for v in (focal, pp, dist))
    ok = med_f < 2.0 and med_p < 2.0 and med_d < 10.0
    assert report(
        2,
        "noisy calibration analog",
        ok,
        f"median focal {med_f:.3f}% pp {med_p:.3f}% distortion {med_d:.3f}% "
        f"(20 seeds, {failures} failures)",
    )


def test_criterion_3_noisy_metrology_analog():
    errors = []
    failures = 0
    for s in range(20):
        spec = study_spec(seed=300 + s, sigma=1.0, outliers=0.0, noise_seed=700 + s)
        outcome = cli.run_synthetic_pipeline(spec, seed=0)
        if outcome.distance_stats is None:
            failures += 1
            continue
        errors.extend(float(v) for v in outcome.distance_stats.errors_pct)
    assert failures == 0, f"{failures} pipeline failures in the metrology study"
    errors = np.array(errors)
    rmse = float(np.sqrt(np.mean(errors**2)))
    worst = float(errors.max())
    ok = rmse < 2.0 and worst < 7.0
    assert report(
        3,
        "noisy metrology analog",
        ok,
        f"pooled over {errors.size} marks from 20 seeds: RMSE {rmse:.3f}% max {worst:.3f}%",
    )


def test_criterion_4_sparse_view_ablation():
    def run_cell(num_panos, s, constraint):
        spec = ablation_spec(seed=400 + s, num_panos=num_panos, noise_seed=600 + s)
        outcome = cli.run_synthetic_pipeline(spec, pano_constraint=constraint, seed=0)
        if outcome.distance_stats is None:
            return math.inf
        return float(np.mean(outcome.distance_stats.errors_pct))

    n3 = [(run_cell(3, s, True), run_cell(3, s, False)) for s in range(20)]
    wins = sum(1 for w, wo in n3 if w < wo)
    finite = [(w, wo) for w, wo in n3 if math.isfinite(w) and math.isfinite(wo)]
    mean_with = float(np.mean([w for w, _ in n3]))
    mean_without = float(np.mean([wo for _, wo in n3]))
    n10 = [(run_cell(10, s, True), run_cell(10, s, False)) for s in range(5)]
    m10_with = float(np.mean([w for w, _ in n10]))
    m10_without = float(np.mean([wo for _, wo in n10]))
    agree = max(m10_with, m10_without) <= 2.0 * min(m10_with, m10_without)
    ok = wins >= 16 and mean_with <= 0.75 * mean_without and agree
    assert report(
        4,
        "sparse-view ablation",
        ok,
        f"N=3: wins {wins}/20, mean with {mean_with:.3f}% vs without {mean_without:.3f}% "
        f"(ratio {mean_with / mean_without:.2f}); N=10: {m10_with:.3f}% vs {m10_without:.3f}%",
    )


def test_criterion_5_jacobian_suite(rng):
    t0 = time.time()
    h = 1e-6
    worst = {"reprojection": 0.0, "pano_translation": 0.0, "pano_rotation": 0.0}

    def rel(fd, an):
        return float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an))))

    checked = 0
    while checked < 1000:
        intr = random_intrinsics(rng)
        pose = random_pose(rng)
        point = point_in_front(rng, pose)
        obs = rng.uniform([0, 0], [intr.width, intr.height])
        try:
            J_pose, J_point, J_intr = optim.reprojection_jacobians(intr, pose, point)
        except Exception:
            continue
        checked += 1
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = geo.ViewPose(pose.rotation @ geo.Rotation.exp(d[:3]), pose.center + d[3:])
            d[k] = -h
            minus = geo.ViewPose(pose.rotation @ geo.Rotation.exp(d[:3]), pose.center + d[3:])
            fd = (
                optim.reprojection_residual(intr, plus, point, obs)
                - optim.reprojection_residual(intr, minus, point, obs)
            ) / (2 * h)
            worst["reprojection"] = max(worst["reprojection"], rel(fd, J_pose[:, k]))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            fd = (
                optim.reprojection_residual(intr, pose, point + d, obs)
                - optim.reprojection_residual(intr, pose, point - d, obs)
            ) / (2 * h)
            worst["reprojection"] = max(worst["reprojection"], rel(fd, J_point[:, k]))
        base = intr.as_params()
        for k in range(8):
            up, dn = base.copy(), base.copy()
            up[k] += h
            dn[k] -= h
            fd = (
                optim.reprojection_residual(intr.with_params(up), pose, point, obs)
                - optim.reprojection_residual(intr.with_params(dn), pose, point, obs)
            ) / (2 * h)
            worst["reprojection"] = max(worst["reprojection"], rel(fd, J_intr[:, k]))

    for _ in range(1000):
        va = geo.ViewPose(geo.Rotation.exp(rng.normal(size=3)), rng.normal(size=3), "p", 1)
        vb = geo.ViewPose(geo.Rotation.exp(rng.normal(size=3)), rng.normal(size=3), "p", 2)
        Jta, Jtb, Jra, Jrb = optim.pano_jacobians(va, vb)
        for k in range(6):
            for which, Jt, Jr in (("a", Jta, Jra), ("b", Jtb, Jrb)):
                d = np.zeros(6)
                d[k] = h
                vp = geo.ViewPose(
                    (va if which == "a" else vb).rotation @ geo.Rotation.exp(d[:3]),
                    (va if which == "a" else vb).center + d[3:],
                    "p",
                    1 if which == "a" else 2,
                )
                d[k] = -h
                vm = geo.ViewPose(
                    (va if which == "a" else vb).rotation @ geo.Rotation.exp(d[:3]),
                    (va if which == "a" else vb).center + d[3:],
                    "p",
                    1 if which == "a" else 2,
                )
                tp, rp = optim.pano_residuals(vp if which == "a" else va, vb if which == "a" else vp, 12)
                tm, rm = optim.pano_residuals(vm if which == "a" else va, vb if which == "a" else vm, 12)
                worst["pano_translation"] = max(worst["pano_translation"], rel((tp - tm) / (2 * h), Jt[:, k]))
                worst["pano_rotation"] = max(worst["pano_rotation"], rel((rp - rm) / (2 * h), Jr[:, k]))
    runtime = time.time() - t0
    ok = all(v < 1e-5 for v in worst.values()) and runtime < 10.0
    assert report(
        5,
        "Jacobian finite-difference suite",
        ok,
        f"worst rel err {worst} over 1000 configs/kind, runtime {runtime:.1f} s",
    )


def test_criterion_6_closed_form_oracles(rng):
    sim_worst = 0.0
    for _ in range(100):
        src = rng.normal(size=(20, 3)) * 5
        rot = geo.Rotation.exp(rng.normal(size=3))
        s = rng.uniform(0.2, 5.0)
        t = rng.normal(size=3) * 10
        dst = s * src @ rot.matrix.T + t
        sim = geodesy.estimate_similarity(src, dst)
        sim_worst = max(
            sim_worst,
            abs(sim.scale - s),
            float(np.abs(sim.rotation.matrix - rot.matrix).max()),
            float(np.abs(sim.translation - t).max()),
        )

    geo_worst = 0.0
    for _ in range(10_000):
        g = GeodeticCoord(rng.uniform(-89.9, 89.9), rng.uniform(-180, 179.999), rng.uniform(-200, 9000))
        e = geodesy.geodetic_to_ecef(g)
        back = geodesy.geodetic_to_ecef(geodesy.ecef_to_geodetic(e))
        geo_worst = max(geo_worst, float(np.linalg.norm(back.as_array() - e.as_array())))

    p3p_ok = 0
    trials = 1000
    intr = geo.CameraIntrinsics(900.0, 900.0, 480.0, 270.0, width=960, height=540)
    for i in range(trials):
        r = np.random.default_rng(10_000 + i)
        pose = geo.ViewPose(geo.Rotation.exp(r.normal(size=3) * 0.5), r.normal(size=3) * 3)
        pts, pix = [], []
        while len(pts) < 30:
            q = np.array([r.uniform(-0.4, 0.4), r.uniform(-0.4, 0.4), r.uniform(2, 30)])
            q[:2] *= q[2]
            p = pose.rotation.apply(q) + pose.center
            try:
                px = geo.project(intr, pose, p)
            except Exception:
                continue
            if 0 <= px[0] < 960 and 0 <= px[1] < 540:
                pts.append(p)
                pix.append(px)
        est, _ = sfm.register_view_p3p(np.array(pts), np.array(pix), intr, seed=i)
        if np.linalg.norm((est.rotation.inverse() @ pose.rotation).log()) < 1e-6:
            p3p_ok += 1

    ray_worst = 0.0
    for _ in range(10_000):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        plane = PlaneModel.canonical(n, rng.uniform(-5, 5))
        origin = rng.uniform(-10, 10, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if abs(float(d @ plane.normal)) < 1e-3:
            continue
        sd = float(plane.signed_distance(origin))
        if sd * float(d @ plane.normal) > 0:
            d = -d
        if sd == 0.0:
            continue
        hit = ray_plane_intersect((origin, d), plane)
        ray_worst = max(ray_worst, abs(float(plane.signed_distance(hit))))

    ok = sim_worst < 1e-9 and geo_worst < 1e-6 and p3p_ok >= 999 and ray_worst < 1e-12
    assert report(
        6,
        "closed-form oracles",
        ok,
        f"similarity {sim_worst:.2e}, geodetic round trip {geo_worst:.2e} m, "
        f"P3P {p3p_ok}/{trials}, ray-plane {ray_worst:.2e}",
    )


def test_criterion_7_speed_and_heatmap(rng):
    plane = PlaneModel.canonical([0.0, 0.0, 1.0], 0.0)
    trap = traffic.SpeedTrap(np.array([0.0, -6.0, 0.0]), np.array([0.0, 6.0, 0.0]))

    def vehicle(speed=15.0, rate=5.0):
        ts = np.arange(31) / rate
        xs = -45.0 + speed * ts
        return traffic.GroundTrack("v", ts, np.column_stack([xs, np.full_like(xs, 1.0), np.zeros_like(xs)]))

    exact = traffic.trap_speed(vehicle(), trap, plane)
    exact_ok = len(exact) == 1 and abs(exact[0][1] - 15.0) < 1e-9

    # noisy pixels through a true elevated calibration
    intr = geo.CameraIntrinsics(1300.0, 1300.0, 800.0, 600.0, width=1600, height=1200)
    center = np.array([0.0, -30.0, 8.0])
    fwd = np.array([0.0, 30.0, -8.0])
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0, 0, 1.0])
    right /= np.linalg.norm(right)
    pose = geo.ViewPose(geo.Rotation(np.column_stack([right, np.cross(fwd, right), fwd])), center)
    rel_errs = []
    for s in range(20):
        r = np.random.default_rng(50 + s)
        track = vehicle()
        pix, z = geo.project_points(intr, pose, track.positions)
        ok_mask = (z > 1) & (pix[:, 0] >= 0) & (pix[:, 0] < 1600) & (pix[:, 1] >= 0) & (pix[:, 1] < 1200)
        noisy = pix[ok_mask] + r.normal(scale=0.5, size=(int(ok_mask.sum()), 2))
        img = traffic.ImageTrack("v", track.timestamps[ok_mask], noisy)
        lifted, _ = traffic.lift_track(intr, pose, plane, img)
        readings = traffic.trap_speed(lifted, trap, plane)
        if readings:
            rel_errs.append(abs(readings[0][1] - 15.0) / 15.0)
    noisy_ok = len(rel_errs) == 20 and float(np.mean(rel_errs)) < 0.05

    grid = traffic.HeatmapGrid(np.array([-50.0, -10.0]), 1.0, 100, 20)
    tracks = []
    for i in range(4):
        ts = np.arange(40.0)
        pts = np.column_stack([rng.uniform(-45, 45, 40), rng.uniform(-8, 8, 40), np.zeros(40)])
        tracks.append(traffic.GroundTrack(f"t{i}", ts, pts))
    hm = traffic.activity_heatmap(tracks, grid, plane)
    tally = np.zeros_like(hm.counts)
    spill = 0
    for tr in tracks:
        for p in tr.positions:
            ix = int(np.floor((p[0] - grid.origin[0]) / grid.cell_size_m))
            iy = int(np.floor((p[1] - grid.origin[1]) / grid.cell_size_m))
            if 0 <= ix < grid.num_x and 0 <= iy < grid.num_y:
                tally[iy, ix] += 1
            else:
                spill += 1
    heat_ok = np.array_equal(hm.counts, tally) and hm.spillover == spill

    base = vehicle(speed=13.0)
    shifted = traffic.GroundTrack("v", base.timestamps + 1234.5, base.positions)
    v0 = traffic.trap_speed(base, trap, plane)[0][1]
    v1 = traffic.trap_speed(shifted, trap, plane)[0][1]
    shift_ok = abs(v1 / v0 - 1.0) < 1e-12
    sc = 3.0
    scaled = traffic.GroundTrack("v", base.timestamps, base.positions * sc)
    trap_s = traffic.SpeedTrap(trap.endpoint_a * sc, trap.endpoint_b * sc)
    v2 = traffic.trap_speed(scaled, trap_s, plane)[0][1]
    scale_ok = abs(v2 / (sc * v0) - 1.0) < 1e-12

    ok = exact_ok and noisy_ok and heat_ok and shift_ok and scale_ok
    assert report(
        7,
        "speed trap and heatmap",
        ok,
        f"noiseless err {abs(exact[0][1] - 15.0):.2e}, noisy mean rel err "
        f"{float(np.mean(rel_errs)):.4f}, heatmap exact {heat_ok}, "
        f"shift/scale invariance {shift_ok}/{scale_ok}",
    )


def test_criterion_8_determinism(tmp_path):
    import hashlib

    scene = [
        "--panos", "3", "--points", "400", "--marks", "8",
        "--views-per-pano", "6", "--fov", "85", "--width", "960", "--height", "540",
    ]
    sampling = ["--views-per-pano", "6", "--fov", "85", "--width", "960", "--height", "540"]
    digests = []
    for run_id, threads in (("r1", 1), ("r2", 1), ("r4", 4)):
        d = tmp_path / run_id
        base = ["--seed", "0", "--threads", str(threads), "--out-dir", str(d)]
        assert cli.main(base + ["synth", *scene]) == 0
        assert cli.main(base + ["reconstruct", *sampling, "--road-labels", str(d / "road_labels.csv")]) == 0
        assert cli.main(base + ["georegister", "--origin", "40.44,-79.95,240.0"]) == 0
        assert cli.main(base + ["fit-plane"]) == 0
        assert cli.main(base + ["localize", "--image-size", "1600x1200"]) == 0
        assert cli.main(base + ["measure"]) == 0
        assert cli.main(base + ["speed"]) == 0
        assert cli.main(base + ["heatmap"]) == 0
        files = sorted(p.name for p in d.iterdir())
        digests.append([hashlib.sha256((d / f).read_bytes()).hexdigest() for f in files])
    ok = digests[0] == digests[1] == digests[2]
    assert report(
        8,
        "byte-identical determinism",
        ok,
        f"{len(digests[0])} stage files identical across reruns and threads 1 vs 4",
    )
