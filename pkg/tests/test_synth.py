import numpy as np
import pytest

from pancal import geometry as geo
from pancal import synth
from pancal.errors import ValidationError
from pancal.geometry import SamplingConfig


def small_spec(**kw):
    defaults = dict(
        seed=7,
        num_panos=4,
        num_points=400,
        num_marks=8,
        sampling=SamplingConfig(8, 75.0, 1280, 720),
    )
    defaults.update(kw)
    return synth.SceneSpec(**defaults)


class TestGenerateScene:
    def test_determinism_bit_identical(self):
        b1 = synth.generate_scene(small_spec())
        b2 = synth.generate_scene(small_spec())
        np.testing.assert_array_equal(b1.points, b2.points)
        np.testing.assert_array_equal(b1.road_mark, b2.road_mark)
        assert b1.query_intrinsics == b2.query_intrinsics
        np.testing.assert_array_equal(b1.query_pose.center, b2.query_pose.center)
        for vid in b1.view_poses:
            np.testing.assert_array_equal(b1.view_poses[vid].center, b2.view_poses[vid].center)
            np.testing.assert_array_equal(
                b1.view_poses[vid].rotation.matrix, b2.view_poses[vid].rotation.matrix
            )

    def test_zero_vehicles(self):
        bundle = synth.generate_scene(small_spec(vehicles=synth.VehicleSpec(count=0)))
        assert bundle.vehicle_tracks == []
        assert bundle.points.shape[0] == 400

    def test_point_visibility_recount(self):
        # direct recount oracle: every emitted point projects into >= 2 views
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        counts = np.zeros(bundle.points.shape[0], dtype=int)
        for pose in bundle.view_poses.values():
            pix, z = geo.project_points(bundle.db_intrinsics, pose, bundle.points)
            ok = (
                (z > 0.5)
                & (pix[:, 0] >= 0)
                & (pix[:, 0] < spec.sampling.out_width)
                & (pix[:, 1] >= 0)
                & (pix[:, 1] < spec.sampling.out_height)
            )
            counts += ok
        assert (counts >= 2).all()

    def test_road_points_on_plane(self):
        bundle = synth.generate_scene(small_spec())
        road = bundle.points[bundle.road_mark]
        assert np.abs(bundle.plane.signed_distance(road)).max() < 1e-9

    def test_marks_visible_with_true_distances(self):
        bundle = synth.generate_scene(small_spec())
        assert len(bundle.marks) == 8
        for pa, pb, a, b, d in bundle.marks:
            assert d == pytest.approx(float(np.linalg.norm(a - b)), abs=1e-12)
            assert abs(float(bundle.plane.signed_distance(a))) < 1e-9
            got = geo.project(bundle.query_intrinsics, bundle.query_pose, a)
            np.testing.assert_allclose(got, pa, atol=1e-9)

    def test_invalid_specs(self):
        with pytest.raises(ValidationError, match="N >= 2"):
            synth.generate_scene(small_spec(num_panos=1))
        with pytest.raises(ValidationError):
            synth.generate_scene(small_spec(num_points=2))


class TestRenderMatches:
    def test_noiseless_reprojects_exactly(self):
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        rendered = synth.render_matches(bundle, spec.sampling)
        intr = spec.sampling.ideal_intrinsics()
        from pancal.sfm import view_id_of
        from pancal.geometry import sample_perspective_views

        poses = {}
        for pano in bundle.panos:
            for pose, _ in sample_perspective_views(pano, spec.sampling, center=bundle.pano_enu[pano.pano_id]):
                poses[view_id_of(pano.pano_id, pose.slot_index)] = pose
        pair = rendered.matches.pairs[0]
        pose_a = poses[pair.view_a]
        # every pixel in the pair is an exact projection of some scene point
        proj, _ = geo.project_points(intr, pose_a, bundle.points)
        for px in pair.pixels_a[:20]:
            assert np.min(np.linalg.norm(proj - px, axis=1)) < 1e-9

    def test_outlier_fraction_counted(self):
        spec = small_spec(noise=synth.NoiseSpec(pixel_sigma=0.5, outlier_fraction=0.3, seed=11))
        bundle = synth.generate_scene(spec)
        rendered = synth.render_matches(bundle, spec.sampling)
        total = 0
        outliers = 0
        for mask in rendered.outlier_labels.values():
            total += mask.size
            outliers += int((~mask).sum())
        frac = outliers / total
        assert abs(frac - 0.3) < 0.02  # binomial tolerance plus rounding

    def test_query_cheirality_filter(self):
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        rendered = synth.render_matches(bundle, spec.sampling)
        # no query match can reference a point behind the query camera
        for q_px, vid, db_px in rendered.query_matches[::7]:
            assert 0 <= q_px[0] < bundle.query_intrinsics.width
            assert 0 <= q_px[1] < bundle.query_intrinsics.height

    def test_noise_seed_isolation(self):
        spec_a = small_spec(noise=synth.NoiseSpec(pixel_sigma=1.0, seed=1))
        spec_b = small_spec(noise=synth.NoiseSpec(pixel_sigma=1.0, seed=2))
        b1 = synth.generate_scene(spec_a)
        b2 = synth.generate_scene(spec_b)
        np.testing.assert_array_equal(b1.points, b2.points)  # geometry unchanged
        r1 = synth.render_matches(b1, spec_a.sampling)
        r2 = synth.render_matches(b2, spec_b.sampling)
        p1, p2 = r1.matches.pairs[0], r2.matches.pairs[0]
        assert not np.array_equal(p1.pixels_a, p2.pixels_a)  # noise differs

    def test_same_observation_same_pixel_across_pairs(self):
        # one noisy pixel per (view, point): rows in different pairs that
        # reference the same observation must agree exactly
        spec = small_spec(noise=synth.NoiseSpec(pixel_sigma=1.0, seed=3))
        bundle = synth.generate_scene(spec)
        rendered = synth.render_matches(bundle, spec.sampling)
        seen = {}
        agreements = 0
        for pair in rendered.matches.pairs:
            for side, vid in ((pair.pixels_a, pair.view_a), (pair.pixels_b, pair.view_b)):
                for px in side:
                    key = (vid, round(float(px[0]), 6), round(float(px[1]), 6))
                    seen.setdefault(key, 0)
                    seen[key] += 1
        agreements = sum(1 for c in seen.values() if c > 1)
        assert agreements > 0  # shared observations exist and collide exactly


class TestEvaluate:
    def test_perfect_result_zero_errors(self):
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        from pancal.localize import LocalizationResult

        result = LocalizationResult(
            intrinsics=bundle.query_intrinsics,
            pose=bundle.query_pose,
            inlier_count=100,
            rms_px=0.0,
            frame="metric",
        )
        cal = synth.evaluate_localization(result, bundle)
        assert cal.focal_mean_pct() == 0.0
        assert cal.pp_mean_pct() == 0.0
        assert cal.distortion_mean_pct() == 0.0
        assert cal.rotation_err_deg == pytest.approx(0.0, abs=1e-12)

    def test_two_percent_focal_reports_two(self):
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        from dataclasses import replace

        from pancal.localize import LocalizationResult

        intr = replace(bundle.query_intrinsics, fx=bundle.query_intrinsics.fx * 1.02)
        result = LocalizationResult(intr, bundle.query_pose, 100, 0.0, frame="metric")
        cal = synth.evaluate_localization(result, bundle)
        assert cal.focal_pct["fx"] == pytest.approx(2.0, abs=1e-9)
        assert cal.focal_pct["fy"] == pytest.approx(0.0, abs=1e-12)

    def test_frame_mismatch_rejected(self):
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        from pancal.localize import LocalizationResult

        result = LocalizationResult(bundle.query_intrinsics, bundle.query_pose, 10, 0.0)
        with pytest.raises(ValidationError, match="frame"):
            synth.evaluate_localization(result, bundle, metric_frame=False)

    def test_distance_stats_cross_module_consistency(self):
        spec = small_spec()
        bundle = synth.generate_scene(spec)
        rendered = synth.render_matches(bundle, spec.sampling)
        est, gt, stats = synth.evaluate_distances(
            bundle.query_intrinsics, bundle.query_pose, bundle.plane, rendered.mark_pixels
        )
        from pancal.groundplane import distance_error_stats, measure_ground_distance

        manual = [
            measure_ground_distance(bundle.query_intrinsics, bundle.query_pose, bundle.plane, pa, pb)
            for pa, pb, _ in rendered.mark_pixels
        ]
        manual_stats = distance_error_stats(manual, [d for _, _, d in rendered.mark_pixels])
        assert stats.rmse_pct == manual_stats.rmse_pct
        assert stats.max_pct < 1e-8  # noiseless marks measure exactly

    def test_true_trap_speeds_constant_velocity(self):
        spec = small_spec(vehicles=synth.VehicleSpec(count=2, speed_range_mps=(10.0, 12.0)))
        bundle = synth.generate_scene(spec)
        speeds = synth.true_trap_speeds(bundle)
        assert any(len(v) > 0 for v in speeds.values())
        for tid, readings in speeds.items():
            track = next(t for t in bundle.vehicle_tracks if t.track_id == tid)
            if not readings:
                continue
            seg = np.linalg.norm(np.diff(track.positions[:2], axis=0)) / np.diff(track.timestamps[:2])
            assert readings[0][1] == pytest.approx(float(seg), rel=1e-9)
