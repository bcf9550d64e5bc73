import math
from dataclasses import replace

import numpy as np
import pytest

from pancal import geodesy, geometry as geo, localize, sfm, synth
from pancal.errors import LocalizationImpossibleError, ValidationError
from pancal.geometry import SamplingConfig


def pipeline_fixture(seed=0, sigma=0.0, outliers=0.0, panos=4, points=500):
    spec = synth.SceneSpec(
        seed=seed,
        num_panos=panos,
        num_points=points,
        num_marks=8,
        sampling=SamplingConfig(8, 75.0, 1280, 720),
        noise=synth.NoiseSpec(pixel_sigma=sigma, outlier_fraction=outliers, seed=seed + 900),
    )
    bundle = synth.generate_scene(spec)
    rendered = synth.render_matches(bundle, spec.sampling)
    recon = sfm.reconstruct(
        bundle.panos, spec.sampling, rendered.matches, sfm.ReconstructOptions(seed=0)
    )
    metric, _ = geodesy.georegister(recon, rendered.pano_tags, enu_origin=bundle.enu_origin)
    return spec, bundle, rendered, metric


class TestLiftMatches:
    def test_exact_observation_resolves(self):
        _, bundle, rendered, metric = pipeline_fixture()
        qm = localize.lift_matches(metric, rendered.query_matches)
        assert len(qm) > 100
        # every resolved point is a triangulated reconstruction point
        for pid in qm.point_ids:
            assert pid in metric.points

    def test_snap_radius_drops_far_pixels(self):
        _, bundle, rendered, metric = pipeline_fixture()
        q_px, vid, db_px = rendered.query_matches[0]
        shifted = [(q_px, vid, np.asarray(db_px) + 5.0)]
        with pytest.raises(LocalizationImpossibleError):
            localize.lift_matches(metric, shifted)

    def test_outlier_fraction_drops_to_expected_count(self):
        # db pixels pointing at random (non-track) locations do not resolve;
        # one entry per point makes resolved count = genuine count up to the
        # rare accidental snap of a random pixel onto an observation
        spec, bundle, rendered, metric = pipeline_fixture(seed=2)
        noisy = synth.render_matches(
            bundle,
            spec.sampling,
            synth.NoiseSpec(outlier_fraction=0.2, seed=902),
            query_views_per_point=1,
        )
        labels = noisy.query_outlier_labels
        qm = localize.lift_matches(metric, noisy.query_matches)
        genuine = int(labels.sum())
        assert abs(len(qm) - genuine) <= max(3, 0.03 * len(labels))


class TestLocalizeQuery:
    def test_noiseless_recovers_everything(self):
        _, bundle, rendered, metric = pipeline_fixture()
        qm = localize.lift_matches(metric, rendered.query_matches)
        res = localize.localize_query(
            qm,
            (bundle.query_intrinsics.width, bundle.query_intrinsics.height),
            localize.LocalizeOptions(seed=0),
            scale_state=metric.scale_state,
        )
        cal = synth.evaluate_localization(res, bundle)
        assert cal.focal_mean_pct() < 1e-4
        assert cal.distortion_mean_pct() < 1e-3
        assert cal.center_err_m < 1e-5
        assert res.frame == "metric"
        assert not res.refinement_diverged
        # grid coverage: the selected grid FOV is within one step of truth
        true_fov = 2 * math.degrees(math.atan(bundle.query_intrinsics.width / 2 / bundle.query_intrinsics.fx))
        best = max(res.focal_trace, key=lambda c: (c.inliers, -c.rms_px))
        assert abs(best.fov_deg - true_fov) <= 5.0 + 1e-9

    def test_self_localization_matches_database_view(self):
        _, bundle, rendered, metric = pipeline_fixture()
        vid = metric.registered_view_ids()[5]
        rec = metric.views[vid]
        intr = metric.intrinsics[rec.intrinsics_id]
        by_view = metric.observations_by_view()
        rows = [(px, vid, px) for pid, px in by_view[vid] if pid in metric.points]
        qm = localize.lift_matches(metric, rows)
        res = localize.localize_query(
            qm, (intr.width, intr.height), localize.LocalizeOptions(seed=0), metric.scale_state
        )
        assert np.linalg.norm(res.pose.center - rec.pose.center) < 1e-6
        diff = res.pose.rotation.inverse() @ rec.pose.rotation
        assert np.linalg.norm(diff.log()) < 1e-6

    def test_too_few_correspondences(self, rng, simple_intr):
        qm = localize.QueryMatches(rng.uniform(0, 500, (5, 2)), list(range(5)), rng.normal(size=(5, 3)))
        with pytest.raises(ValidationError):
            localize.localize_query(qm, (960, 540))

    def test_thread_count_invariance(self):
        _, bundle, rendered, metric = pipeline_fixture()
        qm = localize.lift_matches(metric, rendered.query_matches)
        size = (bundle.query_intrinsics.width, bundle.query_intrinsics.height)
        r1 = localize.localize_query(qm, size, localize.LocalizeOptions(seed=0, threads=1), "metric")
        r4 = localize.localize_query(qm, size, localize.LocalizeOptions(seed=0, threads=4), "metric")
        assert r1.intrinsics == r4.intrinsics
        np.testing.assert_array_equal(r1.pose.center, r4.pose.center)


class TestRefineQuery:
    def test_distortion_free_query_with_estimation_off(self):
        # estimate_distortion=False on a distortion-free camera: distortion
        # outputs stay exactly zero
        spec, bundle, rendered, metric = pipeline_fixture(seed=4)
        qm = localize.lift_matches(metric, rendered.query_matches)
        opts = localize.LocalizeOptions(seed=0, estimate_distortion=False)
        res = localize.localize_query(
            qm, (bundle.query_intrinsics.width, bundle.query_intrinsics.height), opts, "metric"
        )
        assert res.intrinsics.k1 == res.intrinsics.k2 == 0.0
        assert res.intrinsics.p1 == res.intrinsics.p2 == 0.0

    def test_refinement_never_increases_inlier_rms(self):
        _, bundle, rendered, metric = pipeline_fixture(seed=5, sigma=0.5)
        qm = localize.lift_matches(metric, rendered.query_matches)
        opts = localize.LocalizeOptions(seed=0)
        res = localize.localize_query(
            qm, (bundle.query_intrinsics.width, bundle.query_intrinsics.height), opts, "metric"
        )
        assert not res.refinement_diverged

    def test_metric_consistency_through_registration(self):
        # localizing before vs after georegistration differs by exactly the
        # registration similarity
        spec, bundle, rendered, _ = pipeline_fixture(seed=6)
        recon = sfm.reconstruct(
            bundle.panos, spec.sampling, rendered.matches, sfm.ReconstructOptions(seed=0)
        )
        metric, sim = geodesy.georegister(recon, rendered.pano_tags, enu_origin=bundle.enu_origin)
        size = (bundle.query_intrinsics.width, bundle.query_intrinsics.height)
        qa = localize.lift_matches(recon, rendered.query_matches)
        qb = localize.lift_matches(metric, rendered.query_matches)
        ra = localize.localize_query(qa, size, localize.LocalizeOptions(seed=0), recon.scale_state)
        rb = localize.localize_query(qb, size, localize.LocalizeOptions(seed=0), metric.scale_state)
        mapped = sim.transform_pose(ra.pose)
        assert np.linalg.norm(mapped.center - rb.pose.center) < 1e-6
        diff = mapped.rotation.inverse() @ rb.pose.rotation
        assert np.linalg.norm(diff.log()) < 1e-7

    def test_joint_mode_runs(self):
        _, bundle, rendered, metric = pipeline_fixture(seed=7, panos=3, points=300)
        qm = localize.lift_matches(metric, rendered.query_matches)
        opts = localize.LocalizeOptions(seed=0)
        res = localize.localize_query(
            qm, (bundle.query_intrinsics.width, bundle.query_intrinsics.height), opts, "metric"
        )
        joint, refined_map = localize.refine_query_joint(metric, res, qm, opts)
        cal = synth.evaluate_localization(joint, bundle)
        assert cal.focal_mean_pct() < 0.1
        assert "query" in refined_map.views


class TestDiagnostics:
    def test_rank_database_views(self):
        raw = [((0, 0), "a#1", (0, 0)), ((0, 0), "b#2", (0, 0)), ((0, 0), "a#1", (0, 0))]
        ranked = localize.rank_database_views(raw)
        assert ranked[0] == ("a#1", 2)
