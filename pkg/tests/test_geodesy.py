import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pancal import geodesy as gd
from pancal.errors import DegenerateConfigurationError, DomainError, ValidationError
from pancal.geodesy import GeodeticCoord
from pancal.geometry import Rotation

A = gd.WGS84_A
B = gd.WGS84_B


class TestEcef:
    def test_equator_prime_meridian(self):
        e = gd.geodetic_to_ecef(GeodeticCoord(0.0, 0.0, 0.0))
        np.testing.assert_allclose([e.x, e.y, e.z], [A, 0.0, 0.0], atol=1e-9)

    def test_north_pole(self):
        e = gd.geodetic_to_ecef(GeodeticCoord(90.0, 0.0, 0.0))
        np.testing.assert_allclose([e.x, e.y, e.z], [0.0, 0.0, 6356752.314245], atol=1e-6)

    def test_independent_geometry_oracle(self):
        # verify via ellipsoid geometry rather than the conversion formula:
        # the surface foot point must satisfy the ellipsoid equation and the
        # query point must sit 300 m along the surface normal
        g = GeodeticCoord(40.4, -79.9, 300.0)
        e = gd.geodetic_to_ecef(g).as_array()
        lat, lon = math.radians(g.lat_deg), math.radians(g.lon_deg)
        normal = np.array(
            [math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)]
        )
        surface = e - 300.0 * normal
        ellipsoid = (surface[0] ** 2 + surface[1] ** 2) / A**2 + surface[2] ** 2 / B**2
        assert ellipsoid == pytest.approx(1.0, abs=1e-12)
        # and the normal direction at the foot point matches the geodetic normal
        grad = np.array([2 * surface[0] / A**2, 2 * surface[1] / A**2, 2 * surface[2] / B**2])
        grad /= np.linalg.norm(grad)
        assert np.abs(grad - normal).max() < 1e-9

    def test_round_trip_trivials(self):
        g = gd.ecef_to_geodetic(gd.EcefCoord(A, 0.0, 0.0))
        assert (g.lat_deg, g.lon_deg) == pytest.approx((0.0, 0.0), abs=1e-12)
        assert g.alt_m == pytest.approx(0.0, abs=1e-6)
        g = gd.ecef_to_geodetic(gd.EcefCoord(0.0, 0.0, 6356752.314245))
        assert g.lat_deg == pytest.approx(90.0, abs=1e-9)

    def test_round_trip_bulk(self, rng):
        worst = 0.0
        for _ in range(2000):
            g = GeodeticCoord(
                rng.uniform(-89.9, 89.9), rng.uniform(-180.0, 179.999), rng.uniform(-200.0, 9000.0)
            )
            e = gd.geodetic_to_ecef(g)
            back = gd.geodetic_to_ecef(gd.ecef_to_geodetic(e))
            worst = max(worst, float(np.linalg.norm(back.as_array() - e.as_array())))
        assert worst < 1e-6

    def test_near_center_domain_error(self):
        with pytest.raises(DomainError):
            gd.ecef_to_geodetic(gd.EcefCoord(10.0, 10.0, 10.0))

    def test_validation(self):
        with pytest.raises(ValidationError):
            GeodeticCoord(91.0, 0.0, 0.0)
        with pytest.raises(ValidationError):
            GeodeticCoord(0.0, 180.0, 0.0)


class TestEnu:
    def test_origin_maps_to_zero(self):
        origin = GeodeticCoord(40.0, -80.0, 200.0)
        enu = gd.ecef_to_enu(origin, gd.geodetic_to_ecef(origin))
        np.testing.assert_allclose(enu, np.zeros(3), atol=1e-9)

    def test_hundred_meters_north_at_equator(self):
        # oracle: meridian arc of 100 m at the equator spans
        # dphi = 100 / M(0) with M(0) = a (1 - e^2)
        origin = GeodeticCoord(0.0, 10.0, 0.0)
        e2 = gd.WGS84_E2
        m0 = A * (1.0 - e2)
        dphi = math.degrees(100.0 / m0)
        north = GeodeticCoord(dphi, 10.0, 0.0)
        enu = gd.ecef_to_enu(origin, gd.geodetic_to_ecef(north))
        assert enu[0] == pytest.approx(0.0, abs=1e-9)
        assert enu[1] == pytest.approx(100.0, abs=1e-3)
        assert enu[2] == pytest.approx(0.0, abs=1e-3)

    def test_up_component(self):
        origin = GeodeticCoord(40.0, -80.0, 100.0)
        above = GeodeticCoord(40.0, -80.0, 150.0)
        enu = gd.ecef_to_enu(origin, gd.geodetic_to_ecef(above))
        assert enu[2] == pytest.approx(50.0, abs=1e-4)
        assert abs(enu[0]) < 1e-6 and abs(enu[1]) < 1e-6

    def test_enu_round_trip(self, rng):
        origin = GeodeticCoord(40.44, -79.95, 240.0)
        for _ in range(100):
            v = rng.uniform(-500, 500, size=3)
            back = gd.ecef_to_enu(origin, gd.enu_to_ecef(origin, v))
            assert np.abs(back - v).max() < 1e-8

    def test_frame_change_consistency(self, rng):
        o1 = GeodeticCoord(40.44, -79.95, 240.0)
        o2 = GeodeticCoord(40.4402, -79.9497, 242.0)
        R, t = gd.enu_frame_change(o1, o2)
        for _ in range(20):
            v = rng.uniform(-200, 200, size=3)
            direct = gd.ecef_to_enu(o2, gd.enu_to_ecef(o1, v))
            np.testing.assert_allclose(R @ v + t, direct, atol=1e-9)


class TestSimilarity:
    def test_identity(self, rng):
        src = rng.normal(size=(10, 3))
        sim = gd.estimate_similarity(src, src)
        assert sim.scale == pytest.approx(1.0, abs=1e-12)
        assert np.abs(sim.rotation.matrix - np.eye(3)).max() < 1e-12
        assert np.abs(sim.translation).max() < 1e-12

    def test_generative_recovery(self, rng):
        for _ in range(20):
            src = rng.normal(size=(20, 3))
            rot = Rotation.exp(rng.normal(size=3))
            t = rng.normal(size=3) * 10
            dst = 2.5 * src @ rot.matrix.T + t
            sim = gd.estimate_similarity(src, dst)
            assert abs(sim.scale - 2.5) < 1e-9
            assert np.abs(sim.rotation.matrix - rot.matrix).max() < 1e-9
            assert np.abs(sim.translation - t).max() < 1e-9

    def test_scale_covariance(self, rng):
        src = rng.normal(size=(20, 3))
        dst = 2.5 * src + 1.0
        s1 = gd.estimate_similarity(src, dst).scale
        s2 = gd.estimate_similarity(3.0 * src, dst).scale
        assert s2 == pytest.approx(s1 / 3.0, abs=1e-9)

    def test_rotation_equivariance(self, rng):
        # pre-rotating src by Q multiplies the recovered R by Q^T on the right
        for _ in range(10):
            src = rng.normal(size=(15, 3))
            rot = Rotation.exp(rng.normal(size=3))
            dst = 1.7 * src @ rot.matrix.T + rng.normal(size=3)
            q = Rotation.exp(rng.normal(size=3))
            base = gd.estimate_similarity(src, dst)
            pre = gd.estimate_similarity(src @ q.matrix.T, dst)
            np.testing.assert_allclose(
                pre.rotation.matrix, base.rotation.matrix @ q.matrix.T, atol=1e-9
            )

    def test_distance_ratio_preservation(self, rng):
        sim = gd.SimilarityTransform(1.7, Rotation.exp(rng.normal(size=3)), rng.normal(size=3))
        pts = rng.normal(size=(50, 3))
        out = sim.apply(pts)
        for _ in range(100):
            i, j = rng.integers(0, 50, size=2)
            if i == j:
                continue
            d_before = np.linalg.norm(pts[i] - pts[j])
            d_after = np.linalg.norm(out[i] - out[j])
            assert abs(d_after / (sim.scale * d_before) - 1.0) < 1e-12

    def test_degenerate_inputs(self, rng):
        with pytest.raises(DegenerateConfigurationError):
            gd.estimate_similarity(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
        line = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfigurationError):
            gd.estimate_similarity(line, line + 1.0)

    def test_inverse(self, rng):
        sim = gd.SimilarityTransform(0.4, Rotation.exp(rng.normal(size=3)), rng.normal(size=3))
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(sim.inverse().apply(sim.apply(pts)), pts, atol=1e-12)

    def test_ransac_wrapper_rejects_corrupted(self, rng):
        src = rng.normal(size=(30, 3)) * 20
        rot = Rotation.exp(rng.normal(size=3))
        dst = 1.2 * src @ rot.matrix.T + 3.0
        dst[:5] += rng.normal(size=(5, 3)) * 10 + 5.0  # corrupted GPS tags
        sim, mask = gd.estimate_similarity_ransac(src, dst, inlier_threshold_m=0.5, seed=3)
        assert mask[5:].all() and not mask[:5].any()
        assert abs(sim.scale - 1.2) < 1e-9


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-89.0, 89.0),
    st.floats(-179.0, 179.0),
    st.floats(-100.0, 5000.0),
)
def test_round_trip_property(lat, lon, alt):
    g = GeodeticCoord(lat, lon, alt)
    e = gd.geodetic_to_ecef(g)
    back = gd.geodetic_to_ecef(gd.ecef_to_geodetic(e))
    assert np.linalg.norm(back.as_array() - e.as_array()) < 1e-6
