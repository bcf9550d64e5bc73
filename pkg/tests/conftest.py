import numpy as np
import pytest

from pancal import geometry as geo
from pancal.geodesy import GeodeticCoord


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pano():
    return geo.PanoramaMeta(
        "pano_test", GeodeticCoord(40.44, -79.95, 240.0), heading_deg=30.0, width=8192, height=4096
    )


@pytest.fixture
def simple_intr():
    return geo.CameraIntrinsics(fx=900.0, fy=900.0, px=480.0, py=270.0, width=960, height=540)


def random_intrinsics(rng, distortion_scale=0.3):
    """Random valid camera with bounded distortion, for round-trip tests."""
    while True:
        intr = geo.CameraIntrinsics(
            fx=rng.uniform(400, 1400),
            fy=rng.uniform(400, 1400),
            px=rng.uniform(300, 700),
            py=rng.uniform(200, 400),
            k1=rng.uniform(-distortion_scale, distortion_scale),
            k2=rng.uniform(-distortion_scale / 3, distortion_scale / 3),
            p1=rng.uniform(-0.01, 0.01),
            p2=rng.uniform(-0.01, 0.01),
            width=1024,
            height=768,
        )
        try:
            return intr.validate()
        except Exception:
            continue


def random_pose(rng, scale=3.0):
    return geo.ViewPose(geo.Rotation.exp(rng.normal(size=3)), rng.normal(size=3) * scale)


def point_in_front(rng, pose, depth_range=(1.0, 20.0)):
    """World point with positive depth for the given pose."""
    q = np.array(
        [rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(*depth_range)]
    )
    q[:2] *= q[2]
    return pose.rotation.apply(q) + pose.center
