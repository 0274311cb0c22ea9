import math

import numpy as np
import pytest

from ctsr.geometry import ScannerGeometry, default_geometry, make_geometry, ray_for_pixel


def small_geom(n_angles=8):
    return ScannerGeometry(5.0, 8.0, (24, 20), (0.4, 0.45), n_angles)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def test_angle_step_is_1p8_degrees():
    g = make_geometry({"dso": 6, "dsd": 9, "detector": [96, 96], "spacing": [0.048, 0.048],
                       "n_angles": 100, "angle_range": [0, 180]})
    assert math.degrees(g.angle_step) == pytest.approx(1.8)
    assert g.angles[-1] < math.pi


def test_source_at_negative_x_for_angle_zero():
    g = small_geom()
    src, _ = g.frame(0)
    np.testing.assert_allclose(src, [-5.0, 0.0, 0.0], atol=1e-15)


def test_dso_must_be_below_dsd():
    with pytest.raises(ValueError):
        ScannerGeometry(8.0, 8.0, (24, 24), (0.4, 0.4), 4)


def test_footprint_check():
    with pytest.raises(ValueError):
        ScannerGeometry(5.0, 8.0, (8, 8), (0.1, 0.1), 4)


def test_unknown_config_keys():
    with pytest.raises(ValueError):
        make_geometry({"dso": 6, "dsd": 9, "detector": [96, 96], "spacing": [0.05, 0.05],
                       "n_angles": 10, "tilt": 3})


def test_central_ray_along_x():
    g = ScannerGeometry(5.0, 8.0, (25, 25), (0.4, 0.4), 4)
    ray = ray_for_pixel(g, 0, 12, 12)
    np.testing.assert_allclose(ray.direction, [1, 0, 0], atol=1e-12)
    assert ray.t_near == pytest.approx(4.0) and ray.t_far == pytest.approx(6.0)


def test_ray_miss_flags_empty_interval():
    g = ScannerGeometry(5.0, 8.0, (64, 64), (0.4, 0.4), 4)
    ray = ray_for_pixel(g, 0, 0, 0)
    assert ray.t_near > ray.t_far
    assert not ray.hits


def test_out_of_range_pixel():
    g = small_geom()
    with pytest.raises(IndexError):
        ray_for_pixel(g, 0, 24, 0)
    with pytest.raises(IndexError):
        ray_for_pixel(g, 8, 0, 0)


def test_corner_pixel_directions_match_hand_rolled_oracle():
    g = small_geom()
    nu, nv = g.detector_dims
    su, sv = g.detector_spacing
    for k in (0, 3, 5):
        theta = g.angles[k]
        for u in (0, nu - 1):
            for v in (0, nv - 1):
                # build the pixel at angle 0 then rotate both points about z
                src0 = np.array([-g.dso, 0.0, 0.0])
                pix0 = np.array([g.dsd - g.dso, (u + 0.5 - nu / 2) * su, (v + 0.5 - nv / 2) * sv])
                c, s = math.cos(theta), math.sin(theta)
                src = np.array([c * src0[0] - s * src0[1], s * src0[0] + c * src0[1], src0[2]])
                pix = np.array([c * pix0[0] - s * pix0[1], s * pix0[0] + c * pix0[1], pix0[2]])
                d = (pix - src) / math.sqrt(sum((pix - src) ** 2))
                ray = ray_for_pixel(g, k, u, v)
                np.testing.assert_allclose(ray.direction, d, atol=1e-12)
                np.testing.assert_allclose(ray.origin, src, atol=1e-12)


def test_rotation_equivariance():
    g = small_geom()
    _, d0, n0, f0 = g.rays(0)
    for k in (1, 2, 5, 7):
        src, d, tn, tf = g.rays(k)
        r = rot_z(g.angles[k])
        np.testing.assert_allclose(src, r @ g.sources[0], atol=1e-12)
        np.testing.assert_allclose(d, d0 @ r.T, atol=1e-12)


def test_source_to_pixel_distance():
    g = small_geom()
    nu, nv = g.detector_dims
    su, sv = g.detector_spacing
    pos = g.pixel_positions(2)
    src, _ = g.frame(2)
    for u, v in [(0, 0), (5, 17), (23, 19)]:
        a = math.atan2((u + 0.5 - nu / 2) * su, g.dsd)
        b = math.atan2((v + 0.5 - nv / 2) * sv, math.hypot(g.dsd, (u + 0.5 - nu / 2) * su))
        expected = g.dsd / (math.cos(a) * math.cos(b))
        assert np.linalg.norm(pos[v, u] - src) == pytest.approx(expected, rel=1e-12)


def test_direction_unit_and_interval_order():
    g = small_geom()
    _, d, tn, tf = g.rays(3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-9)
    hit = tn <= tf
    assert hit.any()


def test_config_round_trip_and_digest():
    g = default_geometry(32, 20)
    back = ScannerGeometry.from_config(g.to_config())
    assert back.digest() == g.digest()
    np.testing.assert_allclose(back.angles, g.angles, atol=1e-15)


def test_scaled_detector_keeps_footprint():
    g = default_geometry(64, 10)
    lr = g.scaled_detector(4)
    assert lr.detector_dims == (24, 24)
    assert lr.detector_spacing[0] * 24 == pytest.approx(g.detector_spacing[0] * 96)
    with pytest.raises(ValueError):
        g.scaled_detector(5)


def test_parallel_beam_limit():
    g = ScannerGeometry.parallel_beam((16, 16), (0.2, 0.2), 4)
    _, d, _, _ = g.rays(0)
    np.testing.assert_allclose(d[..., 0], 1.0, atol=1e-9)
