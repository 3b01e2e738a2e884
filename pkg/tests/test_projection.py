from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recnet.errors import ConfigError, FormatError, ShapeError
from recnet.pointcloud_io import PointCloud
from recnet.projection import (
    ProjectionConfig,
    RangeImage,
    angular_resolution,
    load_range_image,
    project,
    save_range_image,
    unproject,
)

KITTI = ProjectionConfig.kitti()


def _row_col(p, cfg):
    # direct per-point evaluation, kept independent of the vectorized code
    x, y, z = p
    r = math.sqrt(x * x + y * y + z * z)
    u = 0.5 * (1.0 - math.atan2(y, x) / math.pi) * cfg.width
    v = (1.0 - (math.asin(z / r) + cfg.fov_down) / cfg.fov) * cfg.height
    return int(math.floor(v)), int(math.floor(u)) % cfg.width, r


def test_forward_point():
    img = project(PointCloud(np.array([[10.0, 0.0, 0.0]])), KITTI)
    assert _row_col((10.0, 0.0, 0.0), KITTI)[:2] == (6, 450)
    assert img.data[6, 450] == 10.0
    assert np.count_nonzero(img.data) == 1


def test_empty_cloud():
    img = project(PointCloud.empty(), KITTI)
    assert img.data.shape == (64, 900)
    assert not img.data.any()


def test_nearest_wins():
    pts = np.array([[8.0, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]])
    img = project(PointCloud(pts), KITTI)
    assert img.data[6, 450] == 5.0


def test_out_of_window_points_dropped():
    pts = np.array([[0.5, 0, 0], [90.0, 0, 0], [10.0, 0, 5.0], [10.0, 0, -20.0]])
    assert not project(PointCloud(pts), KITTI).data.any()


def test_angular_resolution():
    du, dv = angular_resolution(KITTI)
    assert du == pytest.approx(0.0069813, abs=1e-7)
    assert dv == pytest.approx(math.radians(28) / 64)
    one = ProjectionConfig(width=1, height=1)
    assert angular_resolution(one) == pytest.approx((2 * math.pi, one.fov))


def test_unproject_zero_image():
    img = RangeImage(np.zeros((64, 900), np.float32), KITTI)
    assert len(unproject(img)) == 0


def test_single_pixel_unproject():
    img = project(PointCloud(np.array([[10.0, 0.0, 0.0]])), KITTI)
    (p,) = unproject(img).points
    assert np.linalg.norm(p) == pytest.approx(10.0, abs=1e-5)
    du, dv = angular_resolution(KITTI)
    assert np.linalg.norm(p - [10, 0, 0]) <= 10.0 * max(du, dv)


def test_random_points_land_in_their_cell(rng):
    n = 2000
    yaw = rng.uniform(-math.pi, math.pi, n)
    pitch = rng.uniform(-KITTI.fov_down + 1e-4, KITTI.fov_up - 1e-4, n)
    r = rng.uniform(2, 80, n)
    pts = np.stack([r * np.cos(pitch) * np.cos(yaw), r * np.cos(pitch) * np.sin(yaw), r * np.sin(pitch)], 1)
    img = project(PointCloud(pts), KITTI)
    out = unproject(img).points
    for q in out:
        row, col, rq = _row_col(q, KITTI)
        assert img.data[row, col] == pytest.approx(rq, abs=1e-4)


def test_config_validation():
    with pytest.raises(ConfigError):
        ProjectionConfig(width=0)
    with pytest.raises(ConfigError):
        ProjectionConfig(min_range=5.0, max_range=1.0)
    with pytest.raises(ShapeError):
        RangeImage(np.zeros((3, 3), np.float32), KITTI)


def test_rimg_round_trip(tmp_path, rng):
    cfg = ProjectionConfig.os1_32()
    data = rng.uniform(0, 80, size=(cfg.height, cfg.width)).astype(np.float32)
    save_range_image(RangeImage(data, cfg), tmp_path / "a.rimg")
    back = load_range_image(tmp_path / "a.rimg")
    np.testing.assert_array_equal(back.data, data)
    # the header stores angles as float32
    for name in ("width", "height", "fov_up", "fov_down", "min_range", "max_range"):
        assert getattr(back.config, name) == pytest.approx(getattr(cfg, name), rel=1e-6)
    raw = (tmp_path / "a.rimg").read_bytes()
    (tmp_path / "t.rimg").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_range_image(tmp_path / "t.rimg")
    (tmp_path / "m.rimg").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_range_image(tmp_path / "m.rimg")


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-math.pi, math.pi),
    st.floats(-0.43, 0.05),
    st.floats(2.0, 80.0),
)
def test_round_trip_bound(yaw, pitch, r):
    p = np.array([[r * math.cos(pitch) * math.cos(yaw), r * math.cos(pitch) * math.sin(yaw), r * math.sin(pitch)]])
    out = unproject(project(PointCloud(p), KITTI)).points
    assert len(out) == 1
    du, dv = angular_resolution(KITTI)
    assert abs(np.linalg.norm(out[0]) - r) < 1e-5 * max(1.0, r / 10)
    assert np.linalg.norm(out[0] - p[0]) <= r * (du + dv) / math.sqrt(2) + 1e-6
