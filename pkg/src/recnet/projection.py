"""Spherical projection of LiDAR scans to range images and back.

A point ``p = (x, y, z)`` with range ``r = |p|`` lands in column
``floor(0.5 * (1 - atan2(y, x) / pi) * w)`` and row
``floor((1 - (asin(z / r) + fov_down) / fov) * h)``, so row 0 looks up at
``+fov_up`` and the last row looks down at ``-fov_down``. Each pixel keeps the
nearest point that falls in it; empty pixels hold 0.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from recnet.errors import ConfigError, FormatError, ShapeError
from recnet.pointcloud_io import PointCloud

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1
_RIMG_HEADER = struct.Struct("<4sHHH4f")


@dataclass(frozen=True)
class ProjectionConfig:
    """Image size, vertical field of view (radians) and valid range window (meters)."""

    width: int = 900
    height: int = 64
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)
    min_range: float = 1.0
    max_range: float = 80.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.height}x{self.width}")
        if not self.fov_up + self.fov_down > 0:
            raise ConfigError("fov_up + fov_down must be positive")
        if not 0 <= self.min_range < self.max_range:
            raise ConfigError(f"need 0 <= min_range < max_range, got {self.min_range}, {self.max_range}")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def kitti(cls, **overrides) -> ProjectionConfig:
        """64-beam HDL-64E layout used for KITTI (1x64x900 images)."""
        return cls(**overrides)

    @classmethod
    def os1_32(cls, **overrides) -> ProjectionConfig:
        """32-beam Ouster OS1-32 layout (1x32x450 images)."""
        params = dict(width=450, height=32, fov_up=math.radians(16.6), fov_down=math.radians(16.6))
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class RangeImage:
    """``(height, width)`` float32 ranges in meters; 0 means no return."""

    data: np.ndarray
    config: ProjectionConfig

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.shape != (self.config.height, self.config.width):
            raise ShapeError(
                f"image shape {data.shape} does not match config {(self.config.height, self.config.width)}"
            )
        data.flags.writeable = False
        object.__setattr__(self, "data", data)


def angular_resolution(config: ProjectionConfig) -> tuple[float, float]:
    """Radians per pixel along columns (yaw) and rows (pitch)."""
    return 2.0 * math.pi / config.width, config.fov / config.height


def pixel_coordinates(points: np.ndarray, config: ProjectionConfig):
    """Continuous image coordinates of ``(N, 3)`` points.

    Returns ``(u, v, r)`` as float64 arrays: column, row and range.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r = np.linalg.norm(pts, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(z / r, -1.0, 1.0))
    yaw = np.arctan2(y, x)
    u = 0.5 * (1.0 - yaw / math.pi) * config.width
    v = (1.0 - (pitch + config.fov_down) / config.fov) * config.height
    return u, v, r


def pixel_indices(points: np.ndarray, config: ProjectionConfig):
    """Integer ``(row, col)`` per point plus its range and an in-image mask."""
    u, v, r = pixel_coordinates(points, config)
    col = np.floor(u).astype(np.int64)
    col[col >= config.width] = 0
    with np.errstate(invalid="ignore"):
        row = np.floor(v)
        valid = (
            (r > 0)
            & (r >= config.min_range)
            & (r <= config.max_range)
            & (v >= 0)
            & (v < config.height)
        )
    row = np.where(valid, row, -1).astype(np.int64)
    return row, col, r, valid


def project_indices(points: np.ndarray, config: ProjectionConfig):
    """Project points and report which input point won each filled pixel.

    Returns ``(data, winners)`` where ``winners`` holds, for every filled
    pixel in row-major order, the index of the source point. Collisions keep
    the smallest range; exact ties keep the earliest point.
    """
    row, col, r, valid = pixel_indices(points, config)
    data = np.zeros((config.height, config.width), dtype=np.float32)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return data, idx
    flat = row[idx] * config.width + col[idx]
    order = np.lexsort((idx, r[idx], flat))
    flat_sorted = flat[order]
    keep = np.ones(order.size, dtype=bool)
    keep[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[keep]]
    data.reshape(-1)[flat_sorted[keep]] = r[winners]
    return data, winners


def project(cloud: PointCloud, config: ProjectionConfig) -> RangeImage:
    """Project a point cloud to a range image, nearest point per pixel."""
    data, _ = project_indices(cloud.points, config)
    return RangeImage(data, config)


def unproject(image: RangeImage, frame_id: str = "") -> PointCloud:
    """Turn every pixel with a valid range back into a 3D point.

    Points are placed along the direction of the pixel center, so a point
    projected and recovered moves by at most half a pixel in each angle.
    """
    cfg = image.config
    data = np.asarray(image.data)
    rows, cols = np.nonzero((data >= cfg.min_range) & (data > 0))
    r = data[rows, cols].astype(np.float64)
    yaw = math.pi * (1.0 - 2.0 * (cols + 0.5) / cfg.width)
    pitch = (1.0 - (rows + 0.5) / cfg.height) * cfg.fov - cfg.fov_down
    cp = np.cos(pitch)
    pts = np.stack([r * cp * np.cos(yaw), r * cp * np.sin(yaw), r * np.sin(pitch)], axis=1)
    return PointCloud(pts.reshape(-1, 3), frame_id=frame_id)


def save_range_image(image: RangeImage, path: str | os.PathLike) -> None:
    cfg = image.config
    header = _RIMG_HEADER.pack(
        RIMG_MAGIC, RIMG_VERSION, cfg.height, cfg.width, cfg.fov_up, cfg.fov_down, cfg.min_range, cfg.max_range
    )
    Path(path).write_bytes(header + np.asarray(image.data, dtype="<f4").tobytes())


def load_range_image(path: str | os.PathLike) -> RangeImage:
    raw = Path(path).read_bytes()
    if len(raw) < _RIMG_HEADER.size:
        raise FormatError(f"{path}: truncated RIMG header", offset=len(raw))
    magic, version, h, w, f_up, f_down, rmin, rmax = _RIMG_HEADER.unpack_from(raw)
    if magic != RIMG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != RIMG_VERSION:
        raise FormatError(f"{path}: unsupported RIMG version {version}", offset=4)
    expected = _RIMG_HEADER.size + 4 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}", offset=min(len(raw), expected))
    cfg = ProjectionConfig(width=w, height=h, fov_up=f_up, fov_down=f_down, min_range=rmin, max_range=rmax)
    data = np.frombuffer(raw, dtype="<f4", offset=_RIMG_HEADER.size).reshape(h, w)
    return RangeImage(data, cfg)
