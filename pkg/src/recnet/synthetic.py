"""Parametric test scenes observed along parametric trajectories.

The scene is a ground plane, a few axis-aligned boxes and four boundary
walls. Surfaces are sampled once (uniform in area) in the world frame; each
scan is the subset of those points inside the sensor's range window and
vertical field of view, expressed in the sensor frame. No ray casting is
done, so points behind obstacles are kept; projection keeps the nearest one
per pixel anyway.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from recnet.pointcloud_io import PointCloud, Pose
from recnet.projection import ProjectionConfig


@dataclass(frozen=True)
class SceneSpec:
    extent: float = 40.0
    n_boxes: int = 12
    box_size: tuple[float, float] = (1.5, 5.0)
    box_height: tuple[float, float] = (1.0, 4.0)
    wall_height: float = 20.0
    density: float = 80.0
    sensor_height: float = 1.73
    trajectory: str = "line"
    n_scans: int = 20
    spacing: float = 1.0
    radius: float = 12.0
    laps: float = 1.0
    rate_hz: float = 10.0
    clearance: float = 3.0


def trajectory_poses(spec: SceneSpec) -> list[Pose]:
    """Sensor poses at ``sensor_height`` above the ground plane.

    ``line`` advances along +x by ``spacing`` per scan, centered on the
    origin. ``loop`` circles the origin at ``radius`` for ``laps`` turns,
    heading along the tangent.
    """
    h = spec.sensor_height
    n = spec.n_scans
    poses = []
    if spec.trajectory == "line":
        start = -0.5 * spec.spacing * (n - 1)
        for i in range(n):
            poses.append(Pose.from_translation(start + i * spec.spacing, 0.0, h))
    elif spec.trajectory == "loop":
        for i in range(n):
            theta = 2.0 * math.pi * spec.laps * i / n
            pos = (spec.radius * math.cos(theta), spec.radius * math.sin(theta), h)
            poses.append(Pose.from_yaw(theta + math.pi / 2.0, pos))
    else:
        raise ValueError(f"unknown trajectory {spec.trajectory!r}")
    return poses


def _sample_rect(rng, origin, e1, e2, density) -> np.ndarray:
    area = float(np.linalg.norm(e1) * np.linalg.norm(e2))
    n = max(1, int(round(area * density)))
    st = rng.random((n, 2))
    return origin + st[:, :1] * e1 + st[:, 1:] * e2


def scene_points(spec: SceneSpec, seed: int, avoid: np.ndarray | None = None) -> np.ndarray:
    """World-frame surface samples of the scene, ``(N, 3)`` float64."""
    rng = np.random.default_rng(seed)
    L = spec.extent
    parts = [_sample_rect(rng, np.array([-L, -L, 0.0]), np.array([2 * L, 0, 0]), np.array([0, 2 * L, 0]), spec.density)]
    up = np.array([0.0, 0.0, spec.wall_height])
    corners = [(-L, -L), (L, -L), (L, L), (-L, L)]
    for (x0, y0), (x1, y1) in zip(corners, corners[1:] + corners[:1]):
        parts.append(_sample_rect(rng, np.array([x0, y0, 0.0]), np.array([x1 - x0, y1 - y0, 0.0]), up, spec.density))
    placed = 0
    tries = 0
    while placed < spec.n_boxes and tries < 100 * max(1, spec.n_boxes):
        tries += 1
        sx, sy = rng.uniform(*spec.box_size, size=2)
        sz = rng.uniform(*spec.box_height)
        cx, cy = rng.uniform(-L + sx, L - sx), rng.uniform(-L + sy, L - sy)
        if avoid is not None and len(avoid):
            # keep boxes off the trajectory so no scan starts inside one
            dx = np.maximum(np.abs(avoid[:, 0] - cx) - sx / 2, 0.0)
            dy = np.maximum(np.abs(avoid[:, 1] - cy) - sy / 2, 0.0)
            if np.min(np.hypot(dx, dy)) < spec.clearance:
                continue
        x0, y0 = cx - sx / 2, cy - sy / 2
        ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
        o = np.array([x0, y0, 0.0])
        parts += [
            _sample_rect(rng, o, ex, ez, spec.density),
            _sample_rect(rng, o + ey, ex, ez, spec.density),
            _sample_rect(rng, o, ey, ez, spec.density),
            _sample_rect(rng, o + ex, ey, ez, spec.density),
            _sample_rect(rng, o + ez, ex, ey, spec.density),
        ]
        placed += 1
    return np.concatenate(parts)


def observe(world: np.ndarray, pose: Pose, config: ProjectionConfig, frame_id: str = "", timestamp=None) -> PointCloud:
    """Sensor-frame points of ``world`` visible within the range window and FOV."""
    local = pose.inverse().apply(world)
    r = np.linalg.norm(local, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(local[:, 2] / r, -1.0, 1.0))
    keep = (r >= config.min_range) & (r <= config.max_range) & (pitch <= config.fov_up) & (pitch > -config.fov_down)
    return PointCloud(local[keep], frame_id=frame_id, timestamp=timestamp)
