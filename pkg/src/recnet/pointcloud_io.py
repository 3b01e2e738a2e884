"""Point-cloud containers, KITTI readers and voxel-grid downsampling.

KITTI velodyne scans are raw little-endian ``float32`` quadruples
``(x, y, z, intensity)`` with no header. Odometry poses are text files with
12 numbers per line: the row-major ``3x4`` matrix ``[R | t]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from recnet.errors import ConfigError, FormatError

KITTI_RECORD = np.dtype("<f4")
KITTI_RECORD_BYTES = 16

_ORTHO_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points in meters.

    ``points`` is an ``(N, 3)`` array, ``intensity`` an optional ``(N,)``
    array. Both are copied and made read-only on construction.
    """

    points: np.ndarray
    intensity: np.ndarray | None = None
    frame_id: str = ""
    timestamp: float | None = None
    n_dropped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.size == 0:
            pts = np.zeros((0, 3), dtype=pts.dtype if pts.dtype.kind == "f" else np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        object.__setattr__(self, "points", _frozen(pts))
        if self.intensity is not None:
            inten = np.asarray(self.intensity).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", _frozen(inten))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, frame_id: str = "") -> PointCloud:
        return cls(np.zeros((0, 3)), frame_id=frame_id)


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the sensor frame to the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, x: float, y: float, z: float = 0.0) -> Pose:
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> Pose:
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        """The ``3x4`` matrix ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(N, 3)`` sensor-frame points to the world frame (``R p + t``)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def distance(self, other: Pose) -> float:
        return float(np.linalg.norm(self.translation - other.translation))


def read_kitti_bin(path: str | os.PathLike, frame_id: str | None = None) -> PointCloud:
    """Read a KITTI velodyne ``.bin`` scan.

    Points with any non-finite component are dropped; the number removed is
    kept in ``PointCloud.n_dropped``.

    Raises:
        FormatError: the file size is not a multiple of 16 bytes.
        OSError: the file cannot be read.
    """
    path = Path(path)
    raw = path.read_bytes()
    usable = len(raw) - len(raw) % KITTI_RECORD_BYTES
    if usable != len(raw):
        raise FormatError(f"{path}: truncated KITTI scan, trailing {len(raw) - usable} bytes", offset=usable)
    data = np.frombuffer(raw, dtype=KITTI_RECORD).reshape(-1, 4)
    finite = np.all(np.isfinite(data), axis=1)
    data = data[finite]
    return PointCloud(
        points=data[:, :3],
        intensity=data[:, 3],
        frame_id=frame_id if frame_id is not None else path.stem,
        n_dropped=int((~finite).sum()),
    )


def write_kitti_bin(cloud: PointCloud, path: str | os.PathLike) -> None:
    n = len(cloud)
    data = np.zeros((n, 4), dtype=KITTI_RECORD)
    data[:, :3] = cloud.points
    if cloud.intensity is not None:
        data[:, 3] = cloud.intensity
    Path(path).write_bytes(data.tobytes())


def read_kitti_poses(path: str | os.PathLike) -> list[Pose]:
    """Read a KITTI odometry pose file, one ``Pose`` per non-empty line."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise FormatError(f"{path}: expected 12 values, got {len(tokens)}", line=lineno)
            try:
                m = np.array([float(t) for t in tokens]).reshape(3, 4)
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric token ({exc})", line=lineno) from None
            try:
                poses.append(Pose.from_matrix(m))
            except ValueError as exc:
                raise FormatError(f"{path}: invalid pose: {exc}", line=lineno) from None
    return poses


def write_kitti_poses(poses, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for pose in poses:
            fh.write(" ".join(repr(float(v)) for v in pose.matrix().reshape(-1)) + "\n")


def read_kitti_times(path: str | os.PathLike) -> list[float]:
    """Read a KITTI ``times.txt`` file (one timestamp in seconds per line)."""
    with open(path) as fh:
        return [float(line) for line in fh if line.strip()]


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points in each occupied voxel by their centroid.

    The voxel index of a point is ``floor(p / voxel_size)`` per axis. Output
    voxels are ordered by first occurrence in the input.
    """
    if not voxel_size > 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return PointCloud.empty(cloud.frame_id)
    pts = np.asarray(cloud.points, dtype=np.float64)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]
    order = np.argsort(first, kind="stable")
    return PointCloud(centroids[order], frame_id=cloud.frame_id, timestamp=cloud.timestamp)


def write_cloud_xyz(cloud: PointCloud, path: str | os.PathLike) -> None:
    """Write one ``x y z`` line per point, shortest round-trip decimal text."""
    with open(path, "w") as fh:
        for x, y, z in np.asarray(cloud.points, dtype=np.float64):
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")


def _fmt(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def read_cloud_xyz(path: str | os.PathLike, frame_id: str | None = None) -> PointCloud:
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 3:
                raise FormatError(f"{path}: expected 'x y z'", line=lineno)
            rows.append([float(t) for t in tokens[:3]])
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pts, frame_id=frame_id if frame_id is not None else path.stem)


def read_cloud(path: str | os.PathLike) -> PointCloud:
    """Read a ``.bin`` (KITTI) or text ``x y z`` cloud, chosen by suffix."""
    path = Path(path)
    if path.suffix == ".bin":
        return read_kitti_bin(path)
    return read_cloud_xyz(path)
