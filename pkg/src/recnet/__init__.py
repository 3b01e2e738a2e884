"""Range-image compression and place recognition for LiDAR scans.

The pipeline projects a scan to a range image, encodes it into a compact
bottleneck descriptor, scores descriptor pairs for place recognition and
decodes descriptors back into approximate point clouds.
"""

from recnet.errors import ConfigError, FormatError, ShapeError
from recnet.pointcloud_io import PointCloud, Pose
from recnet.projection import ProjectionConfig, RangeImage, project, unproject

__all__ = [
    "ConfigError",
    "FormatError",
    "PointCloud",
    "Pose",
    "ProjectionConfig",
    "RangeImage",
    "ShapeError",
    "project",
    "unproject",
]

__version__ = "0.1.0"
