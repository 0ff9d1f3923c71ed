"""Octree-transformer global descriptors for lidar place recognition, in numpy."""

from .geometry import BoundingRegion, PointCloud, Pose
from .hotformer import ModelConfig, embed, forward, init_params, toy_config

__all__ = ["BoundingRegion", "PointCloud", "Pose", "ModelConfig", "embed", "forward", "init_params", "toy_config"]
__version__ = "0.1.0"
