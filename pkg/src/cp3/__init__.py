"""Point-cloud completion with IOI pretraining and semantic-conditioned refinement."""

from cp3.geometry import PointCloud, SpatialIndex, load_xyz, save_xyz

__all__ = ["PointCloud", "SpatialIndex", "load_xyz", "save_xyz"]
__version__ = "0.1.0"
