"""Deep-structure segmentation, label fusion and tDCS field simulation on voxel models."""

__version__ = "0.1.0"
