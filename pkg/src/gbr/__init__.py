"""Sparse-view geometry refinement: point-map alignment, bundle adjustment,
scale-consistent depth, Gaussian splat rendering, supervision losses and TSDF meshing."""

__version__ = "0.1.0"
