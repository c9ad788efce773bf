"""rayseg: two-stage neural-field pipeline for multi-view scene segmentation.

Stage 1 fits a color field (density + view-dependent color) to posed images;
stage 2 freezes the spatial trunk and distills its per-point features into
view-consistent semantic predictions with a ray-space transformer, optionally
fused with 2D texture features from a small CNN.
"""

__version__ = "0.1.0"
