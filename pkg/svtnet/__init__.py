"""
svtnet - Sparse Voxel Transformer place recognition

A sparse-voxel convolution engine with its own reverse-mode autodiff, the
SVT-Net descriptor network (ASVT and CSVT branches), triplet training and
retrieval evaluation:
1. Voxelize point clouds into sparse occupancy grids
2. Embed them into global descriptors
3. Train with batch-hard triplet loss and evaluate recall@N
"""

__version__ = "0.1.0"

from .pipeline import Pipeline, PipelineResult

__all__ = ["Pipeline", "PipelineResult"]
