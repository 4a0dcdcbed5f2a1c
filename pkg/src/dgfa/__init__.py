"""Dilated graph feature aggregation for point-cloud semantic segmentation."""

from dgfa.spatial import (
    DilationSpec,
    NeighborGraph,
    NeighborList,
    PointSet,
    build_index,
    expansion_count,
    farthest_point_sample,
    knn,
    sparse_knn,
)
from dgfa.graphgen import Hierarchy, build_dilated_graphs, build_hierarchy, label_pyramid
from dgfa.model import ModelConfig
from dgfa.estimator import DGFASegmenter

__all__ = [
    "DGFASegmenter",
    "DilationSpec",
    "Hierarchy",
    "ModelConfig",
    "NeighborGraph",
    "NeighborList",
    "PointSet",
    "build_dilated_graphs",
    "build_hierarchy",
    "build_index",
    "expansion_count",
    "farthest_point_sample",
    "knn",
    "label_pyramid",
    "sparse_knn",
]

__version__ = "0.1.0"
