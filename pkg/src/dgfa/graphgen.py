"""Hierarchical point graphs: FPS levels, per-level KNN graphs, mapping graphs,
label pyramids and the bottleneck dilated-graph set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dgfa.spatial import (
    DilationSpec,
    NeighborGraph,
    PointSet,
    SearchError,
    build_index,
    expansion_count,
    farthest_point_sample,
    fetch_count,
    knn_graph,
    sparse_knn_graph,
)

DEFAULT_RATIOS = (4, 4, 2)
DEFAULT_RATES = (1, 2, 4, 8)


def _f32_exact(graph: NeighborGraph) -> NeighborGraph:
    # graph files store distances as f32; keep memory identical to disk
    graph.distances = graph.distances.astype(np.float32).astype(np.float64)
    return graph


@dataclass
class Hierarchy:
    """Precomputed multi-resolution structure of one cloud.

    ``levels[l]`` indexes level-l points into the level-0 cloud.
    ``fps_indices[l]`` (l >= 1) is the FPS selection inside level l-1, so
    ``levels[l] == levels[l-1][fps_indices[l]]``. ``sub_graphs[l]`` is a KNN
    graph inside level l (local indices) and ``mapping_graphs[l]`` (l >= 1)
    links each level-l point to its k nearest level-(l-1) points.
    """

    points: PointSet
    ratios: tuple
    k: int
    start: int
    levels: list
    fps_indices: list
    sub_graphs: list
    mapping_graphs: list
    _interp: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_levels(self) -> int:
        """Number of downsampled levels (the cloud itself is level 0)."""
        return len(self.levels) - 1

    @property
    def level_sizes(self) -> list[int]:
        return [len(ix) for ix in self.levels]

    def level_points(self, level: int) -> PointSet:
        return PointSet(self.points.coords[self.levels[level]])

    def __eq__(self, other):
        if not isinstance(other, Hierarchy):
            return NotImplemented
        same_arrays = lambda xs, ys: len(xs) == len(ys) and all(
            (x is None and y is None) or (x is not None and y is not None and np.array_equal(x, y))
            for x, y in zip(xs, ys)
        )
        return (
            np.array_equal(self.points.coords, other.points.coords)
            and tuple(self.ratios) == tuple(other.ratios)
            and self.k == other.k
            and self.start == other.start
            and same_arrays(self.levels, other.levels)
            and same_arrays(self.fps_indices, other.fps_indices)
            and self.sub_graphs == other.sub_graphs
            and self.mapping_graphs == other.mapping_graphs
        )


@dataclass
class DilatedGraphSet:
    k_target: int
    step: int
    rates: tuple
    graphs: dict

    def spec(self, rate: int) -> DilationSpec:
        return DilationSpec(self.k_target, self.step, rate)

    def __getitem__(self, rate: int) -> NeighborGraph:
        try:
            return self.graphs[rate]
        except KeyError:
            raise KeyError(f"no dilated graph for rate {rate}; have {list(self.rates)}") from None

    def __eq__(self, other):
        if not isinstance(other, DilatedGraphSet):
            return NotImplemented
        return (
            (self.k_target, self.step, tuple(self.rates)) == (other.k_target, other.step, tuple(other.rates))
            and all(self.graphs[r] == other.graphs[r] for r in self.rates)
        )


def level_sizes(n: int, ratios) -> list[int]:
    sizes = [n]
    for ratio in ratios:
        if int(ratio) != ratio or ratio < 1:
            raise ValueError(f"ratios must be positive integers, got {ratios!r}")
        sizes.append(max(1, sizes[-1] // int(ratio)))
    return sizes


def build_hierarchy(cloud, ratios=DEFAULT_RATIOS, k: int = 16, start: int = 0) -> Hierarchy:
    """FPS-downsample ``cloud`` by ``ratios`` and build the level and mapping graphs.

    Level sizes are floor(N / prod(ratios[:l])). Each level gets a
    self-excluding KNN graph; each coarse level gets a mapping graph into its
    parent level (the coarse point's own parent copy is included there).
    """
    points = cloud if isinstance(cloud, PointSet) else PointSet(np.asarray(cloud))
    ratios = tuple(int(r) for r in ratios)
    if np.prod(ratios, dtype=np.int64) > points.n:
        raise SearchError(f"ratios {ratios} exhaust a cloud of {points.n} points")
    sizes = level_sizes(points.n, ratios)
    if k > sizes[-1] - 1:
        raise SearchError(f"k={k} too large for the coarsest level of {sizes[-1]} points")

    levels = [np.arange(points.n, dtype=np.int64)]
    fps = [np.arange(points.n, dtype=np.int64)]
    parent_index = build_index(points)
    sub_graphs = [_f32_exact(knn_graph(parent_index, k))]
    mapping = [None]
    for size in sizes[1:]:
        parent = PointSet(points.coords[levels[-1]])
        if size == parent.n:
            # a ratio of 1 keeps every point, so keep the parent order too
            sel = np.arange(size, dtype=np.int64)
        else:
            # FPS keeps the start first, so below level 0 it sits at local index 0
            sel = farthest_point_sample(parent, size, start if len(levels) == 1 else 0)
        fps.append(sel)
        levels.append(levels[-1][sel])
        child = PointSet(points.coords[levels[-1]])
        idx, dist = parent_index.query(child.coords, k)
        mapping.append(_f32_exact(NeighborGraph(np.arange(size), idx, dist)))
        parent_index = build_index(child)
        sub_graphs.append(_f32_exact(knn_graph(parent_index, k)))
    return Hierarchy(points, ratios, int(k), int(start), levels, fps, sub_graphs, mapping)


def label_pyramid(labels, h: Hierarchy, num_classes: int | None = None) -> list[np.ndarray]:
    """Per-level labels gathered through the composed FPS indices."""
    labels = np.asarray(labels)
    if labels.shape != (h.points.n,):
        raise ValueError(f"expected {h.points.n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or (num_classes is not None and labels.max() >= num_classes):
        raise ValueError(f"labels out of range [0, {num_classes})")
    return [labels[ix].astype(np.int64) for ix in h.levels]


def build_dilated_graphs(points, spec_base: DilationSpec, rates=DEFAULT_RATES) -> DilatedGraphSet:
    """One Sparse-KNN graph per dilation rate, all sharing K and the step."""
    points = points if isinstance(points, PointSet) else PointSet(np.asarray(points))
    rates = tuple(int(r) for r in rates)
    if not rates or any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError(f"rates must be non-empty and strictly increasing, got {rates}")
    largest = DilationSpec(spec_base.k_target, spec_base.step, rates[-1])
    if fetch_count(largest) > points.n - 1:
        raise SearchError(
            f"level of {points.n} points too small for rate {rates[-1]} "
            f"(K_s={expansion_count(largest)}, scans {fetch_count(largest)})"
        )
    index = build_index(points)
    graphs = {}
    for r in rates:
        spec = DilationSpec(spec_base.k_target, spec_base.step, r)
        graphs[r] = _f32_exact(sparse_knn_graph(index, spec))
    return DilatedGraphSet(spec_base.k_target, spec_base.step, rates, graphs)
