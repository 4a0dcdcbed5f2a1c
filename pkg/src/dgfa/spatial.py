"""Exact nearest-neighbour search, Sparse-KNN dilation and farthest point sampling.

Every query in this module is exact. Distances are Euclidean over the xyz
coordinates; equal distances are ordered by the smaller point index, and a
point is never its own neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class SearchError(ValueError):
    """Raised when a neighbour query cannot be satisfied."""


@dataclass(frozen=True)
class PointSet:
    coords: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (n, 3), got {coords.shape}")
        if coords.shape[0] < 1:
            raise ValueError("point set is empty")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain non-finite values")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class DilationSpec:
    """Sparse-KNN parameters: target count K, sampling step and dilation rate."""

    k_target: int
    step: int = 4
    rate: int = 1

    def __post_init__(self):
        for name in ("k_target", "step", "rate"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))


@dataclass
class NeighborList:
    center: int
    neighbors: np.ndarray
    distances: np.ndarray
    ranks: np.ndarray

    def __len__(self):
        return len(self.neighbors)


@dataclass
class NeighborGraph:
    """Row-aligned neighbour lists for many centres.

    ``neighbors[i]`` holds the neighbours of ``centers[i]``; ``ranks`` are the
    1-based positions of each neighbour in the centre's full distance ordering.
    """

    centers: np.ndarray
    neighbors: np.ndarray
    distances: np.ndarray
    ranks: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.int64)
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.ranks is None:
            k = self.neighbors.shape[1]
            self.ranks = np.broadcast_to(np.arange(1, k + 1), self.neighbors.shape).copy()
        self.ranks = np.asarray(self.ranks, dtype=np.int64)

    def __len__(self):
        return len(self.centers)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __getitem__(self, i: int) -> NeighborList:
        return NeighborList(int(self.centers[i]), self.neighbors[i], self.distances[i], self.ranks[i])

    def __eq__(self, other):
        if not isinstance(other, NeighborGraph):
            return NotImplemented
        return (
            np.array_equal(self.centers, other.centers)
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.distances, other.distances)
            and np.array_equal(self.ranks, other.ranks)
        )


def _sq_dists(coords: np.ndarray, query: np.ndarray) -> np.ndarray:
    # coords (..., 3), query broadcastable against it
    diff = coords - query
    return (diff * diff).sum(axis=-1)


def _rank_rows(cand: np.ndarray, d2: np.ndarray, k: int):
    """Sort candidate rows by (distance, index) and keep the first k."""
    order = np.lexsort((cand, d2), axis=-1)
    cand = np.take_along_axis(cand, order, axis=-1)[:, :k]
    d2 = np.take_along_axis(d2, order, axis=-1)[:, :k]
    return cand, d2


class BruteForceIndex:
    """Exact search by sorting every distance. Reference backend."""

    backend = "brute"

    def __init__(self, points: PointSet, chunk: int = 256):
        self.points = points
        self.chunk = chunk

    @property
    def n(self) -> int:
        return self.points.n

    def query(self, queries: np.ndarray, k: int, exclude: np.ndarray | None = None):
        """k nearest indexed points to each query row; ``exclude[i]`` is dropped from row i."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        _check_k(k, self.n - (exclude is not None))
        coords = self.points.coords
        out_idx = np.empty((len(queries), k), dtype=np.int64)
        out_d2 = np.empty((len(queries), k))
        all_idx = np.arange(self.n)
        for lo in range(0, len(queries), self.chunk):
            q = queries[lo:lo + self.chunk]
            d2 = _sq_dists(coords[None, :, :], q[:, None, :])
            cand = np.broadcast_to(all_idx, d2.shape)
            if exclude is not None:
                d2 = d2.copy()
                d2[np.arange(len(q)), exclude[lo:lo + self.chunk]] = np.inf
            idx, dd = _rank_rows(cand, d2, k)
            out_idx[lo:lo + len(q)] = idx
            out_d2[lo:lo + len(q)] = dd
        return out_idx, np.sqrt(out_d2)


class SpatialIndex:
    """Balanced KD-tree with an exact (distance, index) ordering layer on top.

    The tree proposes candidates; exact squared distances are recomputed from
    the coordinates and rows whose candidate set might be missing a tied or
    nearer point are re-queried with a wider net.
    """

    backend = "kdtree"

    def __init__(self, points: PointSet, leafsize: int = 16):
        self.points = points
        self._tree = cKDTree(points.coords, leafsize=leafsize, balanced_tree=True, compact_nodes=True)

    @property
    def n(self) -> int:
        return self.points.n

    def query(self, queries: np.ndarray, k: int, exclude: np.ndarray | None = None):
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        _check_k(k, self.n - (exclude is not None))
        n = self.n
        m = len(queries)
        out_idx = np.empty((m, k), dtype=np.int64)
        out_d2 = np.empty((m, k))
        pending = np.arange(m)
        want = min(n, k + (exclude is not None) + 4)
        while len(pending):
            q = queries[pending]
            tree_d, cand = self._tree.query(q, k=want)
            tree_d = tree_d.reshape(len(q), want)
            cand = cand.reshape(len(q), want)
            valid = cand < n
            cand = np.where(valid, cand, 0)
            d2 = _sq_dists(self.points.coords[cand], q[:, None, :])
            d2[~valid] = np.inf
            if exclude is not None:
                d2[cand == exclude[pending][:, None]] = np.inf
            idx, dd = _rank_rows(cand, d2, k)
            if want >= n:
                done = np.ones(len(q), dtype=bool)
            else:
                # anything the tree did not return is at least as far as its last candidate
                horizon = tree_d[:, -1]
                done = np.sqrt(dd[:, -1]) * (1 + 1e-9) + 1e-300 < horizon
            out_idx[pending[done]] = idx[done]
            out_d2[pending[done]] = dd[done]
            pending = pending[~done]
            want = min(n, want * 2)
        return out_idx, np.sqrt(out_d2)


def _check_k(k: int, available: int):
    if k < 1:
        raise SearchError(f"k must be >= 1, got {k}")
    if k > available:
        raise SearchError(f"requested {k} neighbours but only {available} candidates exist")


def build_index(points: PointSet | np.ndarray, backend: str = "kdtree"):
    """Build an exact search index over ``points``."""
    if not isinstance(points, PointSet):
        points = PointSet(np.asarray(points))
    if backend == "kdtree":
        return SpatialIndex(points)
    if backend == "brute":
        return BruteForceIndex(points)
    raise ValueError(f"unknown backend {backend!r}")


def knn_graph(index, k: int, centers=None) -> NeighborGraph:
    """Plain KNN (self excluded) for every centre in ``centers`` (default: all points)."""
    centers = np.arange(index.n) if centers is None else np.asarray(centers, dtype=np.int64)
    if index.n - 1 < k:
        raise SearchError(f"k={k} exceeds n-1={index.n - 1}")
    idx, dist = index.query(index.points.coords[centers], k, exclude=centers)
    return NeighborGraph(centers, idx, dist)


def knn(index, center: int, k: int) -> NeighborList:
    """The k nearest non-self points of ``center``, ranked 1..k."""
    _check_center(index, center)
    return knn_graph(index, k, [center])[0]


def _check_center(index, center):
    if not 0 <= center < index.n:
        raise SearchError(f"center {center} out of range [0, {index.n})")


def expansion_count(spec: DilationSpec) -> int:
    """Number of nearest neighbours K_s scanned to pick K dilated ones.

    K_s = floor(K/step)*(r-1+step) + ceil((K/step - floor(K/step))*(r-1+step)),
    evaluated in integer arithmetic.
    """
    k, step, r = spec.k_target, spec.step, spec.rate
    span = r - 1 + step
    q, rem = divmod(k, step)
    return q * span + -(-rem * span // step)


def _alg1_ranks(k_s: int, step: int, r: int) -> list[int]:
    span = r - 1 + step
    groups = -(-k_s // span)
    ranks: list[int] = []
    for i in range(1, groups):
        a = (i - 1) * span + r
        b = i * span
        ranks.extend(range(a, b + 1))
    a = groups * r + (groups - 1) * (step - 1)
    ranks.extend(range(a, k_s + 1))
    return ranks


def fetch_count(spec: DilationSpec) -> int:
    """Neighbours actually fetched by :func:`sparse_knn`.

    Equals :func:`expansion_count` whenever that many neighbours let the
    group-selection loop yield exactly K ranks (always true when the step
    divides K). Otherwise the partial last group would come up short, and the
    count is widened to cover r-1 skipped ranks plus the K mod step remainder.
    """
    k_s = expansion_count(spec)
    if len(_alg1_ranks(k_s, spec.step, spec.rate)) == spec.k_target:
        return k_s
    q, rem = divmod(spec.k_target, spec.step)
    return q * (spec.rate - 1 + spec.step) + spec.rate - 1 + rem


def selected_ranks(spec: DilationSpec) -> np.ndarray:
    """1-based ranks kept by the Sparse-KNN group loop, in increasing order."""
    ranks = _alg1_ranks(fetch_count(spec), spec.step, spec.rate)
    assert len(ranks) == spec.k_target
    return np.asarray(ranks, dtype=np.int64)


def sparse_knn_graph(index, spec: DilationSpec, centers=None) -> NeighborGraph:
    """Dilated neighbour lists for many centres."""
    centers = np.arange(index.n) if centers is None else np.asarray(centers, dtype=np.int64)
    k_fetch = fetch_count(spec)
    if k_fetch > index.n - 1:
        raise SearchError(
            f"dilation {spec} scans {k_fetch} neighbours but the cloud has only {index.n - 1} candidates"
        )
    full = knn_graph(index, k_fetch, centers)
    ranks = selected_ranks(spec)
    cols = ranks - 1
    return NeighborGraph(
        centers,
        full.neighbors[:, cols],
        full.distances[:, cols],
        np.broadcast_to(ranks, (len(centers), len(ranks))).copy(),
    )


def sparse_knn(index, center: int, spec: DilationSpec) -> NeighborList:
    """Sparse-KNN search: skip r-1 ranks, take ``step`` ranks, repeat until K are taken."""
    _check_center(index, center)
    return sparse_knn_graph(index, spec, [center])[0]


def farthest_point_sample(points: PointSet | np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the smaller index."""
    coords = points.coords if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    n = len(coords)
    if not 1 <= m <= n:
        raise SearchError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise SearchError(f"start index {start} out of range [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    min_d2 = _sq_dists(coords, coords[start])
    min_d2[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        np.minimum(min_d2, _sq_dists(coords, coords[nxt]), out=min_d2)
        min_d2[nxt] = -1.0
    return chosen
