"""Nearest-neighbour search over a point cloud and Shepard interpolation.

The interpolant is the normalized weighted average of the values at the L
nodes nearest to the query point::

    u(x) = sum_l h_l(x) * value[l],   sum_l h_l(x) = 1

With ``inverse_distance`` weights (the default) ``h_l`` is proportional to
``d_l ** -p``; ``paper_literal`` keeps ``h_l`` proportional to ``d_l``.
A query closer than ``exact_hit_radius`` to a node returns that node's value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DimensionError, InvalidSpecError

LINEAR_SCAN_THRESHOLD = 256
WEIGHT_MODES = ("inverse_distance", "paper_literal")
EXACT_HIT_RELATIVE_RADIUS = 1e-12
TIE_TOLERANCE = 1e-12
SCAN_BLOCK_ENTRIES = 1_000_000
QUERY_CHUNK = 65_536


@dataclass(frozen=True)
class ShepardConfig:
    neighbors: Optional[int] = None
    weight_mode: str = "inverse_distance"
    idw_exponent: float = 2.0
    exact_hit_radius: Optional[float] = None

    def __post_init__(self) -> None:
        if self.neighbors is not None and self.neighbors < 1:
            raise InvalidSpecError(f"neighbors must be at least 1, got {self.neighbors}")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidSpecError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if not self.idw_exponent > 0:
            raise InvalidSpecError(f"idw_exponent must be positive, got {self.idw_exponent}")
        if self.exact_hit_radius is not None and self.exact_hit_radius < 0:
            raise InvalidSpecError(f"exact_hit_radius must be non-negative, got {self.exact_hit_radius}")

    def resolve_neighbors(self, dim: int, node_count: int) -> int:
        wanted = self.neighbors if self.neighbors is not None else max(4, 2 * dim)
        return max(1, min(wanted, node_count))


class KnnIndex:
    """Exact L-nearest-neighbour index over an immutable node snapshot.

    Ties in distance are broken by the lower node index. Clouds with fewer
    than 256 nodes are scanned linearly; larger ones go through a k-d tree.
    """

    def __init__(self, nodes: np.ndarray, leafsize: int = 16) -> None:
        nodes = np.array(nodes, dtype=float, copy=True)
        if nodes.ndim == 1:
            nodes = nodes[:, np.newaxis]
        if nodes.ndim != 2 or nodes.shape[0] == 0:
            raise DimensionError(f"nodes must be a non-empty (N, d) array, got shape {nodes.shape}")
        nodes.setflags(write=False)
        self.nodes = nodes
        self._tree = cKDTree(nodes, leafsize=leafsize) if len(nodes) >= LINEAR_SCAN_THRESHOLD else None
        self._diameter: Optional[float] = None

    def __len__(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.nodes.shape[1])

    @property
    def diameter(self) -> float:
        """Length of the bounding-box diagonal of the nodes."""
        if self._diameter is None:
            span = self.nodes.max(axis=0) - self.nodes.min(axis=0)
            self._diameter = float(np.sqrt(np.sum(span**2)))
        return self._diameter

    def _distances(self, points: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        diff = self.nodes[candidates] - points[:, np.newaxis, :]
        return np.sqrt(np.sum(diff**2, axis=-1))

    def _linear_scan(self, points: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.empty((points.shape[0], count), dtype=np.intp)
        distances = np.empty((points.shape[0], count))
        block = max(1, SCAN_BLOCK_ENTRIES // len(self))
        everything = np.arange(len(self))
        for start in range(0, points.shape[0], block):
            chunk = points[start : start + block]
            candidates = np.broadcast_to(everything, (chunk.shape[0], len(self)))
            dist = self._distances(chunk, candidates)
            order = np.argsort(dist, axis=1, kind="stable")[:, :count]
            indices[start : start + block] = order
            distances[start : start + block] = np.take_along_axis(dist, order, axis=1)
        return indices, distances

    def query_batch(self, points: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the ``count`` nearest nodes, per query row."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise DimensionError(f"query has dimension {points.shape[1]}, index has dimension {self.dim}")
        if count < 1 or count > len(self):
            raise DimensionError(f"cannot return {count} neighbours from {len(self)} nodes")
        if self._tree is None:
            return self._linear_scan(points, count)

        fetch = min(len(self), count + 1)
        _, candidates = self._tree.query(points, k=fetch)
        candidates = np.asarray(candidates, dtype=np.intp).reshape(points.shape[0], fetch)
        dist = self._distances(points, candidates)
        order = np.lexsort((candidates, dist), axis=-1)
        candidates = np.take_along_axis(candidates, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)

        indices = candidates[:, :count].copy()
        distances = dist[:, :count].copy()
        if fetch > count:
            boundary = dist[:, count - 1]
            tied = dist[:, count] <= boundary + TIE_TOLERANCE * (1.0 + boundary)
            if np.any(tied):
                rows = np.flatnonzero(tied)
                indices[rows], distances[rows] = self._break_ties(points[rows], boundary[rows], count)
        return indices, distances

    def _break_ties(self, points: np.ndarray, boundary: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """Exact neighbours for rows whose ``count``-th distance is shared by further nodes."""
        radii = boundary + 2.0 * TIE_TOLERANCE * (1.0 + boundary)
        balls = self._tree.query_ball_point(points, radii)
        indices = np.empty((points.shape[0], count), dtype=np.intp)
        distances = np.empty((points.shape[0], count))
        for row, members in enumerate(balls):
            members = np.asarray(members, dtype=np.intp)
            dist = self._distances(points[row : row + 1], members[np.newaxis, :])[0]
            order = np.lexsort((members, dist))[:count]
            indices[row] = members[order]
            distances[row] = dist[order]
        return indices, distances

    def query(self, x: np.ndarray, count: int) -> List[Tuple[int, float]]:
        indices, distances = self.query_batch(np.asarray(x, dtype=float).reshape(1, -1), count)
        return [(int(i), float(d)) for i, d in zip(indices[0], distances[0])]


def knn_query(index: KnnIndex, x: np.ndarray, count: int) -> List[Tuple[int, float]]:
    return index.query(x, count)


def shepard_weights_batch(
    distances: np.ndarray,
    weight_mode: str = "inverse_distance",
    idw_exponent: float = 2.0,
    exact_hit_radius: float = 0.0,
) -> np.ndarray:
    """Row-normalized Shepard weights for an ``(m, L)`` array of distances."""
    distances = np.atleast_2d(np.asarray(distances, dtype=float))
    if distances.shape[1] == 0:
        raise DimensionError("distance list must not be empty")
    if np.any(distances < 0):
        raise InvalidSpecError("distances must be non-negative")

    hits = distances <= exact_hit_radius
    hit_rows = np.any(hits, axis=1)
    safe = np.where(hit_rows[:, np.newaxis], 1.0, distances)
    if weight_mode == "inverse_distance":
        nearest = np.min(safe, axis=1, keepdims=True)
        raw = (nearest / safe) ** idw_exponent
    elif weight_mode == "paper_literal":
        raw = safe
    else:
        raise InvalidSpecError(f"weight_mode must be one of {WEIGHT_MODES}, got {weight_mode!r}")
    weights = raw / np.sum(raw, axis=1, keepdims=True)

    if np.any(hit_rows):
        first = np.argmax(hits[hit_rows], axis=1)
        weights[hit_rows] = 0.0
        weights[np.flatnonzero(hit_rows), first] = 1.0
    return weights


def shepard_weights(distances: List[float], cfg: ShepardConfig) -> np.ndarray:
    radius = cfg.exact_hit_radius if cfg.exact_hit_radius is not None else 0.0
    values = np.asarray(distances, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise DimensionError("distance list must be a non-empty vector")
    return shepard_weights_batch(values[np.newaxis, :], cfg.weight_mode, cfg.idw_exponent, radius)[0]


class ShepardInterpolant:
    """Shepard interpolant over ``(nodes, values)``; callable on one or many points.

    ``values`` is either one value per node or an ``(N, c)`` table, in which
    case every column is interpolated with the same neighbour weights.
    """

    def __init__(
        self,
        nodes: np.ndarray,
        values: np.ndarray,
        cfg: ShepardConfig = ShepardConfig(),
        index: Optional[KnnIndex] = None,
    ) -> None:
        self.index = index if index is not None else KnnIndex(nodes)
        values = np.array(values, dtype=float, copy=True)
        if values.ndim not in (1, 2) or values.shape[0] != len(self.index):
            raise DimensionError(f"expected {len(self.index)} value rows, got shape {values.shape}")
        if np.any(values < 0):
            raise InvalidSpecError("density values must be non-negative")
        values.setflags(write=False)
        self.values = values
        self.cfg = cfg
        self.neighbors = cfg.resolve_neighbors(self.index.dim, len(self.index))
        if cfg.exact_hit_radius is not None:
            self.exact_hit_radius = float(cfg.exact_hit_radius)
        else:
            self.exact_hit_radius = EXACT_HIT_RELATIVE_RADIUS * self.index.diameter

    @property
    def nodes(self) -> np.ndarray:
        return self.index.nodes

    def with_values(self, values: np.ndarray) -> "ShepardInterpolant":
        """Same nodes and neighbour index, new node values."""
        return ShepardInterpolant(self.nodes, values, self.cfg, self.index)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        points = np.atleast_2d(points)
        result = np.empty((points.shape[0],) + self.values.shape[1:])
        for start in range(0, points.shape[0], QUERY_CHUNK):
            chunk = points[start : start + QUERY_CHUNK]
            indices, distances = self.index.query_batch(chunk, self.neighbors)
            weights = shepard_weights_batch(
                distances, self.cfg.weight_mode, self.cfg.idw_exponent, self.exact_hit_radius
            )
            result[start : start + QUERY_CHUNK] = np.einsum("ml,ml...->m...", weights, self.values[indices])
        return result[0] if single else result


def evaluate_density(
    nodes: np.ndarray,
    values: np.ndarray,
    index: Optional[KnnIndex],
    x: np.ndarray,
    cfg: ShepardConfig = ShepardConfig(),
) -> float:
    """Interpolated value at ``x``; a supplied ``index`` must have been built over ``nodes``."""
    if index is not None:
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, np.newaxis]
        if nodes.shape != index.nodes.shape or not np.array_equal(nodes, index.nodes):
            raise InvalidSpecError("index was built over a different node set")
    return float(ShepardInterpolant(nodes, values, cfg, index)(np.asarray(x, dtype=float)))
