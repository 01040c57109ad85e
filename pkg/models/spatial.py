# models/spatial.py - Point clouds, latent grids and fixed-radius neighbor search
"""
Deterministic fixed-radius neighbor search between two point sets.

Neighborhoods use the closed ball ``|y - x| <= r`` and list neighbors in
ascending source index, so every downstream reduction sees the same order.
Search is accelerated with a uniform-cell spatial hash whose cell size is
the largest radius: a center only needs to inspect the 3**d cells around it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import GaotError, ShapeError

logger = logging.getLogger(__name__)

STRATEGY_REGULAR = "I"
STRATEGY_DOWNSAMPLED = "II"


@dataclass
class PointCloud:
    coords: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] not in (1, 2, 3):
            raise ShapeError(f"PointCloud: coords must be N x d with d <= 3, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise GaotError("PointCloud: coordinates must be finite")
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.coords.shape[0]:
                raise ShapeError("PointCloud: features and coords disagree on the point count")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


def rescale_to_unit_box(coords: np.ndarray, lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
    """Affinely map the box [lower, upper] onto [-1, 1]^d"""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    return 2.0 * (np.asarray(coords, dtype=np.float64) - lower) / (upper - lower) - 1.0


@dataclass
class LatentGrid:
    coords: np.ndarray
    kind: str
    grid_shape: Optional[tuple[int, ...]] = None
    source_index: Optional[np.ndarray] = None

    @property
    def n_tokens(self) -> int:
        return self.coords.shape[0]


def regular_grid(tokens_per_axis: Sequence[int]) -> np.ndarray:
    """Tensor product of equispaced points on [-1, 1], first axis slowest"""
    axes = [np.linspace(-1.0, 1.0, int(n)) for n in tokens_per_axis]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def build_latent_grid(
    source: PointCloud,
    strategy: str,
    tokens_per_axis: Optional[Sequence[int]] = None,
    sample_count: Optional[int] = None,
    rng_seed: int = 0,
) -> LatentGrid:
    if strategy == STRATEGY_REGULAR:
        if tokens_per_axis is None or len(tokens_per_axis) != source.dim:
            raise ShapeError(f"strategy I needs one token count per axis (d={source.dim})")
        if any(int(n) < 2 for n in tokens_per_axis):
            raise GaotError(f"strategy I needs at least 2 tokens per axis, got {tuple(tokens_per_axis)}")
        shape = tuple(int(n) for n in tokens_per_axis)
        return LatentGrid(regular_grid(shape), STRATEGY_REGULAR, grid_shape=shape)
    if strategy == STRATEGY_DOWNSAMPLED:
        if sample_count is None or sample_count < 1:
            raise GaotError("strategy II needs a positive sample_count")
        if sample_count > source.n_points:
            raise GaotError(f"strategy II sample_count {sample_count} exceeds {source.n_points} points")
        rng = np.random.default_rng(rng_seed)
        index = np.sort(rng.choice(source.n_points, size=sample_count, replace=False))
        return LatentGrid(source.coords[index].copy(), STRATEGY_DOWNSAMPLED, source_index=index)
    raise GaotError(f"unknown latent strategy '{strategy}' (expected 'I' or 'II')")


# ---------------------------------------------------------------------------
# Neighborhoods
# ---------------------------------------------------------------------------

@dataclass
class ScaleAdjacency:
    """Compressed adjacency of one scale: rows of center l are offsets[l]:offsets[l+1]"""

    offsets: np.ndarray
    neighbor_idx: np.ndarray
    rel_disp: np.ndarray

    @property
    def n_centers(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_edges(self) -> int:
        return self.neighbor_idx.shape[0]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def center_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_centers), self.counts())

    def neighbors_of(self, center: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[center], self.offsets[center + 1]
        return self.neighbor_idx[lo:hi], self.rel_disp[lo:hi]

    def canonical(self) -> "ScaleAdjacency":
        """Same edges with every center's list sorted by source index"""
        order = np.lexsort((self.neighbor_idx, self.center_ids()))
        if np.array_equal(order, np.arange(order.shape[0])):
            return self
        return ScaleAdjacency(self.offsets, self.neighbor_idx[order], self.rel_disp[order])


@dataclass
class MultiscaleNeighborhood:
    radii: tuple[float, ...]
    scales: list[ScaleAdjacency] = field(default_factory=list)

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def n_centers(self) -> int:
        return self.scales[0].n_centers

    def canonical(self) -> "MultiscaleNeighborhood":
        return MultiscaleNeighborhood(self.radii, [s.canonical() for s in self.scales])


class NeighborSearch(Protocol):
    def radius_query(self, centers: np.ndarray, sources: np.ndarray, radii: Sequence[float]) -> MultiscaleNeighborhood:
        ...


def _check_radii(radii: Sequence[float]) -> tuple[float, ...]:
    radii = tuple(float(r) for r in radii)
    if not radii or radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise GaotError(f"radii must be positive and strictly increasing, got {radii}")
    return radii


class SpatialHash:
    """Uniform-cell hash of a source cloud, cell size = largest query radius"""

    def __init__(self, sources: np.ndarray, cell_size: float):
        self.sources = np.ascontiguousarray(sources, dtype=np.float64)
        self.cell_size = float(cell_size)
        self.origin = self.sources.min(axis=0) if len(self.sources) else np.zeros(self.sources.shape[1])
        cells = self._cells(self.sources)
        self.extent = cells.max(axis=0) + 1 if len(cells) else np.ones(self.sources.shape[1], dtype=np.int64)
        keys = self._keys(cells)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def _cells(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((pts - self.origin) / self.cell_size).astype(np.int64)

    def _keys(self, cells: np.ndarray) -> np.ndarray:
        key = np.zeros(cells.shape[0], dtype=np.int64)
        for axis in range(cells.shape[1]):
            key = key * int(self.extent[axis]) + cells[:, axis]
        return key

    def candidate_pairs(self, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All (center, source) pairs whose cells touch; superset of every ball"""
        d = centers.shape[1]
        base = self._cells(centers)
        pair_c, pair_s = [], []
        for shift in np.stack(np.meshgrid(*[[-1, 0, 1]] * d, indexing="ij"), axis=-1).reshape(-1, d):
            cells = base + shift
            inside = np.all((cells >= 0) & (cells < self.extent), axis=1)
            if not inside.any():
                continue
            rows = np.nonzero(inside)[0]
            keys = self._keys(cells[rows])
            lo = np.searchsorted(self.sorted_keys, keys, side="left")
            hi = np.searchsorted(self.sorted_keys, keys, side="right")
            counts = hi - lo
            if counts.sum() == 0:
                continue
            pair_c.append(np.repeat(rows, counts))
            starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
            pair_s.append(self.order[starts + np.arange(counts.sum())])
        if not pair_c:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        return np.concatenate(pair_c), np.concatenate(pair_s)


def radius_query_all(centers: np.ndarray, sources: np.ndarray, radii: Sequence[float]) -> MultiscaleNeighborhood:
    """Exact closed-ball neighbor lists of every center at every radius"""
    radii = _check_radii(radii)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    sources = np.ascontiguousarray(sources, dtype=np.float64)
    if centers.ndim != 2 or sources.ndim != 2 or centers.shape[1] != sources.shape[1]:
        raise ShapeError(f"radius_query_all: centers {centers.shape} and sources {sources.shape} disagree")
    if not (np.isfinite(centers).all() and np.isfinite(sources).all()):
        raise GaotError("radius_query_all: non-finite coordinates")

    n_centers = centers.shape[0]
    if sources.shape[0] == 0 or n_centers == 0:
        empty = ScaleAdjacency(np.zeros(n_centers + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                               np.zeros((0, centers.shape[1])))
        return MultiscaleNeighborhood(radii, [empty for _ in radii])

    pair_c, pair_s = SpatialHash(sources, radii[-1]).candidate_pairs(centers)
    disp = sources[pair_s] - centers[pair_c]
    dist = np.sqrt(np.einsum("ij,ij->i", disp, disp))
    keep = dist <= radii[-1]
    pair_c, pair_s, disp, dist = pair_c[keep], pair_s[keep], disp[keep], dist[keep]
    order = np.lexsort((pair_s, pair_c))
    pair_c, pair_s, disp, dist = pair_c[order], pair_s[order], disp[order], dist[order]

    scales = []
    for r in radii:
        sel = dist <= r
        counts = np.bincount(pair_c[sel], minlength=n_centers)
        offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        scales.append(ScaleAdjacency(offsets, pair_s[sel].astype(np.int64), disp[sel]))
    logger.debug("radius query: %d centers, %d sources, edges per scale %s",
                 n_centers, sources.shape[0], [s.n_edges for s in scales])
    return MultiscaleNeighborhood(radii, scales)


def drop_edges(nbhd: MultiscaleNeighborhood, ratio: float, rng_seed: int) -> MultiscaleNeighborhood:
    """Remove every edge independently with probability ``ratio``"""
    if not 0.0 <= ratio < 1.0:
        raise GaotError(f"edge drop ratio must lie in [0, 1), got {ratio}")
    if ratio == 0.0:
        return nbhd
    rng = np.random.default_rng(rng_seed)
    scales = []
    for adj in nbhd.scales:
        keep = rng.random(adj.n_edges) >= ratio
        counts = np.bincount(adj.center_ids()[keep], minlength=adj.n_centers)
        offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        scales.append(ScaleAdjacency(offsets, adj.neighbor_idx[keep], adj.rel_disp[keep]))
    return MultiscaleNeighborhood(nbhd.radii, scales)
