# models/geometry.py - Local geometry descriptors and their embeddings
"""
Per-center, per-scale geometry embeddings g^m(y).

Two descriptor families are supported: statistical descriptors
(neighbor count, mean and variance of neighbor distance, centroid offset,
PCA eigenvalues of the neighbor covariance) normalized and fed through a
shared MLP, and a PointNet-style shared point MLP over relative
displacements followed by mean pooling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.preprocessing import StandardScaler

from . import autodiff as ad
from .errors import GaotError, NotFittedError
from .layers import make_mlp
from .spatial import MultiscaleNeighborhood, ScaleAdjacency

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
EMBEDDING_MODES = ("statistical", "pointnet", "none")


def descriptor_width(dim: int) -> int:
    """n, D_avg, D_var, centroid offset (d), eigenvalues (d)"""
    return 3 + 2 * dim


@dataclass
class GeomStats:
    neighbor_count: float
    avg_dist: float
    var_dist: float
    centroid_offset: np.ndarray
    pca_eigs: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.neighbor_count, self.avg_dist, self.var_dist],
                               self.centroid_offset, self.pca_eigs))

    @classmethod
    def from_vector(cls, row: np.ndarray, dim: int) -> "GeomStats":
        return cls(float(row[0]), float(row[1]), float(row[2]),
                   row[3:3 + dim].copy(), row[3 + dim:3 + 2 * dim].copy())


def scale_descriptors(adj: ScaleAdjacency, dim: int) -> np.ndarray:
    """Descriptor rows (L x (3 + 2d)) for every center of one scale.

    Lists are first put in ascending source order and sums run through
    ``np.bincount``, so the result does not depend on neighbor order.  Centers with fewer than ``dim`` neighbors get
    a zero covariance, and centers with none get an all-zero row.
    """
    adj = adj.canonical()
    n_centers = adj.n_centers
    out = np.zeros((n_centers, descriptor_width(dim)))
    if adj.n_edges == 0:
        return out
    counts = adj.counts().astype(np.float64)
    ids = adj.center_ids()
    safe = np.maximum(counts, 1.0)
    disp = adj.rel_disp

    dist = np.sqrt(np.einsum("ij,ij->i", disp, disp))
    d_avg = np.bincount(ids, weights=dist, minlength=n_centers) / safe
    d_var = np.bincount(ids, weights=(dist - d_avg[ids]) ** 2, minlength=n_centers) / safe
    centroid = np.stack(
        [np.bincount(ids, weights=disp[:, a], minlength=n_centers) for a in range(dim)], axis=1
    ) / safe[:, None]

    centered = disp - centroid[ids]
    cov = np.zeros((n_centers, dim, dim))
    for a in range(dim):
        for b in range(a, dim):
            c = np.bincount(ids, weights=centered[:, a] * centered[:, b], minlength=n_centers) / safe
            cov[:, a, b] = c
            cov[:, b, a] = c
    cov[counts < dim] = 0.0
    eigs = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)

    out[:, 0] = counts
    out[:, 1] = d_avg
    out[:, 2] = d_var
    out[:, 3:3 + dim] = centroid
    out[:, 3 + dim:] = eigs
    return out


def neighborhood_descriptors(nbhd: MultiscaleNeighborhood, dim: int) -> list[np.ndarray]:
    return [scale_descriptors(adj, dim) for adj in nbhd.scales]


def compute_stats(nbhd: MultiscaleNeighborhood, scale: int, center: int) -> GeomStats:
    adj = nbhd.scales[scale]
    if not 0 <= center < adj.n_centers:
        raise GaotError(f"center {center} out of range for {adj.n_centers} centers")
    idx, disp = adj.neighbors_of(center)
    single = ScaleAdjacency(np.array([0, idx.shape[0]], dtype=np.int64), idx, disp)
    dim = disp.shape[1]
    return GeomStats.from_vector(scale_descriptors(single, dim)[0], dim)


class GeometryEmbedding(nn.Module):
    """Maps neighborhoods of one MAGNO side to per-scale embeddings"""

    def __init__(self, mode: str, dim: int, width: int, hidden: Sequence[int], n_scales: int,
                 per_scale: bool = False, pointnet_head: bool = False, activation: str = "gelu"):
        super().__init__()
        if mode not in EMBEDDING_MODES:
            raise GaotError(f"unknown geometry embedding '{mode}', expected one of {EMBEDDING_MODES}")
        self.mode = mode
        self.dim = dim
        self.width = width if mode != "none" else 0
        self.per_scale = per_scale
        if mode == "statistical":
            n_stats = n_scales if per_scale else 1
            feat = descriptor_width(dim)
            self.register_buffer("norm_mean", torch.zeros(n_stats, feat, dtype=ad.DTYPE))
            self.register_buffer("norm_std", torch.ones(n_stats, feat, dtype=ad.DTYPE))
            self.register_buffer("fitted", torch.zeros((), dtype=ad.DTYPE))
            self.mlp_geo = make_mlp(feat, hidden, width, activation)
        elif mode == "pointnet":
            self.mlp_pt = make_mlp(dim, hidden, width, activation)
            self.head = make_mlp(width, (), width, activation) if pointnet_head else None

    @property
    def is_fitted(self) -> bool:
        return self.mode != "statistical" or bool(self.fitted.item() > 0)

    def fit(self, descriptor_sets: Iterable[Sequence[np.ndarray]]) -> None:
        """Fit the descriptor normalizer from per-sample, per-scale descriptor arrays"""
        if self.mode != "statistical":
            return
        n_stats = self.norm_mean.shape[0]
        scalers = [StandardScaler() for _ in range(n_stats)]
        seen = False
        for per_scale in descriptor_sets:
            for m, rows in enumerate(per_scale):
                if rows.shape[0]:
                    scalers[m if self.per_scale else 0].partial_fit(rows)
                    seen = True
        if not seen:
            raise GaotError("geometry normalizer: no descriptors to fit")
        for k, scaler in enumerate(scalers):
            if not hasattr(scaler, "mean_"):
                continue
            self.norm_mean[k] = torch.as_tensor(scaler.mean_, dtype=ad.DTYPE)
            self.norm_std[k] = torch.as_tensor(np.maximum(np.sqrt(scaler.var_), STD_FLOOR), dtype=ad.DTYPE)
        self.fitted.fill_(1.0)
        logger.debug("geometry normalizer fitted (%s statistics)", "per-scale" if self.per_scale else "pooled")

    def normalize(self, descriptors: torch.Tensor, scale: int) -> torch.Tensor:
        if not self.is_fitted:
            raise NotFittedError("geometry embedding: descriptor normalizer has not been fitted")
        k = scale if self.per_scale else 0
        return ad.div(ad.sub(descriptors, self.norm_mean[k]), self.norm_std[k])

    def forward(self, scale: int, adj: ScaleAdjacency, descriptors: np.ndarray):
        if self.mode == "statistical":
            return embed_statistical(torch.as_tensor(descriptors, dtype=ad.DTYPE), self, scale)
        if self.mode == "pointnet":
            return embed_pointnet(torch.as_tensor(adj.rel_disp, dtype=ad.DTYPE), self, adj.offsets)
        return None


def embed_statistical(descriptors: torch.Tensor, params: GeometryEmbedding, scale: int = 0) -> torch.Tensor:
    """MLP_geo(Normalize(z)) for descriptor rows z (or a single GeomStats)"""
    if params.mode != "statistical":
        raise GaotError("embed_statistical requires a statistical geometry embedding")
    if isinstance(descriptors, GeomStats):
        descriptors = torch.as_tensor(descriptors.as_vector(), dtype=ad.DTYPE)
    return params.mlp_geo(params.normalize(descriptors, scale))


def embed_pointnet(rel_disp: torch.Tensor, params: GeometryEmbedding, offsets=None) -> torch.Tensor:
    """Mean over neighbors of MLP_pt(delta_k); zero for empty neighborhoods.

    Without ``offsets`` the rows form a single neighborhood and a vector is
    returned.
    """
    if params.mode != "pointnet":
        raise GaotError("embed_pointnet requires a pointnet geometry embedding")
    single = offsets is None
    if single:
        offsets = [0, rel_disp.shape[0]]
    offsets = torch.as_tensor(offsets, dtype=torch.long)
    counts = (offsets[1:] - offsets[:-1]).to(ad.DTYPE).clamp(min=1.0)
    h = params.mlp_pt(rel_disp) if rel_disp.shape[0] else rel_disp.new_zeros((0, params.width))
    pooled = ad.div(ad.segment_sum(h, offsets), counts[:, None])
    if params.head is not None:
        pooled = params.head(pooled)
    return pooled[0] if single else pooled
