# models/magno.py - Multiscale attentional graph neural operator
"""
MAGNO is used twice: as the encoder (point cloud -> latent tokens) and,
with roles swapped, as the decoder (latent tokens -> query points).

For every scale m and center y::

    w~^m(y) = sum_k alpha_k^m K(y, x_k, a(x_k)) * phi(a(x_k))
    alpha^m = softmax_k(<W_q^m y, W_k^m x_k> / sqrt(d_attn))
    w^^m(y) = MLP_fuse([w~^m(y) || g^m(y)])
    out(y)  = sum_m softmax_m(psi_m(y)) w^^m(y)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad
from .errors import GaotError, ShapeError
from .geometry import GeometryEmbedding
from .layers import Linear, make_mlp
from .spatial import MultiscaleNeighborhood, ScaleAdjacency

KERNEL_MODES = ("vector", "matrix")


@dataclass
class TokenField:
    coords: np.ndarray
    values: torch.Tensor

    def __post_init__(self):
        if self.values.shape[0] != self.coords.shape[0]:
            raise ShapeError(f"TokenField: {self.coords.shape[0]} coordinates but {self.values.shape[0]} rows")


def _as_coords(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=ad.DTYPE)


class MAGNO(nn.Module):
    def __init__(self, coord_dim: int, in_channels: int, lift_channels: int, hidden: Sequence[int],
                 n_scales: int, geometry: GeometryEmbedding, attn_dim: int = 32,
                 share_kernel: bool = True, kernel_mode: str = "vector", kernel_rank: int = 4,
                 uniform_weights: bool = False, activation: str = "gelu"):
        super().__init__()
        if kernel_mode not in KERNEL_MODES:
            raise GaotError(f"unknown kernel mode '{kernel_mode}', expected one of {KERNEL_MODES}")
        self.coord_dim = coord_dim
        self.in_channels = in_channels
        self.lift_channels = lift_channels
        self.n_scales = n_scales
        self.attn_dim = attn_dim
        self.kernel_mode = kernel_mode
        self.kernel_rank = kernel_rank
        self.uniform_weights = uniform_weights
        self.share_kernel = share_kernel

        n_kernels = 1 if share_kernel else n_scales
        k_out = lift_channels if kernel_mode == "vector" else lift_channels * kernel_rank
        phi_out = lift_channels if kernel_mode == "vector" else kernel_rank
        self.kernel = nn.ModuleList(
            make_mlp(2 * coord_dim + in_channels, hidden, k_out, activation) for _ in range(n_kernels)
        )
        self.phi = nn.ModuleList(make_mlp(in_channels, hidden, phi_out, activation) for _ in range(n_kernels))
        self.w_q = nn.ModuleList(Linear(coord_dim, attn_dim, bias=False) for _ in range(n_scales))
        self.w_k = nn.ModuleList(Linear(coord_dim, attn_dim, bias=False) for _ in range(n_scales))
        self.geometry = geometry
        self.fuse = make_mlp(lift_channels + geometry.width, hidden, lift_channels, activation)
        self.psi = nn.ModuleList(make_mlp(coord_dim, (8,), 1, activation) for _ in range(n_scales))

    def _kernel_index(self, scale: int) -> int:
        return 0 if self.share_kernel else scale

    # -- quadrature weights -------------------------------------------------

    def attention_quadrature(self, center, neighbor_coords, scale: int) -> torch.Tensor:
        """Softmax quadrature weights of one center's neighbors"""
        neighbor_coords = _as_coords(neighbor_coords)
        n = neighbor_coords.shape[0]
        if n == 0:
            raise GaotError("attention_quadrature: empty neighborhood")
        if self.uniform_weights:
            return torch.full((n,), 1.0 / n, dtype=ad.DTYPE)
        q = self.w_q[scale](_as_coords(center).reshape(1, -1))
        k = self.w_k[scale](neighbor_coords)
        logits = ad.scale(ad.matmul(k, ad.transpose(q, 0, 1)).reshape(-1), 1.0 / math.sqrt(self.attn_dim))
        return ad.softmax(logits, axis=0)

    def edge_weights(self, adj: ScaleAdjacency, centers: torch.Tensor, sources: torch.Tensor,
                     scale: int) -> torch.Tensor:
        """alpha_k^m for every edge of a scale, normalized per center"""
        offsets = torch.as_tensor(adj.offsets, dtype=torch.long)
        ids = ad.segment_ids(offsets)
        if self.uniform_weights:
            counts = (offsets[1:] - offsets[:-1]).to(ad.DTYPE)
            return 1.0 / counts.index_select(0, ids)
        q = ad.gather(self.w_q[scale](centers), ids)
        k = ad.gather(self.w_k[scale](sources), torch.as_tensor(adj.neighbor_idx, dtype=torch.long))
        logits = ad.scale(ad.sum_(ad.mul(q, k), axis=1), 1.0 / math.sqrt(self.attn_dim))
        return ad.segment_softmax(logits, offsets)

    # -- aggregation --------------------------------------------------------

    def agno_scale(self, adj: ScaleAdjacency, scale: int, source_features: torch.Tensor,
                   source_coords, centers) -> torch.Tensor:
        """Attention-weighted kernel integral at one scale (L x lift_channels)"""
        centers = _as_coords(centers)
        sources = _as_coords(source_coords)
        if adj.n_edges == 0:
            return source_features.new_zeros((adj.n_centers, self.lift_channels))
        offsets = torch.as_tensor(adj.offsets, dtype=torch.long)
        nbr = torch.as_tensor(adj.neighbor_idx, dtype=torch.long)
        ids = ad.segment_ids(offsets)

        y = ad.gather(centers, ids)
        x = ad.gather(sources, nbr)
        a = ad.gather(source_features, nbr)
        kern = self.kernel[self._kernel_index(scale)](ad.concat((y, x, a), axis=1))
        feat = self.phi[self._kernel_index(scale)](a)
        if self.kernel_mode == "vector":
            values = ad.mul(kern, feat)
        else:
            mats = ad.reshape(kern, (-1, self.lift_channels, self.kernel_rank))
            values = ad.matmul(mats, feat.unsqueeze(-1)).squeeze(-1)
        alpha = self.edge_weights(adj, centers, sources, scale)
        return ad.segment_sum(ad.mul(alpha.unsqueeze(1), values), offsets)

    def scale_weights(self, centers) -> torch.Tensor:
        """beta_m(y): softmax over scales of psi_m(y), shape L x n_scales"""
        centers = _as_coords(centers)
        scores = ad.concat([psi(centers) for psi in self.psi], axis=1)
        return ad.softmax(scores, axis=1)

    def forward(self, nbhd: MultiscaleNeighborhood, source_coords, source_features: torch.Tensor,
                centers, descriptors: Optional[Sequence[np.ndarray]] = None,
                geometry_nbhd: Optional[MultiscaleNeighborhood] = None) -> torch.Tensor:
        if nbhd.n_scales != self.n_scales:
            raise ShapeError(f"MAGNO expects {self.n_scales} scales, neighborhood has {nbhd.n_scales}")
        if self.geometry.mode == "statistical" and (descriptors is None or len(descriptors) != self.n_scales):
            got = None if descriptors is None else len(descriptors)
            raise ShapeError(f"MAGNO expects geometry descriptors for {self.n_scales} scales, got {got}")
        nbhd = nbhd.canonical()
        geometry_nbhd = (geometry_nbhd or nbhd).canonical()
        centers = _as_coords(centers)

        fused = []
        for m, adj in enumerate(nbhd.scales):
            w = self.agno_scale(adj, m, source_features, source_coords, centers)
            g = self.geometry(m, geometry_nbhd.scales[m], None if descriptors is None else descriptors[m])
            fused.append(self.fuse(w if g is None else ad.concat((w, g), axis=1)))
        beta = self.scale_weights(centers)
        stacked = torch.stack(fused, dim=1)
        return ad.sum_(ad.mul(stacked, beta.unsqueeze(-1)), axis=1)


def magno_forward(nbhd: MultiscaleNeighborhood, source_features: torch.Tensor, source_coords, centers,
                  descriptors, params: MAGNO, geometry_nbhd=None) -> TokenField:
    values = params(nbhd, source_coords, source_features, centers, descriptors, geometry_nbhd)
    return TokenField(np.asarray(centers, dtype=np.float64), values)


def magno_decode(query_points, latent: TokenField, decoder_nbhd: MultiscaleNeighborhood, descriptors,
                 params: MAGNO, output_mlp: nn.Module) -> torch.Tensor:
    """Decoder MAGNO (queries as centers, tokens as sources) then the output MLP"""
    hidden = params(decoder_nbhd, latent.coords, latent.values, query_points, descriptors)
    return output_mlp(hidden)
