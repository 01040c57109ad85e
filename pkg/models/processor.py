# models/processor.py - Patch transformer over latent tokens
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad
from .errors import GaotError, ShapeError
from .layers import Activation, Linear
from .magno import TokenField

POSITIONAL_MODES = ("rotary", "sinusoidal")
ROPE_BASE = 10000.0


def rmsnorm(x, scale, eps=1e-8):
    """x / sqrt(mean(x^2) + eps) * scale over the last axis"""
    ms = ad.mean(ad.mul(x, x), axis=-1, keepdim=True)
    return ad.mul(ad.mul(x, ad.rsqrt(ad.add(ms, torch.tensor(eps, dtype=ad.DTYPE)))), scale)


class RMSNorm(nn.Module):
    def __init__(self, d_model, eps=1e-8):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(d_model, dtype=ad.DTYPE))

    def forward(self, x):
        return rmsnorm(x, self.scale, self.eps)


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float = ROPE_BASE):
    """cos/sin tables (..., P, head_dim/2); channel pairs split evenly across the axes"""
    d = positions.shape[-1]
    per_axis = head_dim // d
    if head_dim % (2 * d):
        raise ShapeError(f"rotary encoding needs head width divisible by {2 * d}, got {head_dim}")
    freqs = base ** (-torch.arange(per_axis // 2, dtype=ad.DTYPE) * 2.0 / per_axis)
    angles = torch.cat([positions[..., a:a + 1] * freqs for a in range(d)], dim=-1)
    return torch.cos(angles), torch.sin(angles)


def sinusoidal_embedding(positions: torch.Tensor, width: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Absolute sin/cos features of each coordinate axis, width/d channels per axis"""
    d = positions.shape[-1]
    if width % (2 * d):
        raise ShapeError(f"sinusoidal positions need width divisible by {2 * d}, got {width}")
    cos, sin = rotary_tables(positions, width, base)
    return torch.stack((sin, cos), dim=-1).flatten(-2)


@dataclass
class PatchSequence:
    tokens: torch.Tensor
    patch_centers: torch.Tensor


class MultiHeadAttention(nn.Module):
    def __init__(self, width, heads, dropout=0.0):
        super().__init__()
        if width % heads:
            raise ShapeError(f"hidden width {width} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.dropout = dropout
        self.w_q = Linear(width, width)
        self.w_k = Linear(width, width)
        self.w_v = Linear(width, width)
        self.w_out = Linear(width, width)

    def _split(self, x):
        batch, length, _ = x.shape
        return ad.transpose(ad.reshape(x, (batch, length, self.heads, self.head_dim)), 1, 2)

    def logits(self, x, rope=None):
        """Scaled, rotated Q K^T of shape (B, heads, P, P)"""
        q, k = self._split(self.w_q(x)), self._split(self.w_k(x))
        if rope is not None:
            cos, sin = (t.unsqueeze(-3) for t in rope)
            q, k = ad.rotate_pairs(q, cos, sin), ad.rotate_pairs(k, cos, sin)
        return ad.scale(ad.matmul(q, ad.transpose(k, -2, -1)), 1.0 / math.sqrt(self.head_dim))

    def forward(self, x, rope=None, rng=None):
        batch, length, width = x.shape
        weights = ad.softmax(self.logits(x, rope), axis=-1)
        out = ad.matmul(weights, self._split(self.w_v(x)))
        out = ad.reshape(ad.transpose(out, 1, 2), (batch, length, width))
        return ad.dropout(self.w_out(out), self.dropout, rng, self.training)


class TransformerBlock(nn.Module):
    """Pre-norm residual attention followed by a pre-norm residual FFN"""

    def __init__(self, width, heads, ffn, dropout=0.0, activation="gelu"):
        super().__init__()
        self.attn_norm = RMSNorm(width)
        self.attn = MultiHeadAttention(width, heads, dropout)
        self.ffn_norm = RMSNorm(width)
        self.ffn = nn.Sequential(Linear(width, ffn), Activation(activation), Linear(ffn, width))
        self.dropout = dropout

    def forward(self, x, rope=None, rng=None):
        x = ad.add(x, self.attn(self.attn_norm(x), rope, rng))
        update = ad.dropout(self.ffn(self.ffn_norm(x)), self.dropout, rng, self.training)
        return ad.add(x, update)


def _patch_perm(d: int) -> list[int]:
    # (B, g1, p, g2, p, ..., C) -> (B, g1..gd, p..p, C)
    return [0] + [1 + 2 * i for i in range(d)] + [2 + 2 * i for i in range(d)] + [1 + 2 * d]


def patchify_values(values: torch.Tensor, grid_shape: Sequence[int], p: int) -> torch.Tensor:
    """(B, L, C) grid tokens -> (B, P, p^d C), members flattened row-major"""
    batch, _, channels = values.shape
    d = len(grid_shape)
    split = [v for n in grid_shape for v in (n // p, p)]
    x = ad.reshape(values, (batch, *split, channels)).permute(_patch_perm(d))
    return ad.reshape(x, (batch, math.prod(n // p for n in grid_shape), p ** d * channels))


def unpatchify_values(patches: torch.Tensor, grid_shape: Sequence[int], p: int, channels: int) -> torch.Tensor:
    batch = patches.shape[0]
    d = len(grid_shape)
    x = ad.reshape(patches, (batch, *[n // p for n in grid_shape], *[p] * d, channels))
    inverse = np.argsort(_patch_perm(d)).tolist()
    x = x.permute(inverse)
    return ad.reshape(x, (batch, math.prod(grid_shape), channels))


class Processor(nn.Module):
    """Patchify -> transformer blocks with symmetric long-range skips -> unpatchify"""

    def __init__(self, channels: int, coord_dim: int, grid_shape: Optional[Sequence[int]], patch_size: int,
                 width: int, heads: int, ffn: int, depth: int, dropout: float = 0.0,
                 pos_emb: str = "rotary", n_tokens: Optional[int] = None, activation: str = "gelu"):
        super().__init__()
        if depth < 1:
            raise GaotError("processor needs at least one transformer block")
        if pos_emb not in POSITIONAL_MODES:
            raise GaotError(f"unknown positional mode '{pos_emb}', expected one of {POSITIONAL_MODES}")
        if grid_shape is None and patch_size != 1:
            raise GaotError("patching needs a regular latent grid (strategy I); use patch size 1 otherwise")
        if grid_shape is not None and any(n % patch_size for n in grid_shape):
            raise ShapeError(f"grid {tuple(grid_shape)} not divisible by patch size {patch_size}")
        if width % heads:
            raise ShapeError(f"hidden width {width} not divisible by {heads} heads")
        if pos_emb == "rotary" and (width // heads) % (2 * coord_dim):
            raise ShapeError(f"rotary encoding needs head width divisible by {2 * coord_dim}")
        self.channels = channels
        self.coord_dim = coord_dim
        self.grid_shape = tuple(grid_shape) if grid_shape is not None else None
        self.patch_size = patch_size
        self.width = width
        self.depth = depth
        self.pos_emb = pos_emb
        if self.grid_shape is not None:
            # patch centers in patch units
            self.pos_scale = tuple((n - 1) / (2.0 * patch_size) for n in self.grid_shape)
        else:
            per_axis = max(n_tokens or 1, 1) ** (1.0 / coord_dim)
            self.pos_scale = tuple(per_axis / 2.0 for _ in range(coord_dim))
        patch_dim = patch_size ** coord_dim * channels
        self.patch_embed = Linear(patch_dim, width)
        self.blocks = nn.ModuleList(
            TransformerBlock(width, heads, ffn, dropout, activation) for _ in range(depth)
        )
        self.unpatch = Linear(width, patch_dim)

    def patch_centers(self, coords: torch.Tensor) -> torch.Tensor:
        if self.grid_shape is None:
            return coords
        members = patchify_values(coords, self.grid_shape, self.patch_size)
        return members.reshape(*members.shape[:2], -1, self.coord_dim).mean(dim=2)

    def patchify(self, values: torch.Tensor, coords: torch.Tensor) -> PatchSequence:
        if self.grid_shape is None:
            flat = values
        else:
            flat = patchify_values(values, self.grid_shape, self.patch_size)
        centers = self.patch_centers(coords)
        return PatchSequence(self.patch_embed(flat), centers)

    def positions(self, centers: torch.Tensor) -> torch.Tensor:
        return centers * torch.as_tensor(self.pos_scale, dtype=ad.DTYPE)

    def unpatchify(self, seq: PatchSequence) -> torch.Tensor:
        flat = self.unpatch(seq.tokens)
        if self.grid_shape is None:
            return flat
        return unpatchify_values(flat, self.grid_shape, self.patch_size, self.channels)

    def forward(self, values: torch.Tensor, coords, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        """values (B, L, C), coords (L, d) or (B, L, d) -> (B, L, C)"""
        coords = torch.as_tensor(np.asarray(coords, dtype=np.float64), dtype=ad.DTYPE)
        if coords.dim() == 2:
            coords = coords.unsqueeze(0).expand(values.shape[0], -1, -1)
        seq = self.patchify(values, coords)
        pos = self.positions(seq.patch_centers)
        rope = None
        h = seq.tokens
        if self.pos_emb == "rotary":
            rope = rotary_tables(pos, self.width // self.blocks[0].attn.heads)
        else:
            h = ad.add(h, sinusoidal_embedding(pos, self.width))

        outputs = []
        for i, block in enumerate(self.blocks):
            # block depth/2 (even depth) would pair with its own input and gets no skip
            if i > self.depth / 2:
                h = ad.add(h, outputs[self.depth - 1 - i])
            h = block(h, rope, rng)
            outputs.append(h)
        return self.unpatchify(PatchSequence(h, seq.patch_centers))


def process(latent: TokenField, params: Processor, rng: Optional[torch.Generator] = None) -> TokenField:
    values = params(latent.values.unsqueeze(0), latent.coords, rng)[0]
    return TokenField(latent.coords, values)
