"""Shared transformer building blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.qkv = nn.Linear(dim, 3 * heads * head_dim)
        self.out = nn.Linear(heads * head_dim, dim)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None, causal: bool = False) -> torch.Tensor:
        B, T, _ = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        mask = None
        if pad is not None:
            mask = (~pad)[:, None, None, :]
        if causal:
            tri = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
            mask = tri if mask is None else mask & tri
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(h.transpose(1, 2).reshape(B, T, -1))


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, head_dim: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, head_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad=None, causal=False):
        x = x + self.drop(self.attn(self.norm1(x), pad, causal))
        x = x + self.drop(self.mlp(self.norm2(x)))
        if pad is not None:
            # padded slots carry nothing between layers
            x = x.masked_fill(pad[..., None], 0.0)
        return x


class Transformer(nn.Module):
    def __init__(self, dim: int, layers: int, heads: int, head_dim: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, head_dim, mlp_ratio, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, pad=None, causal=False):
        for b in self.blocks:
            x = b(x, pad, causal)
        return self.norm(x)


def block_parameter_count(dim: int, heads: int, head_dim: int, mlp_ratio: int = 4) -> int:
    inner = heads * head_dim
    attn = dim * 3 * inner + 3 * inner + inner * dim + dim
    mlp = dim * mlp_ratio * dim + mlp_ratio * dim + mlp_ratio * dim * dim + dim
    return attn + mlp + 4 * dim


def sinusoid(pos: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved sin/cos features for integer or float positions, shape (..., dim)."""
    if dim % 2:
        raise ValueError("sinusoid dim must be even")
    freqs = torch.exp(-math.log(base) * torch.arange(0, dim, 2, dtype=torch.float32) / dim)
    ang = pos.to(torch.float32)[..., None] * freqs
    return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-2)
