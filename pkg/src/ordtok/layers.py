"""Transformer building blocks shared by the encoder, flow decoder, and AR
model: RMSNorm pre-normalization, SwiGLU feedforward, masked attention, a
sinusoidal timestep embedding, and generator-seeded init helpers.

SwiGLU hidden width is 4x the model width literally (the stated MLP ratio),
not the parameter-matched 8/3 variant.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def seeded_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator | None):
    """normal init through an explicit generator so model builds are replayable."""
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=generator, dtype=tensor.dtype) * std)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Attention(nn.Module):
    """Multi-head attention; mask is boolean with True = may attend."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                is_causal: bool = False) -> torch.Tensor:
        B, S, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, S, self.heads, D // self.heads).transpose(1, 2)
        k = k.view(B, S, self.heads, D // self.heads).transpose(1, 2)
        v = v.view(B, S, self.heads, D // self.heads).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, is_causal=is_causal)
        return self.proj(out.transpose(1, 2).reshape(B, S, D))


class Block(nn.Module):
    """Pre-norm transformer block without timestep modulation."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = RMSNorm(dim)
        self.mlp = SwiGLU(dim)

    def forward(self, x, mask=None, is_causal=False):
        x = x + self.attn(self.norm1(x), mask=mask, is_causal=is_causal)
        return x + self.mlp(self.norm2(x))


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """(B,) timesteps to (B, dim) sin/cos features."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    ang = t[:, None] * freqs[None, :]
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


class TimestepEmbed(nn.Module):
    """Sinusoidal features followed by a two-layer perceptron."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(sinusoidal_features(t, self.dim))))


def init_transformer_weights(module: nn.Module, generator: torch.Generator | None,
                             std: float = 0.02):
    """Default init: normal(0, std) on linear/embedding weights, zero biases.

    Walks modules in registration order so a fixed generator state yields a
    fixed initialization. Callers zero adaLN heads and output projections
    afterwards where the architecture wants identity-at-init behavior.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            seeded_normal_(m.weight, std, generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            seeded_normal_(m.weight, std, generator)
