"""Register encoder: a ViT over latent patches with K appended register
tokens and an asymmetric attention mask.

The mask is what buys prefix-consistency, the property the whole ordered
token scheme rests on:

  - patch -> patch: allowed (full attention among patches)
  - patch -> register: forbidden (patches never read registers)
  - register -> patch: allowed (registers read out image content)
  - register i -> register j: allowed iff i >= j (causal among registers)

Because register i never sees registers beyond i, running the encoder with
only the first k registers reproduces the first k rows of the full-K
output exactly (up to accumulation-order drift in float).

Output is the raw residual stream of the register rows, K x D; the
quantizer head (norm + linear projection) lives with the tokenizer model.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NumericError, ShapeError, ValidationError
from .layers import Block, init_transformer_weights, seeded_normal_


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    k_max: int = 64
    patch_size: int = 2
    width: int | None = None  # derived as 64 * depth when None
    heads: int | None = None  # derived as depth when None

    def __post_init__(self):
        if self.width is not None and self.width != 64 * self.depth:
            raise ValidationError(
                f"width {self.width} violates the fixed aspect ratio; depth {self.depth} "
                f"requires width {64 * self.depth}"
            )
        if self.depth < 1 or self.k_max < 1:
            raise ValidationError("depth and k_max must be >= 1")

    @property
    def resolved_width(self) -> int:
        return self.width if self.width is not None else 64 * self.depth

    @property
    def resolved_heads(self) -> int:
        return self.heads if self.heads is not None else self.depth


def patchify(latents: torch.Tensor, p: int) -> torch.Tensor:
    """(B, c, h, w) -> (B, N, c*p*p) in raster order, space-to-depth per patch."""
    squeeze = latents.dim() == 3
    if squeeze:
        latents = latents.unsqueeze(0)
    B, c, h, w = latents.shape
    if h % p or w % p:
        raise ShapeError(f"latent grid {h}x{w} not divisible by patch size {p}")
    x = latents.reshape(B, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)  # (B, h/p, w/p, c, p, p)
    x = x.reshape(B, (h // p) * (w // p), c * p * p)
    return x.squeeze(0) if squeeze else x


def unpatchify(tokens: torch.Tensor, c: int, h: int, w: int, p: int) -> torch.Tensor:
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    B, N, D = tokens.shape
    if N != (h // p) * (w // p) or D != c * p * p:
        raise ShapeError(f"token grid {N}x{D} does not match ({c},{h},{w}) with p={p}")
    x = tokens.reshape(B, h // p, w // p, c, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    x = x.reshape(B, c, h, w)
    return x.squeeze(0) if squeeze else x


def build_attention_mask(num_patches: int, num_registers: int,
                         device=None) -> torch.Tensor:
    """Boolean (N+K, N+K) mask, True = query row may attend to key column."""
    if num_patches < 1 or num_registers < 1:
        raise ValidationError("need at least one patch and one register")
    n, k = num_patches, num_registers
    mask = torch.zeros(n + k, n + k, dtype=torch.bool, device=device)
    mask[:n, :n] = True                                   # patches among themselves
    mask[n:, :n] = True                                   # registers read patches
    reg = torch.arange(k, device=device)
    mask[n:, n:] = reg[:, None] >= reg[None, :]           # causal among registers
    return mask


class RegisterEncoder(nn.Module):
    """Maps a latent grid to K ordered register embeddings.

    Args:
        channels, height, width: latent grid geometry (fixed per model).
        cfg: EncoderConfig.
        dim, heads: free overrides for micro test models; real configs keep
            the 64*depth ratio that cfg enforces.
    """

    def __init__(self, channels: int, height: int, width: int, cfg: EncoderConfig,
                 dim: int | None = None, heads: int | None = None):
        super().__init__()
        p = cfg.patch_size
        if height % p or width % p:
            raise ShapeError(f"latent grid {height}x{width} not divisible by patch {p}")
        self.cfg = cfg
        self.grid = (channels, height, width)
        self.n_patches = (height // p) * (width // p)
        dim = cfg.resolved_width if dim is None else dim
        heads = cfg.resolved_heads if heads is None else heads
        self.dim = dim
        self.heads = heads
        self.patch_embed = nn.Linear(channels * p * p, dim)
        self.patch_pos = nn.Parameter(torch.zeros(self.n_patches, dim))
        self.register_embed = nn.Parameter(torch.zeros(cfg.k_max, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(cfg.depth))

    def init_weights(self, generator: torch.Generator | None = None):
        init_transformer_weights(self, generator)
        seeded_normal_(self.patch_pos, 0.02, generator)
        seeded_normal_(self.register_embed, 0.02, generator)

    def forward_tokens(self, patch_tokens: torch.Tensor, k: int | None = None) -> torch.Tensor:
        """Run from pre-embedded patch tokens; used directly by property tests."""
        k = self.cfg.k_max if k is None else k
        if not 1 <= k <= self.cfg.k_max:
            raise ValidationError(f"register count {k} outside [1, {self.cfg.k_max}]")
        B, N, _ = patch_tokens.shape
        regs = self.register_embed[:k].unsqueeze(0).expand(B, -1, -1)
        seq = torch.cat([patch_tokens, regs], dim=1)
        mask = build_attention_mask(N, k, device=seq.device)
        for i, blk in enumerate(self.blocks):
            seq = blk(seq, mask=mask)
            if not torch.isfinite(seq).all():
                raise NumericError("non-finite activations in encoder", layer=i)
        return seq[:, N:, :]

    def forward(self, latents: torch.Tensor, k: int | None = None) -> torch.Tensor:
        squeeze = latents.dim() == 3
        if squeeze:
            latents = latents.unsqueeze(0)
        if latents.shape[1:] != self.grid:
            raise ShapeError(f"latents {tuple(latents.shape[1:])} != model grid {self.grid}")
        tokens = self.patch_embed(patchify(latents, self.cfg.patch_size)) + self.patch_pos
        out = self.forward_tokens(tokens, k)
        return out.squeeze(0) if squeeze else out


def encode(latents: torch.Tensor, model: RegisterEncoder, k: int | None = None) -> torch.Tensor:
    """Functional alias: returns only register rows, shape (B, k, D)."""
    return model(latents, k)
