"""The full tokenizer: register encoder, quantizer head, mask token, flow
decoder, optional alignment projector, bundled so checkpoints carry one
state dict.

Token sequences are plain 1D integer tensors of codes in [0, vocab). The
prefix property is structural: tokenize always runs the encoder at full
K_max and truncates, so a length-k sequence is bit-for-bit the first k
entries of the length-K_max sequence.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from . import fsq
from .encoder import EncoderConfig, RegisterEncoder
from .errors import NumericError, ShapeError, ValidationError
from .flow import FlowDecoder, GuidanceParams, decode, noise_sample
from .layers import RMSNorm, seeded_normal_
from .repa import RepaProjector
from .schedule import apply_mask


class TrainForward(NamedTuple):
    u_hat: torch.Tensor
    acts: torch.Tensor | None
    values: torch.Tensor
    codes: torch.Tensor


class TokenizerModel(nn.Module):
    """Args mirror the two transformer stacks; decoder geometry defaults to
    the encoder's. feature_dim attaches an alignment projector; None builds
    a model with no alignment head at all."""

    def __init__(self, channels: int, height: int, width: int,
                 enc_cfg: EncoderConfig, dec_depth: int | None = None,
                 dec_dim: int | None = None, dec_heads: int | None = None,
                 levels: fsq.FsqLevels | None = None,
                 feature_dim: int | None = None, repa_layer: int = 1,
                 enc_dim: int | None = None, enc_heads: int | None = None):
        super().__init__()
        self.levels = levels if levels is not None else fsq.FsqLevels()
        self.enc_cfg = enc_cfg
        self.grid = (channels, height, width)
        self.k_max = enc_cfg.k_max
        self.encoder = RegisterEncoder(channels, height, width, enc_cfg,
                                       dim=enc_dim, heads=enc_heads)
        dim = self.encoder.dim
        self.head_norm = RMSNorm(dim)
        self.head_proj = nn.Linear(dim, self.levels.dim)
        self.mask_token = nn.Parameter(torch.zeros(self.levels.dim))
        self.decoder = FlowDecoder(
            channels, height, width,
            depth=dec_depth if dec_depth is not None else enc_cfg.depth,
            dim=dec_dim if dec_dim is not None else dim,
            heads=dec_heads if dec_heads is not None else self.encoder.heads,
            k_max=enc_cfg.k_max, cond_dim=self.levels.dim,
            patch_size=enc_cfg.patch_size, repa_layer=repa_layer,
        )
        self.projector = None if feature_dim is None else RepaProjector(
            self.decoder.patch_embed.out_features, feature_dim)

    def init_weights(self, generator: torch.Generator | None = None):
        self.encoder.init_weights(generator)
        seeded_normal_(self.head_proj.weight, 0.02, generator)
        nn.init.zeros_(self.head_proj.bias)
        seeded_normal_(self.mask_token, 0.02, generator)
        self.decoder.init_weights(generator)
        if self.projector is not None:
            for m in self.projector.modules():
                if isinstance(m, nn.Linear):
                    seeded_normal_(m.weight, 0.02, generator)
                    nn.init.zeros_(m.bias)

    @property
    def vocab_size(self) -> int:
        return self.levels.vocab_size

    def encode_z(self, latents: torch.Tensor, k: int | None = None) -> torch.Tensor:
        """Latents -> pre-quantization projections, (..., k, fsq dims)."""
        z = self.head_proj(self.head_norm(self.encoder(latents, k)))
        if not torch.isfinite(z).all():
            raise NumericError("non-finite quantizer projections")
        return z

    def tokenize(self, latents: torch.Tensor, k: int | None = None) -> torch.Tensor:
        """Latents -> code sequence of length k (default K_max).

        Always encodes at full K_max, then truncates; this is what makes a
        short sequence an exact prefix of the long one.
        """
        k = self.k_max if k is None else k
        if not 1 <= k <= self.k_max:
            raise ValidationError(f"sequence length {k} outside [1, {self.k_max}]")
        with torch.no_grad():
            z = self.encode_z(latents)
            _, digits = fsq.quantize(z, self.levels)
            codes = fsq.digits_to_index(digits, self.levels)
        return codes[..., :k]

    def condition_from_codes(self, codes: torch.Tensor) -> torch.Tensor:
        """(k,) codes -> (K_max, fsq dims) decoder condition, mask token in
        the dropped slots."""
        if codes.dim() != 1:
            raise ShapeError("expected a single 1D code sequence")
        k = codes.numel()
        if not 1 <= k <= self.k_max:
            raise ValidationError(f"sequence length {k} outside [1, {self.k_max}]")
        if codes.min() < 0 or codes.max() >= self.vocab_size:
            raise ValidationError("code outside vocabulary")
        vals = fsq.index_to_values(codes, self.levels)
        full = torch.zeros(self.k_max, self.levels.dim, dtype=vals.dtype)
        full[:k] = vals
        return apply_mask(full, k, self.mask_token)

    def decode_tokens(self, codes: torch.Tensor, steps: int = 25,
                      guidance: GuidanceParams | None = None,
                      generator: torch.Generator | None = None,
                      bound_log: list | None = None) -> torch.Tensor:
        """Code sequence -> sampled latents (channels, height, width)."""
        if guidance is None:
            guidance = GuidanceParams()
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        cond = self.condition_from_codes(codes)
        return decode(codes, self.decoder, cond, steps, guidance, generator,
                      bound_log=bound_log)

    def training_forward(self, x0: torch.Tensor, eps: torch.Tensor,
                         t: torch.Tensor, k_keep: torch.Tensor,
                         null_mask: torch.Tensor | None = None,
                         with_acts: bool = False) -> TrainForward:
        """One training pass: encode, quantize (straight-through), mask to
        k_keep, noise, predict velocity. Loss assembly stays with the
        caller. x0 are clean latents; eps matches its shape; t and k_keep
        are per-sample."""
        z = self.encode_z(x0)
        values, digits = fsq.quantize(z, self.levels)
        codes = fsq.digits_to_index(digits, self.levels)
        cond = apply_mask(values, k_keep, self.mask_token)
        x_t = noise_sample(x0, t, eps)
        out = self.decoder(x_t, t, cond, null_mask=null_mask, return_acts=with_acts)
        if with_acts:
            u_hat, acts = out
        else:
            u_hat, acts = out, None
        return TrainForward(u_hat, acts, values, codes)
