"""Pluggable pixel <-> latent boundary.

Two codecs:
  IdentityPatch(f): exact space-to-depth reshape, channels = 3*f*f. The
      desk-scale default (f=2 on 32x32 images gives 12x16x16 latents).
  TrainedAE: small convolutional autoencoder with a Gaussian latent head,
      trained with MSE plus a lightly weighted KL term. Optional; nothing
      downstream depends on it being trained well.

Images are H x W x 3 float arrays in [-1, 1]; latents are channels x h x w.
Batched variants prepend a leading batch dim to both.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError


def _check_image(image: torch.Tensor):
    if image.dim() not in (3, 4) or image.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3) image, got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValidationError("image contains non-finite pixels")


def space_to_depth(image: torch.Tensor, f: int) -> torch.Tensor:
    """(B, H, W, 3) -> (B, 3*f*f, H/f, W/f); cell-major channel order."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    B, H, W, C = image.shape
    if H % f or W % f:
        raise ShapeError(f"image size {H}x{W} not divisible by factor {f}")
    x = image.reshape(B, H // f, f, W // f, f, C)
    x = x.permute(0, 2, 4, 5, 1, 3)  # (B, f, f, C, h, w)
    x = x.reshape(B, f * f * C, H // f, W // f)
    return x.squeeze(0) if squeeze else x


def depth_to_space(latents: torch.Tensor, f: int) -> torch.Tensor:
    squeeze = latents.dim() == 3
    if squeeze:
        latents = latents.unsqueeze(0)
    B, C, h, w = latents.shape
    if C % (f * f):
        raise ShapeError(f"channel count {C} not divisible by f*f = {f * f}")
    c = C // (f * f)
    x = latents.reshape(B, f, f, c, h, w)
    x = x.permute(0, 4, 1, 5, 2, 3)  # (B, h, f, w, f, c)
    x = x.reshape(B, h * f, w * f, c)
    return x.squeeze(0) if squeeze else x


class IdentityPatch:
    """Exactly invertible space-to-depth codec."""

    kind = "identity"

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValidationError("factor must be >= 1")
        self.factor = factor

    def channels(self) -> int:
        return 3 * self.factor * self.factor

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        _check_image(image)
        return space_to_depth(image, self.factor)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[-3] != self.channels():
            raise ShapeError(
                f"latents have {latents.shape[-3]} channels, codec wants {self.channels()}"
            )
        return depth_to_space(latents, self.factor)


class ConvAE(nn.Module):
    """Stride-2 conv stack down, mirrored transpose stack up, Gaussian head.

    Args:
        factor: total spatial downsample, a power of two.
        latent_channels: channels of the latent grid.
        width: hidden channel count.
    """

    def __init__(self, factor: int = 2, latent_channels: int = 8, width: int = 32):
        super().__init__()
        stages = factor.bit_length() - 1
        if 1 << stages != factor:
            raise ValidationError(f"factor must be a power of two, got {factor}")
        self.factor = factor
        self.latent_channels = latent_channels
        enc = []
        c = 3
        for _ in range(stages):
            enc += [nn.Conv2d(c, width, 3, stride=2, padding=1), nn.SiLU()]
            c = width
        enc += [nn.Conv2d(c, 2 * latent_channels, 3, padding=1)]
        self.enc = nn.Sequential(*enc)
        dec = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            dec += [nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(width, 3, 3, padding=1)]
        self.dec = nn.Sequential(*dec)

    def posterior(self, images_chw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.enc(images_chw).chunk(2, dim=1)
        return mean, logvar.clamp(-10, 10)

    def decode_chw(self, latents: torch.Tensor) -> torch.Tensor:
        return self.dec(latents)

    def loss(self, images_chw: torch.Tensor, kl_weight: float = 1e-6,
             generator: torch.Generator | None = None) -> torch.Tensor:
        mean, logvar = self.posterior(images_chw)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + (0.5 * logvar).exp() * noise
        recon = self.decode_chw(z)
        mse = F.mse_loss(recon, images_chw)
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1 - logvar).mean()
        return mse + kl_weight * kl


class TrainedAE:
    """Codec wrapper over ConvAE.

    encode returns the posterior mean by default; sample=True draws a fresh
    posterior sample per call (training-time option).
    """

    kind = "trained_ae"

    def __init__(self, model: ConvAE):
        self.model = model
        self.factor = model.factor

    def channels(self) -> int:
        return self.model.latent_channels

    @torch.no_grad()
    def encode(self, image: torch.Tensor, sample: bool = False,
               generator: torch.Generator | None = None) -> torch.Tensor:
        _check_image(image)
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        if x.shape[1] % self.factor or x.shape[2] % self.factor:
            raise ShapeError(f"image size not divisible by factor {self.factor}")
        chw = x.permute(0, 3, 1, 2)
        mean, logvar = self.model.posterior(chw)
        if sample:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + (0.5 * logvar).exp() * noise
        else:
            z = mean
        return z.squeeze(0) if squeeze else z

    @torch.no_grad()
    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        squeeze = latents.dim() == 3
        z = latents.unsqueeze(0) if squeeze else latents
        if z.shape[1] != self.channels():
            raise ShapeError(f"latents have {z.shape[1]} channels, codec wants {self.channels()}")
        img = self.model.decode_chw(z).permute(0, 2, 3, 1)
        return img.squeeze(0) if squeeze else img


def fit_conv_ae(model: ConvAE, images: torch.Tensor, steps: int = 300, lr: float = 3e-3,
                seed: int = 0) -> float:
    """Overfit helper for tests and demos; returns the final loss."""
    g = torch.Generator().manual_seed(seed)
    chw = images.permute(0, 3, 1, 2)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    loss = None
    for _ in range(steps):
        opt.zero_grad()
        loss = model.loss(chw, generator=g)
        loss.backward()
        opt.step()
    return float(loss.detach())


def encode_pixels(image: torch.Tensor, codec) -> torch.Tensor:
    """Codec seam: pixels (H, W, 3) in [-1, 1] to a latent grid."""
    return codec.encode(image)


def decode_latents(latents: torch.Tensor, codec) -> torch.Tensor:
    return codec.decode(latents)
