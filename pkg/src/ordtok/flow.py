"""Rectified-flow decoder: loss, timestep sampling, adaLN-zero transformer,
guided Euler sampling.

Time convention, stated because sign errors here are silent: t=1 is pure
noise, t=0 is data. The interpolant is X_t = (1-t) X0 + t eps, the training
target is the constant velocity U = eps - X0, and sampling integrates
dX/dt = U from t=1 down to t=0 with plain Euler steps on a uniform grid.

The decoder sees a register prefix (quantized 6-dim values projected to
model width, or a learned null embedding) concatenated with noised latent
patches. Attention is full; registers and patches get separate adaLN
weight sets driven by the same timestep embedding; only patch rows are
projected back out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import patchify, unpatchify
from .errors import NumericError, ShapeError, ValidationError
from .layers import (
    Attention,
    RMSNorm,
    SwiGLU,
    TimestepEmbed,
    init_transformer_weights,
    seeded_normal_,
)

# monotonicity range of the mode-sampling map below
_S_MIN = -1.0
_S_MAX = 2.0 / (math.pi - 2.0)


def noise_sample(x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """X_t = (1-t) X0 + t eps; endpoints are bit-exact."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    while t.dim() < x0.dim():
        t = t.unsqueeze(-1)
    return (1 - t) * x0 + t * eps


def sample_timestep(generator: torch.Generator, s: float, n: int = 1,
                    dtype=torch.float32) -> torch.Tensor:
    """Mode-sampling-with-heavy-tails draw of training timesteps.

    u ~ Uniform(0,1); t = 1 - u - s*(cos^2(pi u / 2) - 1 + u), clamped into
    [0,1] (the clamp only absorbs float dust at u=1, where cos(pi/2) is not
    exactly zero). s=0 collapses to the uniform schedule.
    """
    if not _S_MIN <= s <= _S_MAX:
        raise ValidationError(f"s={s} outside monotonicity range [{_S_MIN}, {_S_MAX:.6f}]")
    u = torch.rand(n, generator=generator, dtype=dtype)
    t = timestep_map(u, s)
    return t


def timestep_map(u: torch.Tensor, s: float) -> torch.Tensor:
    t = 1 - u - s * (torch.cos(math.pi * u / 2) ** 2 - 1 + u)
    return t.clamp(0.0, 1.0)


def rf_loss(u_hat: torch.Tensor, eps: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Mean squared error against the constant velocity eps - x0."""
    if u_hat.shape != eps.shape or eps.shape != x0.shape:
        raise ShapeError("rf_loss shapes disagree")
    return F.mse_loss(u_hat, eps - x0)


# --- guidance --------------------------------------------------------------

@dataclass
class GuidanceParams:
    """mode: none | cfg | apg; scale applies to cfg and apg."""

    mode: str = "apg"
    scale: float = 7.5
    apg_r: float = 2.5
    apg_eta: float = 0.0
    apg_beta: float = -0.5

    def __post_init__(self):
        if self.mode not in ("none", "cfg", "apg"):
            raise ValidationError(f"unknown guidance mode {self.mode!r}")
        if self.scale < 0:
            raise ValidationError("guidance scale must be >= 0")
        if self.apg_r <= 0:
            raise ValidationError("apg rescale threshold r must be > 0")


class ApgState:
    """Momentum buffer owned by a single sampling invocation."""

    def __init__(self):
        self.momentum: torch.Tensor | None = None

    def reset(self):
        self.momentum = None


def cfg_combine(u_cond: torch.Tensor, u_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """u = u_uncond + s (u_cond - u_uncond); s=1 returns u_cond exactly."""
    if u_cond.shape != u_uncond.shape:
        raise ShapeError("cfg_combine shapes disagree")
    if s == 1.0:
        return u_cond
    return u_uncond + s * (u_cond - u_uncond)


def apg_combine(u_cond: torch.Tensor, u_uncond: torch.Tensor, params: GuidanceParams,
                state: ApgState) -> torch.Tensor:
    """Projected guidance: momentum -> norm rescale -> parallel suppression.

    d  = u_cond - u_uncond
    m <- d + beta m                      (state update)
    d' = m, rescaled to norm r if above it
    d'' = eta * d_parallel + d_orthogonal   (projection onto u_cond direction)
    u  = u_cond + (s - 1) d''

    With zero conditional prediction the projection is skipped (d'' = d').
    The output always satisfies ||u - u_cond|| <= |s-1| * r when |eta| <= 1.
    """
    if u_cond.shape != u_uncond.shape:
        raise ShapeError("apg_combine shapes disagree")
    d = u_cond - u_uncond
    if state.momentum is None:
        state.momentum = torch.zeros_like(d)
    state.momentum = d + params.apg_beta * state.momentum
    dp = state.momentum
    norm = dp.norm()
    if norm > params.apg_r:
        dp = dp * (params.apg_r / norm)
    cn = u_cond.norm()
    if cn == 0:
        dpp = dp
    else:
        uhat = u_cond / cn
        par = (dp * uhat).sum() * uhat
        dpp = params.apg_eta * par + (dp - par)
    if params.scale == 1.0:
        return u_cond
    return u_cond + (params.scale - 1.0) * dpp


# --- decoder network -------------------------------------------------------

def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class FlowBlock(nn.Module):
    """Transformer block with separate adaLN-zero weight sets for the
    register rows and the patch rows, both driven by the same timestep
    embedding. Gates start at zero, so the block is the identity at init."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = RMSNorm(dim)
        self.mlp = SwiGLU(dim)
        self.ada_reg = nn.Linear(dim, 6 * dim)
        self.ada_patch = nn.Linear(dim, 6 * dim)

    def zero_ada(self):
        for lin in (self.ada_reg, self.ada_patch):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, seq: torch.Tensor, temb: torch.Tensor, n_reg: int) -> torch.Tensor:
        B, S, D = seq.shape
        cond = F.silu(temb)
        a_reg = self.ada_reg(cond).reshape(B, 1, 6, D)
        a_patch = self.ada_patch(cond).reshape(B, 1, 6, D)
        is_reg = torch.arange(S, device=seq.device) < n_reg
        a = torch.where(is_reg.reshape(1, S, 1, 1), a_reg, a_patch)
        sh1, sc1, g1, sh2, sc2, g2 = a.unbind(dim=2)
        seq = seq + g1 * self.attn(_modulate(self.norm1(seq), sh1, sc1))
        seq = seq + g2 * self.mlp(_modulate(self.norm2(seq), sh2, sc2))
        return seq


class FlowDecoder(nn.Module):
    """Predicts the velocity field for a latent grid given register tokens.

    Args:
        channels, height, width: latent grid geometry.
        depth, dim, heads: transformer size (dim = 64*depth in real runs).
        k_max: register slots; the condition always occupies all of them,
            with masked slots carrying the tokenizer's mask token.
        cond_dim: quantized-value dimensionality (FSQ dims, 6 by default).
        repa_layer: 1-based block index whose output feeds the alignment
            loss; captured on forward when requested.
    """

    def __init__(self, channels: int, height: int, width: int, depth: int, dim: int,
                 heads: int, k_max: int, cond_dim: int = 6, patch_size: int = 2,
                 repa_layer: int = 1):
        super().__init__()
        p = patch_size
        if height % p or width % p:
            raise ShapeError(f"latent grid {height}x{width} not divisible by patch {p}")
        if not 1 <= repa_layer <= depth:
            raise ValidationError(f"repa_layer {repa_layer} outside [1, {depth}]")
        self.grid = (channels, height, width)
        self.patch_size = p
        self.k_max = k_max
        self.cond_dim = cond_dim
        self.repa_layer = repa_layer
        self.n_patches = (height // p) * (width // p)
        self.patch_hw = (height // p, width // p)
        self.patch_embed = nn.Linear(channels * p * p, dim)
        self.patch_pos = nn.Parameter(torch.zeros(self.n_patches, dim))
        self.cond_embed = nn.Linear(cond_dim, dim)
        self.register_pos = nn.Parameter(torch.zeros(k_max, dim))
        self.null_cond = nn.Parameter(torch.zeros(dim))
        self.t_embed = TimestepEmbed(dim)
        self.blocks = nn.ModuleList(FlowBlock(dim, heads) for _ in range(depth))
        self.final_norm = RMSNorm(dim)
        self.final_ada = nn.Linear(dim, 2 * dim)
        self.final_proj = nn.Linear(dim, channels * p * p)

    def init_weights(self, generator: torch.Generator | None = None):
        init_transformer_weights(self, generator)
        seeded_normal_(self.patch_pos, 0.02, generator)
        seeded_normal_(self.register_pos, 0.02, generator)
        seeded_normal_(self.null_cond, 0.02, generator)
        for blk in self.blocks:
            blk.zero_ada()
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)
        nn.init.zeros_(self.final_proj.weight)
        nn.init.zeros_(self.final_proj.bias)

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor | None,
                null_mask: torch.Tensor | None = None,
                return_acts: bool = False):
        """cond: (B, K, cond_dim) quantized values, or None for all-null.

        null_mask: optional (B,) bool; True rows use the learned null
        condition regardless of cond. Returns u_hat (B, c, h, w), plus the
        repa-layer patch activations when return_acts is set.
        """
        squeeze = x_t.dim() == 3
        if squeeze:
            x_t = x_t.unsqueeze(0)
        B = x_t.shape[0]
        if x_t.shape[1:] != self.grid:
            raise ShapeError(f"x_t {tuple(x_t.shape[1:])} != model grid {self.grid}")
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        K = self.k_max
        if cond is None:
            ct = self.null_cond.reshape(1, 1, -1).expand(B, K, -1)
        else:
            if cond.dim() == 2:
                cond = cond.unsqueeze(0)
            if cond.shape[-2:] != (K, self.cond_dim):
                raise ShapeError(
                    f"condition {tuple(cond.shape[-2:])} != ({K}, {self.cond_dim})"
                )
            ct = self.cond_embed(cond)
            if null_mask is not None:
                ct = torch.where(
                    null_mask.reshape(-1, 1, 1), self.null_cond.reshape(1, 1, -1), ct
                )
        seq = torch.cat([ct + self.register_pos,
                         self.patch_embed(patchify(x_t, self.patch_size)) + self.patch_pos],
                        dim=1)
        temb = self.t_embed(t)
        acts = None
        for i, blk in enumerate(self.blocks):
            seq = blk(seq, temb, K)
            if not torch.isfinite(seq).all():
                raise NumericError("non-finite activations in flow decoder", layer=i)
            if i + 1 == self.repa_layer:
                acts = seq[:, K:, :]
        y = self.final_norm(seq[:, K:, :])
        sh, sc = self.final_ada(F.silu(temb)).reshape(B, 1, 2, -1).unbind(dim=2)
        y = self.final_proj(_modulate(y, sh, sc))
        c, h, w = self.grid
        u_hat = unpatchify(y, c, h, w, self.patch_size)
        if squeeze:
            u_hat = u_hat.squeeze(0)
            acts = None if acts is None else acts.squeeze(0)
        return (u_hat, acts) if return_acts else u_hat


def predict_flow(x_t: torch.Tensor, t, cond, model: FlowDecoder,
                 null_mask=None) -> torch.Tensor:
    """Functional surface over FlowDecoder.forward."""
    return model(x_t, t, cond, null_mask=null_mask)


# --- sampling --------------------------------------------------------------

def integrate_flow(predict, x1: torch.Tensor, steps: int) -> torch.Tensor:
    """Euler from t=1 to t=0 on a uniform grid.

    predict(x, t: float tensor scalar) -> velocity estimate. With the exact
    constant field eps - x0 this recovers x0 for any step count (up to
    float roundoff), which is the property tests pin.
    """
    if steps < 1:
        raise ValidationError("need at least one integration step")
    ts = torch.linspace(1.0, 0.0, steps + 1, dtype=x1.dtype, device=x1.device)
    x = x1
    for i in range(steps):
        u = predict(x, ts[i])
        x = x + (ts[i + 1] - ts[i]) * u
        if not torch.isfinite(x).all():
            raise NumericError("non-finite state during flow integration", step=i)
    return x


def guided_velocity(model: FlowDecoder, cond: torch.Tensor,
                    guidance: GuidanceParams, state: ApgState,
                    bound_log: list | None = None):
    """Builds the per-step velocity callable used by decode."""

    def predict(x, t):
        u_c = model(x, t, cond)
        if guidance.mode == "none":
            return u_c
        u_u = model(x, t, None)
        if guidance.mode == "cfg":
            return cfg_combine(u_c, u_u, guidance.scale)
        u = apg_combine(u_c, u_u, guidance, state)
        if bound_log is not None:
            bound_log.append(((u - u_c).norm().item(),
                              abs(guidance.scale - 1.0) * guidance.apg_r))
        return u

    return predict


def decode(tokens: torch.Tensor, model: FlowDecoder, values_full: torch.Tensor,
           steps: int, guidance: GuidanceParams, generator: torch.Generator,
           bound_log: list | None = None) -> torch.Tensor:
    """Sample latents for one token sequence.

    values_full: (K, cond_dim) condition rows (kept prefix already filled,
    masked slots already carrying the mask token). tokens is only used for
    validation; the caller prepares values_full from it.
    """
    if tokens.dim() != 1 or not 1 <= tokens.numel() <= model.k_max:
        raise ValidationError(f"token sequence length must lie in [1, {model.k_max}]")
    c, h, w = model.grid
    x1 = torch.randn(1, c, h, w, generator=generator)
    state = ApgState()
    predict = guided_velocity(model, values_full.unsqueeze(0), guidance, state, bound_log)
    with torch.no_grad():
        x0 = integrate_flow(predict, x1, steps)
    return x0.squeeze(0)


def condition_dropout(cond: torch.Tensor, p: float, generator: torch.Generator):
    """All-or-nothing null replacement per sample.

    Returns (cond, null_mask); rows flagged in null_mask should take the
    decoder's learned null embedding. cond itself is untouched so the
    surviving straight-through paths keep their gradients.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError("dropout probability must lie in [0, 1]")
    B = cond.shape[0]
    null_mask = torch.rand(B, generator=generator) < p
    return cond, null_mask
