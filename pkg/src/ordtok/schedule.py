"""Nested-dropout schedules over register counts, plus prefix masking.

Training keeps a random prefix of the register sequence each step and
replaces the rest with a learned mask token, which is what makes the token
order carry coarse-to-fine meaning. Four samplers:

  uniform   k ~ Uniform{1..K}
  pow2      k uniform over {1, 2, 4, ..} up to K, plus K itself when K is
            not a power of two
  unifpow2  draw Uniform{1..K}, then round up to the next power of two
            (clamped to K); weights the top length heavily, e.g. at K=256
            P(k=256) = 1/2
  fixed     always fixed_k
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError

SCHEDULE_KINDS = ("uniform", "pow2", "unifpow2", "fixed")


@dataclass(frozen=True)
class DropoutSchedule:
    kind: str
    k_max: int
    fixed_k: int | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"unknown schedule kind {self.kind!r}; choose from {SCHEDULE_KINDS}")
        if self.k_max < 1:
            raise ValidationError("k_max must be >= 1")
        if self.kind == "fixed":
            if self.fixed_k is None or not 1 <= self.fixed_k <= self.k_max:
                raise ValidationError(f"fixed schedule needs fixed_k in [1, {self.k_max}]")
        elif self.fixed_k is not None:
            raise ValidationError(f"fixed_k is only valid with kind='fixed', got kind={self.kind!r}")

    def support(self) -> list[int]:
        if self.kind == "fixed":
            return [self.fixed_k]
        if self.kind == "uniform":
            return list(range(1, self.k_max + 1))
        # pow2 and unifpow2 share the power-of-two support
        ks = []
        k = 1
        while k <= self.k_max:
            ks.append(k)
            k *= 2
        if ks[-1] != self.k_max:
            ks.append(self.k_max)
        return ks


def _next_pow2_table(k_max: int) -> torch.Tensor:
    """table[u-1] = smallest power of two >= u, clamped to k_max."""
    out = []
    for u in range(1, k_max + 1):
        p = 1 << (u - 1).bit_length()
        out.append(min(p, k_max))
    return torch.tensor(out, dtype=torch.long)


def sample_keep(schedule: DropoutSchedule, generator: torch.Generator, n: int = 1) -> torch.Tensor:
    """Draw n keep-counts; always within [1, k_max]."""
    k = schedule.k_max
    if schedule.kind == "fixed":
        return torch.full((n,), schedule.fixed_k, dtype=torch.long)
    if schedule.kind == "uniform":
        return torch.randint(1, k + 1, (n,), generator=generator)
    if schedule.kind == "pow2":
        support = torch.tensor(schedule.support(), dtype=torch.long)
        idx = torch.randint(0, len(support), (n,), generator=generator)
        return support[idx]
    # unifpow2
    u = torch.randint(1, k + 1, (n,), generator=generator)
    return _next_pow2_table(k)[u - 1]


def apply_mask(rows: torch.Tensor, k, mask_token: torch.Tensor) -> torch.Tensor:
    """Replace rows beyond the kept prefix with mask_token.

    rows: (..., K, D); k: int or (...,) long tensor of per-sample keeps;
    mask_token: (D,). Returns a new tensor, input untouched.
    """
    K, D = rows.shape[-2], rows.shape[-1]
    if mask_token.shape != (D,):
        raise ValidationError(f"mask_token shape {tuple(mask_token.shape)} != ({D},)")
    if isinstance(k, int):
        k = torch.tensor(k)
    k = k.to(rows.device)
    if (k < 1).any() or (k > K).any():
        raise ValidationError(f"k must lie in [1, {K}]")
    idx = torch.arange(K, device=rows.device)
    keep = idx.unsqueeze(0) < k.reshape(-1, 1)  # (B_flat, K)
    keep = keep.reshape(*k.shape, K, 1) if k.dim() > 0 else keep.reshape(K, 1)
    return torch.where(keep, rows, mask_token.to(rows.dtype))
