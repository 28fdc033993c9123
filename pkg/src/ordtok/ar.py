"""Class-conditional decoder-only transformer over code sequences.

Sequence layout: position 0 is a start token (learned embedding plus a
class embedding, or a learned null embedding for the unconditional path),
positions 1..L are code embeddings. The logit row at position i predicts
code i, so causality means logits at i depend only on the start token and
codes < i. Guidance, when asked for, combines conditional and null logits
per step; sampling is top-k with temperature, top_k=0 meaning the full
vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .layers import Block, RMSNorm, init_transformer_weights, seeded_normal_


@dataclass(frozen=True)
class ArConfig:
    depth: int = 4
    k_max: int = 64
    num_classes: int = 10
    vocab: int = 64000
    width: int | None = None
    heads: int | None = None
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.width is not None and self.width != 64 * self.depth:
            raise ValidationError(
                f"width {self.width} violates the fixed aspect ratio; depth "
                f"{self.depth} requires width {64 * self.depth}")
        if min(self.depth, self.k_max, self.num_classes, self.vocab) < 1:
            raise ValidationError("depth, k_max, num_classes, vocab must be positive")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValidationError("cond_dropout must lie in [0, 1]")

    @property
    def resolved_width(self) -> int:
        return self.width if self.width is not None else 64 * self.depth

    @property
    def resolved_heads(self) -> int:
        return self.heads if self.heads is not None else self.depth

    @property
    def max_seq(self) -> int:
        return 1 + self.k_max


@dataclass(frozen=True)
class GenerationRequest:
    class_id: int | None
    k_tokens: int
    top_k: int = 0
    temperature: float = 1.0
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k_tokens < 1:
            raise ValidationError("k_tokens must be >= 1")
        if self.top_k < 0:
            raise ValidationError("top_k must be >= 0 (0 disables the cutoff)")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")


class ARModel(nn.Module):
    def __init__(self, cfg: ArConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.resolved_width
        self.tok_embed = nn.Embedding(cfg.vocab, dim)
        self.class_embed = nn.Embedding(cfg.num_classes, dim)
        self.start = nn.Parameter(torch.zeros(dim))
        self.null_class = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_seq, dim))
        self.blocks = nn.ModuleList(
            Block(dim, cfg.resolved_heads) for _ in range(cfg.depth))
        self.final_norm = RMSNorm(dim)
        self.head = nn.Linear(dim, cfg.vocab, bias=False)

    def init_weights(self, generator: torch.Generator | None = None):
        init_transformer_weights(self, generator)
        seeded_normal_(self.start, 0.02, generator)
        seeded_normal_(self.null_class, 0.02, generator)
        seeded_normal_(self.pos_embed, 0.02, generator)

    def forward(self, codes: torch.Tensor, class_ids: torch.Tensor | None,
                null_mask: torch.Tensor | None = None) -> torch.Tensor:
        """codes: (B, L) with L in [0, k_max]; returns logits (B, L+1, vocab).

        class_ids None means every row takes the null path; null_mask
        selects rows that take it despite having a class id.
        """
        if codes.dim() != 2:
            raise ShapeError(f"expected (B, L) codes, got {tuple(codes.shape)}")
        B, L = codes.shape
        if L > self.cfg.k_max:
            raise ValidationError(f"prefix length {L} exceeds k_max {self.cfg.k_max}")
        if L and (codes.min() < 0 or codes.max() >= self.cfg.vocab):
            raise ValidationError("code outside vocabulary")
        if class_ids is None:
            cond = self.null_class.unsqueeze(0).expand(B, -1)
        else:
            if (class_ids < 0).any() or (class_ids >= self.cfg.num_classes).any():
                raise ValidationError("class id outside range")
            cond = self.class_embed(class_ids)
            if null_mask is not None:
                cond = torch.where(null_mask.unsqueeze(-1), self.null_class, cond)
        seq = torch.cat([(self.start + cond).unsqueeze(1), self.tok_embed(codes)], dim=1)
        seq = seq + self.pos_embed[: L + 1]
        for blk in self.blocks:
            seq = blk(seq, is_causal=True)
        return self.head(self.final_norm(seq))


def ar_logits(model: ARModel, prefix: torch.Tensor, class_id: int | None) -> torch.Tensor:
    """Single-sequence surface: (L,) prefix -> (L+1, vocab) logits."""
    if prefix.dim() != 1:
        raise ShapeError("prefix must be 1D")
    ids = None if class_id is None else torch.tensor([class_id])
    return model(prefix.unsqueeze(0), ids).squeeze(0)


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor, s: float) -> torch.Tensor:
    if cond.shape != uncond.shape:
        raise ShapeError("cfg_logits shapes disagree")
    if s == 1.0:
        return cond
    return uncond + s * (cond - uncond)


def sample_next(logits: torch.Tensor, top_k: int, temperature: float,
                generator: torch.Generator) -> int:
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    if logits.dim() != 1:
        raise ShapeError("sample_next takes one logit row")
    x = logits / temperature
    if top_k > 0 and top_k < x.numel():
        kth = torch.topk(x, top_k).values[-1]
        x = torch.where(x < kth, torch.full_like(x, float("-inf")), x)
    probs = F.softmax(x, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator).item())


def ar_nll(model: ARModel, codes: torch.Tensor, class_ids: torch.Tensor | None,
           null_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy in nats over (B, L) sequences."""
    logits = model(codes, class_ids, null_mask=null_mask)
    B, L = codes.shape
    return F.cross_entropy(logits[:, :L].reshape(B * L, -1), codes.reshape(-1))


def generate(model: ARModel, req: GenerationRequest,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Autoregressive loop producing exactly k_tokens codes."""
    if req.k_tokens > model.cfg.k_max:
        raise ValidationError(
            f"k_tokens {req.k_tokens} exceeds k_max {model.cfg.k_max}")
    if generator is None:
        generator = torch.Generator().manual_seed(req.seed)
    guided = req.cfg_scale != 1.0 and req.class_id is not None
    prefix = torch.zeros(1, 0, dtype=torch.long)
    ids = None if req.class_id is None else torch.tensor([req.class_id])
    with torch.no_grad():
        for _ in range(req.k_tokens):
            logits = model(prefix, ids)[0, -1]
            if guided:
                logits = cfg_logits(logits, model(prefix, None)[0, -1], req.cfg_scale)
            nxt = sample_next(logits, req.top_k, req.temperature, generator)
            prefix = torch.cat([prefix, torch.tensor([[nxt]])], dim=1)
    return prefix.squeeze(0)
