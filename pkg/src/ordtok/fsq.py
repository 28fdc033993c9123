"""Finite scalar quantization with mixed-radix token indexing.

Each register embedding is projected to a small vector (one entry per level
count), bounded with tanh, and rounded to a fixed per-dimension grid. The
resulting digit vector packs into a single integer code, so the vocabulary
is implicit: vocab = prod(levels). No codebook is learned.

Conventions, pinned because every downstream consumer depends on them:
  - bound:  b_i = ((L_i - 1) / 2) * tanh(z_i)
  - round half-up: round(x) = floor(x + 0.5)
  - even L_i shift by 0.5 so all L_i digits are reachable:
        q_i = round(b_i + o_i) - o_i,  o_i = 0.5 if L_i even else 0
  - digit_i = q_i + (L_i - 1) / 2  in {0..L_i-1}
  - value_i = q_i / floor(L_i / 2), the decoder-facing representation
  - codes pack little-endian: code = sum_i digit_i * prod_{j<i} L_j
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import torch

from .errors import ShapeError, ValidationError

# Serialized token streams use u16 codes; reject vocabularies that overflow.
_STREAM_MAX_CODE = 0xFFFF


@dataclass(frozen=True)
class FsqLevels:
    """Per-dimension level counts, default [8, 8, 8, 5, 5, 5] (vocab 64000)."""

    levels: tuple[int, ...] = (8, 8, 8, 5, 5, 5)

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValidationError("levels must be non-empty")
        if any(int(l) < 2 for l in self.levels):
            raise ValidationError(f"every level count must be >= 2, got {self.levels}")
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def vocab_size(self) -> int:
        n = 1
        for l in self.levels:
            n *= l
        return n

    def _tensors(self, dtype=torch.float32, device=None):
        t = torch.tensor(self.levels, dtype=dtype, device=device)
        half = (t - 1) / 2
        offset = torch.where(t.long() % 2 == 0, 0.5, 0.0).to(dtype)
        halfdown = torch.tensor([l // 2 for l in self.levels], dtype=dtype, device=device)
        return half, offset, halfdown

    def place_values(self, device=None) -> torch.Tensor:
        """Little-endian mixed-radix place values: [1, L0, L0*L1, ...]."""
        place = [1]
        for l in self.levels[:-1]:
            place.append(place[-1] * l)
        return torch.tensor(place, dtype=torch.long, device=device)


def _check_dim(z: torch.Tensor, levels: FsqLevels, op: str):
    if z.shape[-1] != levels.dim:
        raise ShapeError(f"{op}: last dim {z.shape[-1]} != len(levels) {levels.dim}")


def bound(z: torch.Tensor, levels: FsqLevels) -> torch.Tensor:
    """Squash each dimension strictly inside (-(L-1)/2, (L-1)/2)."""
    _check_dim(z, levels, "bound")
    half, _, _ = levels._tensors(dtype=z.dtype, device=z.device)
    return half * torch.tanh(z)


def quantize(z: torch.Tensor, levels: FsqLevels) -> tuple[torch.Tensor, torch.Tensor]:
    """Round bounded inputs to the grid.

    Returns (values, digits). values carries a straight-through gradient:
    the backward pass of values is exactly the backward pass of bound(z).
    digits is a plain integer tensor with no gradient.
    """
    _check_dim(z, levels, "quantize")
    half, offset, halfdown = levels._tensors(dtype=z.dtype, device=z.device)
    b = half * torch.tanh(z)
    with torch.no_grad():
        q = torch.floor(b + offset + 0.5) - offset
        digits = torch.round(q + half).long()
        hard = q / halfdown
    values = hard + (b - b.detach())
    return values, digits


def digits_to_index(digits: torch.Tensor, levels: FsqLevels) -> torch.Tensor:
    _check_dim(digits, levels, "digits_to_index")
    lev = torch.tensor(levels.levels, device=digits.device)
    if (digits < 0).any() or (digits >= lev).any():
        raise ValidationError("digit out of range for its level count")
    place = levels.place_values(device=digits.device)
    return (digits.long() * place).sum(dim=-1)


def index_to_digits(codes: torch.Tensor | int, levels: FsqLevels) -> torch.Tensor:
    codes = torch.as_tensor(codes)
    if (codes < 0).any() or (codes >= levels.vocab_size).any():
        raise ValidationError(f"code out of range [0, {levels.vocab_size})")
    rest = codes.long()
    out = []
    for l in levels.levels:
        out.append(rest % l)
        rest = rest // l
    return torch.stack(out, dim=-1)


def index_to_values(codes: torch.Tensor | int, levels: FsqLevels, dtype=torch.float32) -> torch.Tensor:
    """Grid values for given codes; exact match for quantize's forward output."""
    codes = torch.as_tensor(codes)
    digits = index_to_digits(codes, levels)
    half, _, halfdown = levels._tensors(dtype=dtype, device=codes.device)
    q = digits.to(dtype) - half
    return q / halfdown


def values_to_index(values: torch.Tensor, levels: FsqLevels) -> torch.Tensor:
    """Inverse of index_to_values on exact grid points (nearest grid otherwise)."""
    _check_dim(values, levels, "values_to_index")
    half, _, halfdown = levels._tensors(dtype=values.dtype, device=values.device)
    digits = torch.round(values * halfdown + half).long()
    lev = torch.tensor(levels.levels, device=values.device)
    digits = digits.clamp(torch.zeros_like(lev), lev - 1)
    return digits_to_index(digits, levels)


# ---------------------------------------------------------------------------
# Token stream serialization: u32 little-endian length, then length u16
# little-endian codes. Layout documented in docs/FORMATS.md.

def write_token_stream(codes: Sequence[int] | torch.Tensor, fp: BinaryIO) -> None:
    if isinstance(codes, torch.Tensor):
        if codes.dim() != 1:
            raise ShapeError(f"token stream wants a 1-d sequence, got shape {tuple(codes.shape)}")
        codes = codes.tolist()
    codes = [int(c) for c in codes]
    for c in codes:
        if not 0 <= c <= _STREAM_MAX_CODE:
            raise ValidationError(f"code {c} does not fit the u16 stream format")
    fp.write(struct.pack("<I", len(codes)))
    fp.write(struct.pack(f"<{len(codes)}H", *codes))


def read_token_stream(fp: BinaryIO) -> torch.Tensor:
    head = fp.read(4)
    if len(head) != 4:
        raise ValidationError("token stream truncated: missing length header")
    (n,) = struct.unpack("<I", head)
    body = fp.read(2 * n)
    if len(body) != 2 * n:
        raise ValidationError(f"token stream truncated: expected {n} codes")
    return torch.tensor(struct.unpack(f"<{n}H", body), dtype=torch.long)


def save_tokens(codes, path) -> None:
    with open(path, "wb") as fp:
        write_token_stream(codes, fp)


def load_tokens(path) -> torch.Tensor:
    with open(path, "rb") as fp:
        return read_token_stream(fp)
