"""Representation-alignment loss and the feature oracles that feed it.

The decoder's first-block patch activations are projected through a small
MLP and pulled toward per-position target features by a cosine loss. The
target provider is abstracted: a frozen random projection gives cheap,
deterministic, resolution-independent features for tests and desk runs; a
precomputed-features file lets real embeddings be dropped in. Only the
mechanism (project, resample, cosine) is exercised here, not any specific
feature extractor.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .layers import seeded_normal_

_FEATURE_MAGIC = b"ORDF"
_FEATURE_VERSION = 1


class FrozenRandomProjection:
    """Fixed random linear map over non-overlapping image patches.

    Each of grid_side x grid_side patches is resized-then-flattened to a
    canonical pixel count and multiplied by one shared projection matrix
    drawn once from the seed. Linear with no bias, so a zero image maps to
    zero features; images whose side is not grid_side*patch are bilinearly
    resized first.
    """

    def __init__(self, feature_dim: int, grid_side: int, seed: int = 0, patch: int = 8):
        if feature_dim < 1 or grid_side < 1 or patch < 1:
            raise ValidationError("feature_dim, grid_side, patch must be positive")
        self.feature_dim = feature_dim
        self.grid_side = grid_side
        self.patch = patch
        g = torch.Generator().manual_seed(seed)
        w = torch.empty(feature_dim, 3 * patch * patch)
        seeded_normal_(w, 1.0 / (3 * patch * patch) ** 0.5, g)
        self.weight = w

    def features(self, image: torch.Tensor, index: int | None = None) -> torch.Tensor:
        if image.dim() != 3 or image.shape[-1] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        side = self.grid_side * self.patch
        x = image.permute(2, 0, 1).unsqueeze(0).float()
        if x.shape[-2:] != (side, side):
            x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
        # (1, 3, g, p, g, p) -> (g*g, 3*p*p), patches in raster order
        g, p = self.grid_side, self.patch
        cells = x.reshape(3, g, p, g, p).permute(1, 3, 0, 2, 4).reshape(g * g, 3 * p * p)
        return cells @ self.weight.T


class PrecomputedFeatures:
    """Per-image feature records read from a file written by
    write_feature_file. Records are keyed by dataset index in write order."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            head = f.read(20)
        if len(head) < 20 or head[:4] != _FEATURE_MAGIC:
            raise ValidationError(f"not a feature file: {path}")
        _, version, _, grid_side, feature_dim, count = struct.unpack("<4sHHIII", head)
        if version != _FEATURE_VERSION:
            raise ValidationError(f"feature file version {version} unsupported")
        self.grid_side = grid_side
        self.feature_dim = feature_dim
        self.count = count
        self._record = grid_side * grid_side * feature_dim

    def features(self, image: torch.Tensor | None = None,
                 index: int | None = None) -> torch.Tensor:
        if index is None:
            raise ValidationError("precomputed features are keyed by dataset index")
        if not 0 <= index < self.count:
            raise ValidationError(f"index {index} outside stored range [0, {self.count})")
        offset = 20 + 4 * self._record * index
        arr = np.fromfile(self.path, dtype="<f4", count=self._record, offset=offset)
        return torch.from_numpy(arr.reshape(self.grid_side ** 2, self.feature_dim).copy())


def write_feature_file(path, feats: torch.Tensor) -> None:
    """feats: (count, grid_side^2, feature_dim); grid must be square."""
    if feats.dim() != 3:
        raise ShapeError("expected (count, positions, feature_dim)")
    side = int(round(feats.shape[1] ** 0.5))
    if side * side != feats.shape[1]:
        raise ShapeError(f"{feats.shape[1]} positions is not a square grid")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHIII", _FEATURE_MAGIC, _FEATURE_VERSION, 0,
                            side, feats.shape[2], feats.shape[0]))
        f.write(np.ascontiguousarray(feats.detach().numpy(), dtype="<f4").tobytes())


def oracle_features(oracle, image: torch.Tensor, index: int | None = None) -> torch.Tensor:
    feats = oracle.features(image, index=index)
    if not torch.isfinite(feats).all():
        raise ValidationError("oracle produced non-finite features")
    return feats


class RepaProjector(nn.Module):
    """3-layer MLP, hidden ratio 4, from decoder width to oracle feature dim."""

    def __init__(self, dim: int, feature_dim: int):
        super().__init__()
        hidden = 4 * dim
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, feature_dim),
        )

    def forward(self, x):
        return self.net(x)


class RepaLossResult(NamedTuple):
    loss: torch.Tensor
    degenerate: int


def resample_grid(acts: torch.Tensor, patch_hw: tuple[int, int], grid_side: int) -> torch.Tensor:
    """(B, ph*pw, F) -> (B, grid_side^2, F), bilinear on the spatial grid."""
    B, N, Fdim = acts.shape
    ph, pw = patch_hw
    if ph * pw != N:
        raise ShapeError(f"{N} rows do not form a {ph}x{pw} grid")
    if (ph, pw) == (grid_side, grid_side):
        return acts
    x = acts.transpose(1, 2).reshape(B, Fdim, ph, pw)
    x = F.interpolate(x, size=(grid_side, grid_side), mode="bilinear", align_corners=False)
    return x.reshape(B, Fdim, grid_side * grid_side).transpose(1, 2)


def repa_loss(acts: torch.Tensor, feats: torch.Tensor, projector: RepaProjector,
              patch_hw: tuple[int, int]) -> RepaLossResult:
    """mean over positions of (1 - cos(projected, target)).

    acts: (B, N, dim) patch activations from the capture layer; feats:
    (B, grid_side^2, feature_dim) oracle targets. A zero-norm vector on
    either side makes the cosine at that position undefined; the term is
    taken as 0 (so the position contributes 1) and counted.
    """
    if acts.dim() == 2:
        acts = acts.unsqueeze(0)
    if feats.dim() == 2:
        feats = feats.unsqueeze(0)
    if acts.shape[0] != feats.shape[0]:
        raise ShapeError("batch sizes disagree")
    side = int(round(feats.shape[1] ** 0.5))
    if side * side != feats.shape[1]:
        raise ShapeError(f"{feats.shape[1]} target positions is not a square grid")
    proj = resample_grid(projector(acts), patch_hw, side)
    if proj.shape != feats.shape:
        raise ShapeError(f"projected {tuple(proj.shape)} vs targets {tuple(feats.shape)}")
    na = proj.norm(dim=-1)
    nb = feats.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = torch.where(ok, (proj * feats).sum(-1) / denom, torch.zeros_like(na))
    return RepaLossResult((1 - cos).mean(), int((~ok).sum()))
