"""Reconstruction metrics, rate-distortion and guidance sweeps, linear probes.

All metrics operate on pixels in [-1, 1]; PSNR uses peak 2 accordingly.
Sweeps are deterministic given (seed, image index, setting): each decode
gets its own generator derived from those three, so a single-entry sweep
reproduces the standalone reconstruct() call bit for bit and row order
never matters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import subprocess
from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn.functional as F

from . import fsq
from .errors import ValidationError, ShapeError
from .flow import GuidanceParams

_BOUND_SLACK = 1e-6


# ---------------------------------------------------------------- metrics

def mae(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a.float() - b.float()).abs().mean().item()


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio; peak 2 matches the [-1, 1] pixel range."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = F.mse_loss(a.float(), b.float()).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def cosine_grid_distance(fa: torch.Tensor, fb: torch.Tensor) -> float:
    """Mean (1 - cosine) over grid positions. Zero-norm rows count the
    cosine as 0, same convention as the alignment loss."""
    if fa.shape != fb.shape:
        raise ShapeError(f"feature shape mismatch {tuple(fa.shape)} vs {tuple(fb.shape)}")
    na = fa.norm(dim=-1)
    nb = fb.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = torch.where(ok, (fa * fb).sum(dim=-1) / denom, torch.zeros_like(na))
    return (1.0 - cos).mean().item()


def feature_distance(a: torch.Tensor, b: torch.Tensor, oracle) -> float:
    """Perceptual proxy: 1 - cosine between oracle feature grids of two
    images, averaged over positions."""
    return cosine_grid_distance(oracle.features(a), oracle.features(b))


# ----------------------------------------------------------- reconstruction

def eval_seed(seed: int, setting: int, index: int) -> int:
    # Mixes (run seed, sweep setting, image index) into one generator seed.
    return (seed * 1_000_003 + setting * 8191 + index) % (2**63 - 1)


def reconstruct(image: torch.Tensor, k: int, tokenizer, codec,
                steps: int = 25, guidance: GuidanceParams | None = None,
                oracle=None, seed: int = 0, index: int = 0,
                generator: torch.Generator | None = None,
                bound_log: list | None = None):
    """Round-trip one image through k tokens; returns (image', metrics).

    metrics always carries mae and psnr; feature_distance is present when
    an oracle is supplied.
    """
    if image.dim() != 3:
        raise ShapeError("reconstruct takes a single (H, W, 3) image")
    if guidance is None:
        guidance = GuidanceParams()
    if generator is None:
        generator = torch.Generator().manual_seed(eval_seed(seed, k, index))
    latents = codec.encode(image)
    codes = tokenizer.tokenize(latents, k)
    out_latents = tokenizer.decode_tokens(codes, steps=steps, guidance=guidance,
                                          generator=generator, bound_log=bound_log)
    out = codec.decode(out_latents)
    metrics = {"mae": mae(image, out), "psnr": psnr(image, out)}
    if oracle is not None:
        metrics["feature_distance"] = feature_distance(image, out, oracle)
    return out, metrics


# ----------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class RateDistortionRow:
    k_tokens: int
    mae: float
    psnr: float
    feature_distance: float | None
    n_images: int
    seed: int


@dataclass(frozen=True)
class GuidanceRow:
    mode: str
    scale: float
    mae: float
    psnr: float
    feature_distance: float | None
    bound_violations: int
    n_images: int
    seed: int


@dataclass(frozen=True)
class StepsRow:
    steps: int
    mae: float
    psnr: float
    feature_distance: float | None
    n_images: int
    seed: int


def default_ks(k_max: int) -> list[int]:
    """Powers of two up to k_max, plus k_max itself."""
    ks = []
    p = 1
    while p <= k_max:
        ks.append(p)
        p *= 2
    if ks[-1] != k_max:
        ks.append(k_max)
    return ks


def _check_images(images: torch.Tensor):
    if images.dim() != 4:
        raise ShapeError("expected a batch of images (n, H, W, 3)")
    if images.shape[0] == 0:
        raise ValidationError("empty image batch")


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs)


def _mean_fd(fds: list[float | None]):
    # None marks "no oracle supplied"; NaN would poison dataclass equality
    return None if fds[0] is None else _mean(fds)


def rate_distortion_sweep(images: torch.Tensor, tokenizer, codec,
                          ks: list[int] | None = None, steps: int = 25,
                          guidance: GuidanceParams | None = None,
                          oracle=None, seed: int = 0):
    """One row per token count, metrics averaged over the batch.

    A row that fails (decode blow-up, bad k) is recorded in the returned
    failure list instead of aborting the sweep.
    """
    _check_images(images)
    if ks is None:
        ks = default_ks(tokenizer.k_max)
    if guidance is None:
        guidance = GuidanceParams()
    rows: list[RateDistortionRow] = []
    failures: list[tuple[int, str]] = []
    for k in ks:
        maes, psnrs, fds = [], [], []
        try:
            for i in range(images.shape[0]):
                _, m = reconstruct(images[i], k, tokenizer, codec, steps=steps,
                                   guidance=guidance, oracle=oracle,
                                   seed=seed, index=i)
                maes.append(m["mae"])
                psnrs.append(m["psnr"])
                fds.append(m.get("feature_distance"))
        except Exception as exc:  # noqa: BLE001  - per-row isolation is the point
            failures.append((k, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(RateDistortionRow(k, _mean(maes), _mean(psnrs),
                                      _mean_fd(fds), images.shape[0], seed))
    return rows, failures


def monotonicity_report(rows: list[RateDistortionRow],
                        tolerance: float = 0.0) -> list[str]:
    """Lines flagging adjacent k pairs where MAE got worse with more tokens."""
    ordered = sorted(rows, key=lambda r: r.k_tokens)
    out = []
    for lo, hi in zip(ordered, ordered[1:]):
        if hi.mae > lo.mae + tolerance:
            out.append(f"mae rose from {lo.mae:.6f} at k={lo.k_tokens} "
                       f"to {hi.mae:.6f} at k={hi.k_tokens}")
    return out


def guidance_sweep(images: torch.Tensor, tokenizer, codec, scales: list[float],
                   mode: str = "apg", k: int | None = None, steps: int = 25,
                   oracle=None, seed: int = 0,
                   apg_r: float = 2.5, apg_eta: float = 0.0,
                   apg_beta: float = -0.5) -> list[GuidanceRow]:
    """One row per guidance scale at fixed k (default K_max).

    scale 1 short-circuits to the unguided path inside the sampler, so that
    row is bit-identical to mode "none". bound_violations counts APG steps
    whose deviation exceeded |scale - 1| * r; it stays 0 for a correct
    implementation and for non-APG modes.
    """
    if scales == []:
        return []
    _check_images(images)
    if k is None:
        k = tokenizer.k_max
    rows = []
    for si, scale in enumerate(scales):
        params = GuidanceParams(mode=mode, scale=scale, apg_r=apg_r,
                                apg_eta=apg_eta, apg_beta=apg_beta)
        maes, psnrs, fds = [], [], []
        violations = 0
        for i in range(images.shape[0]):
            log: list = []
            gen = torch.Generator().manual_seed(eval_seed(seed, k, i))
            _, m = reconstruct(images[i], k, tokenizer, codec, steps=steps,
                               guidance=params, oracle=oracle, generator=gen,
                               bound_log=log)
            violations += sum(1 for dev, bound in log if dev > bound + _BOUND_SLACK)
            maes.append(m["mae"])
            psnrs.append(m["psnr"])
            fds.append(m.get("feature_distance"))
        rows.append(GuidanceRow(mode, scale, _mean(maes), _mean(psnrs),
                                _mean_fd(fds), violations, images.shape[0], seed))
    return rows


def steps_sweep(images: torch.Tensor, tokenizer, codec, step_counts: list[int],
                k: int | None = None, guidance: GuidanceParams | None = None,
                oracle=None, seed: int = 0) -> list[StepsRow]:
    """One row per integration step count at fixed k (default K_max)."""
    if step_counts == []:
        return []
    _check_images(images)
    if k is None:
        k = tokenizer.k_max
    if guidance is None:
        guidance = GuidanceParams()
    rows = []
    for steps in step_counts:
        maes, psnrs, fds = [], [], []
        for i in range(images.shape[0]):
            gen = torch.Generator().manual_seed(eval_seed(seed, k, i))
            _, m = reconstruct(images[i], k, tokenizer, codec, steps=steps,
                               guidance=guidance, oracle=oracle, generator=gen)
            maes.append(m["mae"])
            psnrs.append(m["psnr"])
            fds.append(m.get("feature_distance"))
        rows.append(StepsRow(steps, _mean(maes), _mean(psnrs), _mean_fd(fds),
                             images.shape[0], seed))
    return rows


# ------------------------------------------------------------ linear probe

def probe_features(tokenizer, latents: torch.Tensor, k: int) -> torch.Tensor:
    """Quantized register values for the first k tokens, flattened to
    (n, k * fsq dims). This is the representation the probe sees."""
    codes = tokenizer.tokenize(latents, k)
    values = fsq.index_to_values(codes, tokenizer.levels)
    return values.reshape(values.shape[0], -1)


def linear_probe(features: torch.Tensor, labels: torch.Tensor,
                 train_frac: float = 0.75, iters: int = 300, lr: float = 0.1,
                 seed: int = 0) -> float:
    """Multinomial logistic regression on frozen features; returns held-out
    accuracy.

    The recipe is fixed (zero init, full-batch Adam, deterministic split) so
    probe numbers are comparable across runs and across k.
    """
    if features.dim() != 2:
        raise ShapeError("features must be (n, dim)")
    if labels.dim() != 1 or labels.shape[0] != features.shape[0]:
        raise ShapeError("labels must be (n,) matching features")
    if not 0.0 < train_frac < 1.0:
        raise ValidationError(f"train_frac {train_frac} outside (0, 1)")
    classes = int(labels.max().item()) + 1
    if int(labels.unique().numel()) < 2:
        raise ValidationError("probe needs at least two classes")
    n = features.shape[0]
    n_train = int(n * train_frac)
    if n_train == 0 or n_train == n:
        raise ValidationError(f"split leaves an empty side (n={n}, train_frac={train_frac})")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    tr, te = perm[:n_train], perm[n_train:]
    x = features.float()
    w = torch.zeros(classes, x.shape[1], requires_grad=True)
    b = torch.zeros(classes, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=lr)
    for _ in range(iters):
        opt.zero_grad()
        loss = F.cross_entropy(x[tr] @ w.T + b, labels[tr])
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (x[te] @ w.T + b).argmax(dim=-1)
    return (pred == labels[te]).float().mean().item()


def probe_sweep(tokenizer, latents: torch.Tensor, labels: torch.Tensor,
                ks: list[int] | None = None, **probe_kw) -> list[tuple[int, float]]:
    """(k, held-out accuracy) per token count, same probe recipe each time."""
    if ks is None:
        ks = default_ks(tokenizer.k_max)
    return [(k, linear_probe(probe_features(tokenizer, latents, k), labels,
                             **probe_kw)) for k in ks]


# ------------------------------------------------------------------ output

def write_csv(path, rows) -> None:
    """Rows are dataclass instances of one type; the header is its fields."""
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    records = [asdict(r) for r in rows]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def code_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_summary(path, config: dict, seed: int, extra: dict | None = None) -> dict:
    """JSON sidecar tying result files back to the exact setup."""
    summary = {
        "config_hash": config_hash(config),
        "revision": code_revision(),
        "seed": seed,
        "config": config,
    }
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
