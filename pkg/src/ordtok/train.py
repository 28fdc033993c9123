"""Optimization harness shared by both stages: schedules, EMA, clipping,
checkpointing, deterministic mode.

Budgets are stated in tokens, converted to steps through tokens_per_step.
One token means one 2x2 latent patch in stage 1 and one discrete code in
stage 2; the *_token_rate helpers compute the conversion.

Per-step randomness comes from a single dedicated generator whose state is
checkpointed, with a fixed draw order (stage 1: batch indices, keep
lengths, timesteps, noise, conditioning dropout; stage 2: batch indices,
conditioning dropout). Deterministic mode pins torch to one thread so
reduction order is stable; two runs with the same settings then produce
bit-identical checkpoints, and a resumed run matches an uninterrupted one.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .ar import ARModel, ar_nll
from .errors import CheckpointError, NumericError, ShapeError, ValidationError
from .flow import condition_dropout, rf_loss, sample_timestep
from .repa import repa_loss
from .schedule import DropoutSchedule, sample_keep
from .tokenizer import TokenizerModel

CKPT_VERSION = 1


@dataclass(frozen=True)
class OptimSettings:
    peak_lr: float
    warmup_tokens: int
    total_tokens: int
    tokens_per_step: int = 1
    betas: tuple = (0.9, 0.99)
    weight_decay: float | None = None
    clip_norm: float = 1.0
    ema_decay: float = 0.998
    warmup_floor: float = 1e-6
    final_ratio: float = 0.01

    def __post_init__(self):
        if self.peak_lr <= 0 or self.clip_norm <= 0 or self.tokens_per_step < 1:
            raise ValidationError("peak_lr, clip_norm, tokens_per_step must be positive")
        if self.warmup_tokens > self.total_tokens:
            raise ValidationError(
                f"warmup_tokens {self.warmup_tokens} exceeds total_tokens {self.total_tokens}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValidationError("ema_decay must lie in [0, 1]")

    @classmethod
    def for_steps(cls, peak_lr, warmup_steps, total_steps, tokens_per_step=1, **kw):
        return cls(peak_lr, warmup_steps * tokens_per_step,
                   total_steps * tokens_per_step, tokens_per_step, **kw)

    @property
    def warmup_steps(self) -> int:
        return self.warmup_tokens // self.tokens_per_step

    @property
    def total_steps(self) -> int:
        return max(1, self.total_tokens // self.tokens_per_step)


def stage1_token_rate(model: TokenizerModel, batch_size: int) -> int:
    return batch_size * model.encoder.n_patches


def stage2_token_rate(batch_size: int, seq_len: int) -> int:
    return batch_size * seq_len


def lr_at(step: int, s: OptimSettings) -> float:
    """Linear ramp from the warmup floor to peak, then cosine to
    final_ratio*peak; exact at all three endpoints."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    w, t = s.warmup_steps, s.total_steps
    final = s.final_ratio * s.peak_lr
    if w > 0 and step < w:
        return s.warmup_floor + (s.peak_lr - s.warmup_floor) * step / w
    if step >= t:
        return final
    progress = (step - w) / (t - w)
    return final + (s.peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def weight_decay_from_timescale(n_iter: int, lr: float) -> float:
    if n_iter <= 0 or lr <= 0:
        raise ValidationError("n_iter and lr must be positive")
    return 1.0 / (n_iter * lr)


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """ema <- decay*ema + (1-decay)*params, in place; endpoints exact."""
    if not 0.0 <= decay <= 1.0:
        raise ValidationError("decay must lie in [0, 1]")
    if ema.keys() != params.keys():
        raise ShapeError("ema/param key sets disagree")
    if decay == 1.0:
        return ema
    with torch.no_grad():
        for name, p in params.items():
            e = ema[name]
            if e.shape != p.shape:
                raise ShapeError(f"{name}: ema {tuple(e.shape)} vs param {tuple(p.shape)}")
            if decay == 0.0:
                e.copy_(p)
            else:
                e.mul_(decay).add_(p, alpha=1.0 - decay)
    return ema


@contextmanager
def deterministic_mode():
    """Single-thread torch so reduction order is fixed."""
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


@contextmanager
def _null_context():
    yield


# --- checkpoints -----------------------------------------------------------

def state_manifest(state: dict) -> dict:
    return {k: [str(v.dtype), list(v.shape)] for k, v in state.items()}


def make_checkpoint(model, optimizer, ema: dict, generator: torch.Generator,
                    step: int, config: dict | None = None) -> dict:
    model_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return {
        "version": CKPT_VERSION,
        "config": dict(config or {}),
        "step": step,
        "model": model_state,
        "manifest": state_manifest(model_state),
        "optimizer": optimizer.state_dict(),
        "ema": {k: v.clone() for k, v in ema.items()},
        "rng": generator.get_state(),
    }


def save_checkpoint(path, ckpt: dict) -> None:
    torch.save(ckpt, path)


def manifest_diff(manifest: dict, state: dict) -> list:
    lines = []
    for k in sorted(set(manifest) - set(state)):
        lines.append(f"checkpoint-only tensor: {k}")
    for k in sorted(set(state) - set(manifest)):
        lines.append(f"model-only tensor: {k}")
    for k in sorted(set(manifest) & set(state)):
        want = [str(state[k].dtype), list(state[k].shape)]
        if manifest[k] != want:
            lines.append(f"{k}: checkpoint {manifest[k]} vs model {want}")
    return lines


def load_checkpoint(path, model=None) -> dict:
    try:
        ckpt = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(ckpt, dict) or "version" not in ckpt:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if ckpt["version"] != CKPT_VERSION:
        raise CheckpointError(
            f"checkpoint version {ckpt['version']} != supported {CKPT_VERSION}")
    if model is not None:
        diff = manifest_diff(ckpt["manifest"], dict(model.state_dict()))
        if diff:
            raise CheckpointError("checkpoint does not fit the model:\n  "
                                  + "\n  ".join(diff))
    return ckpt


def _tensors_equal(a, b, path, diffs):
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        same = (isinstance(a, torch.Tensor) and isinstance(b, torch.Tensor)
                and a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b))
        if not same:
            diffs.append(path)
    elif isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                diffs.append(f"{path}.{k}")
            else:
                _tensors_equal(a[k], b[k], f"{path}.{k}", diffs)
    elif isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        if len(a) != len(b):
            diffs.append(path)
        else:
            for i, (x, y) in enumerate(zip(a, b)):
                _tensors_equal(x, y, f"{path}[{i}]", diffs)
    elif a != b:
        diffs.append(path)


def checkpoint_equal(a: dict, b: dict) -> tuple[bool, list]:
    """Tensor-wise bitwise comparison; returns (equal, diff paths)."""
    diffs: list = []
    _tensors_equal(a, b, "", diffs)
    return (not diffs, diffs)


def _restore(ckpt, model, optimizer, generator, settings: OptimSettings):
    model.load_state_dict(ckpt["model"])
    optimizer.load_state_dict(ckpt["optimizer"])
    # weight decay is recomputed from the *current* total, not the saved one
    wd = (settings.weight_decay if settings.weight_decay is not None
          else weight_decay_from_timescale(settings.total_steps, settings.peak_lr))
    for group in optimizer.param_groups:
        group["weight_decay"] = wd
    print(f"resuming at step {ckpt['step']} with weight decay {wd:.6g}")
    generator.set_state(ckpt["rng"])
    ema = {k: v.clone() for k, v in ckpt["ema"].items()}
    return ema, int(ckpt["step"])


# --- stage 1 ---------------------------------------------------------------

class TrainResult(NamedTuple):
    losses: list
    checkpoint: dict


@dataclass(frozen=True)
class Stage1Settings:
    schedule: DropoutSchedule
    optim: OptimSettings
    batch_size: int = 8
    noise_s: float = 0.25
    cond_dropout: float = 0.2
    repa_weight: float = 1.0
    per_batch_k: bool = False
    seed: int = 0
    deterministic: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def _make_optimizer(model, settings: OptimSettings):
    wd = (settings.weight_decay if settings.weight_decay is not None
          else weight_decay_from_timescale(settings.total_steps, settings.peak_lr))
    return torch.optim.AdamW(model.parameters(), lr=settings.warmup_floor,
                             betas=settings.betas, weight_decay=wd)


def train_tokenizer(model: TokenizerModel, latents: torch.Tensor,
                    settings: Stage1Settings, feats: torch.Tensor | None = None,
                    start: dict | None = None, stop_after: int | None = None,
                    config: dict | None = None) -> TrainResult:
    """Stage 1: flow-matching reconstruction plus weighted alignment loss.

    latents: (N, c, h, w) clean latents; feats: optional (N, positions,
    feature_dim) precomputed oracle targets, required for a nonzero
    repa_weight to have any effect. start resumes from a checkpoint dict;
    stop_after halts early at that step count (for mid-run checkpoints).
    """
    if latents.dim() != 4 or latents.shape[0] < 1:
        raise ValidationError("need a nonempty (N, c, h, w) latent dataset")
    n = latents.shape[0]
    opt = _make_optimizer(model, settings.optim)
    gen = torch.Generator()
    gen.manual_seed(settings.seed)
    if start is not None:
        ema, step0 = _restore(start, model, opt, gen, settings.optim)
    else:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
        step0 = 0
    total = settings.optim.total_steps
    stop = total if stop_after is None else min(stop_after, total)
    use_repa = (settings.repa_weight != 0 and model.projector is not None
                and feats is not None)
    losses: list = []
    ctx = deterministic_mode() if settings.deterministic else _null_context()
    with ctx:
        for step in range(step0, stop):
            lr = lr_at(step, settings.optim)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.randint(0, n, (settings.batch_size,), generator=gen)
            x0 = latents[idx]
            if settings.per_batch_k:
                k = sample_keep(settings.schedule, gen, 1).expand(settings.batch_size)
            else:
                k = sample_keep(settings.schedule, gen, settings.batch_size)
            t = sample_timestep(gen, settings.noise_s, settings.batch_size)
            eps = torch.randn(x0.shape, generator=gen)
            _, null_mask = condition_dropout(x0, settings.cond_dropout, gen)
            out = model.training_forward(x0, eps, t, k, null_mask=null_mask,
                                         with_acts=use_repa)
            loss = rf_loss(out.u_hat, eps, x0)
            if use_repa:
                res = repa_loss(out.acts, feats[idx], model.projector,
                                model.decoder.patch_hw)
                loss = loss + settings.repa_weight * res.loss
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss {loss.item()}", step=step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), settings.optim.clip_norm)
            opt.step()
            ema_update(ema, dict(model.state_dict()), settings.optim.ema_decay)
            losses.append(loss.item())
            if settings.log_every and (step + 1) % settings.log_every == 0:
                print(f"step {step + 1}/{total} lr {lr:.3e} loss {losses[-1]:.4f}")
    return TrainResult(losses, make_checkpoint(model, opt, ema, gen, stop, config))


# --- stage 2 ---------------------------------------------------------------

@dataclass(frozen=True)
class Stage2Settings:
    optim: OptimSettings
    batch_size: int = 8
    cond_dropout: float = 0.1
    seed: int = 0
    deterministic: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def check_compatible(tok_model: TokenizerModel, ar_model: ARModel) -> None:
    if tok_model.vocab_size != ar_model.cfg.vocab:
        raise ValidationError(
            f"tokenizer vocab {tok_model.vocab_size} != generator vocab "
            f"{ar_model.cfg.vocab}")
    if tok_model.k_max > ar_model.cfg.k_max:
        raise ValidationError(
            f"tokenizer k_max {tok_model.k_max} exceeds generator k_max "
            f"{ar_model.cfg.k_max}")


def pretokenize(tok_model: TokenizerModel, latents: torch.Tensor,
                k: int | None = None) -> torch.Tensor:
    """Tokenize a dataset with a frozen tokenizer; asserts the weights are
    bit-identical before and after."""
    before = {name: p.detach().clone() for name, p in tok_model.state_dict().items()}
    with torch.no_grad():
        codes = tok_model.tokenize(latents, k)
    for name, p in tok_model.state_dict().items():
        if not torch.equal(before[name], p):
            raise RuntimeError(f"frozen tokenizer changed during pre-tokenization: {name}")
    return codes


def train_ar(model: ARModel, sequences: torch.Tensor, class_ids: torch.Tensor,
             settings: Stage2Settings, start: dict | None = None,
             stop_after: int | None = None, config: dict | None = None) -> TrainResult:
    """Stage 2: next-token cross-entropy over pre-tokenized sequences with
    conditioning dropout."""
    if sequences.dim() != 2 or sequences.shape[0] < 1:
        raise ValidationError("need a nonempty (N, L) sequence dataset")
    if sequences.shape[0] != class_ids.shape[0]:
        raise ShapeError("sequences and class_ids disagree on N")
    if sequences.max() >= model.cfg.vocab or sequences.min() < 0:
        raise ValidationError(
            f"sequence codes exceed generator vocabulary {model.cfg.vocab}")
    if sequences.shape[1] > model.cfg.k_max:
        raise ValidationError(
            f"sequence length {sequences.shape[1]} exceeds k_max {model.cfg.k_max}")
    n = sequences.shape[0]
    opt = _make_optimizer(model, settings.optim)
    gen = torch.Generator()
    gen.manual_seed(settings.seed)
    if start is not None:
        ema, step0 = _restore(start, model, opt, gen, settings.optim)
    else:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
        step0 = 0
    total = settings.optim.total_steps
    stop = total if stop_after is None else min(stop_after, total)
    losses: list = []
    ctx = deterministic_mode() if settings.deterministic else _null_context()
    with ctx:
        for step in range(step0, stop):
            lr = lr_at(step, settings.optim)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.randint(0, n, (settings.batch_size,), generator=gen)
            null_mask = torch.rand(settings.batch_size, generator=gen) < settings.cond_dropout
            loss = ar_nll(model, sequences[idx], class_ids[idx], null_mask=null_mask)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss {loss.item()}", step=step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), settings.optim.clip_norm)
            opt.step()
            ema_update(ema, dict(model.state_dict()), settings.optim.ema_decay)
            losses.append(loss.item())
            if settings.log_every and (step + 1) % settings.log_every == 0:
                print(f"step {step + 1}/{total} lr {lr:.3e} loss {losses[-1]:.4f}")
    return TrainResult(losses, make_checkpoint(model, opt, ema, gen, stop, config))


def load_ema_weights(model, ckpt: dict) -> None:
    """Swap the EMA tensors in; evaluation always runs on these."""
    model.load_state_dict(ckpt["ema"])
