"""Harness: schedules, EMA, checkpoints, bit-identical determinism."""

import math

import pytest
import torch

from ordtok.ar import ARModel, ArConfig, ar_nll
from ordtok.encoder import EncoderConfig
from ordtok.errors import CheckpointError, NumericError, ShapeError, ValidationError
from ordtok.schedule import DropoutSchedule
from ordtok.tokenizer import TokenizerModel
from ordtok.train import (
    OptimSettings,
    Stage1Settings,
    Stage2Settings,
    check_compatible,
    checkpoint_equal,
    ema_update,
    load_checkpoint,
    load_ema_weights,
    lr_at,
    make_checkpoint,
    pretokenize,
    save_checkpoint,
    stage1_token_rate,
    stage2_token_rate,
    train_ar,
    train_tokenizer,
    weight_decay_from_timescale,
)


# --- schedules -------------------------------------------------------------

def test_lr_schedule_endpoints_exact():
    s = OptimSettings.for_steps(1e-3, 100, 1000)
    assert lr_at(0, s) == 1e-6
    assert lr_at(100, s) == 1e-3
    assert lr_at(1000, s) == 0.01 * 1e-3
    assert lr_at(5000, s) == 0.01 * 1e-3


def test_lr_schedule_shape():
    s = OptimSettings.for_steps(1e-3, 100, 1000)
    ramp = [lr_at(i, s) for i in range(0, 101)]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    # linear ramp: midpoint is the mean of the endpoints
    assert ramp[50] == pytest.approx((1e-6 + 1e-3) / 2, rel=1e-12)
    decay = [lr_at(i, s) for i in range(100, 1001)]
    assert all(b < a for a, b in zip(decay, decay[1:]))
    mid = lr_at(550, s)  # halfway: cos(pi/2)=0 gives the midpoint
    assert mid == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-10)


def test_lr_schedule_no_warmup_and_validation():
    s = OptimSettings.for_steps(2e-3, 0, 10)
    assert lr_at(0, s) == 2e-3
    with pytest.raises(ValidationError):
        lr_at(-1, s)
    with pytest.raises(ValidationError):
        OptimSettings.for_steps(1e-3, 20, 10)
    with pytest.raises(ValidationError):
        OptimSettings.for_steps(-1e-3, 0, 10)
    with pytest.raises(ValidationError):
        OptimSettings.for_steps(1e-3, 0, 10, ema_decay=1.5)


def test_weight_decay_timescale():
    assert weight_decay_from_timescale(381470, 5.62e-4) == pytest.approx(4.665e-3, rel=1e-3)
    assert weight_decay_from_timescale(1, 1.0) == 1.0
    a = weight_decay_from_timescale(1000, 1e-3)
    assert weight_decay_from_timescale(2000, 1e-3) == pytest.approx(a / 2, rel=1e-12)
    with pytest.raises(ValidationError):
        weight_decay_from_timescale(0, 1e-3)
    with pytest.raises(ValidationError):
        weight_decay_from_timescale(10, 0.0)


def test_token_rates():
    m = tiny_tok()
    assert stage1_token_rate(m, 8) == 8 * 16
    assert stage2_token_rate(8, 64) == 512


# --- EMA -------------------------------------------------------------------

def test_ema_endpoints_and_formula():
    p = {"w": torch.tensor([2.0, 4.0])}
    e = {"w": torch.zeros(2)}
    ema_update(e, p, 0.5)
    assert torch.equal(e["w"], torch.tensor([1.0, 2.0]))
    e = {"w": torch.tensor([7.0, 7.0])}
    ema_update(e, p, 0.0)
    assert torch.equal(e["w"], p["w"])
    e = {"w": torch.tensor([7.0, 7.0])}
    ema_update(e, p, 1.0)
    assert torch.equal(e["w"], torch.tensor([7.0, 7.0]))


def test_ema_validation():
    p = {"w": torch.zeros(2)}
    with pytest.raises(ValidationError):
        ema_update({"w": torch.zeros(2)}, p, 1.5)
    with pytest.raises(ShapeError):
        ema_update({"x": torch.zeros(2)}, p, 0.5)
    with pytest.raises(ShapeError):
        ema_update({"w": torch.zeros(3)}, p, 0.5)


# --- fixtures --------------------------------------------------------------

def tiny_tok(feature_dim=None, seed=0):
    cfg = EncoderConfig(depth=1, k_max=4, patch_size=2)
    m = TokenizerModel(3, 8, 8, cfg, feature_dim=feature_dim,
                       enc_dim=16, enc_heads=2)
    m.init_weights(torch.Generator().manual_seed(seed))
    return m


def stage1(steps=20, **kw):
    return Stage1Settings(
        schedule=DropoutSchedule("pow2", 4),
        optim=OptimSettings.for_steps(1e-3, 2, steps, tokens_per_step=64),
        batch_size=4, seed=3, **kw)


def toy_latents(n=8, seed=11):
    return torch.randn(n, 3, 8, 8, generator=torch.Generator().manual_seed(seed))


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = tiny_tok()
    res = train_tokenizer(m, toy_latents(), stage1(steps=5), config={"note": "t"})
    path = tmp_path / "ck.pt"
    save_checkpoint(path, res.checkpoint)
    loaded = load_checkpoint(path, model=m)
    eq, diffs = checkpoint_equal(res.checkpoint, loaded)
    assert eq, diffs
    assert loaded["step"] == 5
    assert loaded["config"] == {"note": "t"}


def test_checkpoint_version_and_shape_refusal(tmp_path):
    m = tiny_tok()
    res = train_tokenizer(m, toy_latents(), stage1(steps=2))
    bad = dict(res.checkpoint)
    bad["version"] = 99
    p1 = tmp_path / "v.pt"
    save_checkpoint(p1, bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(p1)
    p2 = tmp_path / "s.pt"
    save_checkpoint(p2, res.checkpoint)
    other = tiny_tok(feature_dim=8)
    with pytest.raises(CheckpointError) as ei:
        load_checkpoint(p2, model=other)
    assert "projector" in str(ei.value)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_checkpoint_equal_detects_change():
    m = tiny_tok()
    res = train_tokenizer(m, toy_latents(), stage1(steps=2))
    import copy
    tampered = copy.deepcopy(res.checkpoint)
    name = next(iter(tampered["model"]))
    tampered["model"][name] = tampered["model"][name] + 1e-7
    eq, diffs = checkpoint_equal(res.checkpoint, tampered)
    assert not eq
    assert any(name in d for d in diffs)


# --- stage 1 training ------------------------------------------------------

def test_stage1_deterministic_bit_identical():
    a = train_tokenizer(tiny_tok(), toy_latents(), stage1())
    b = train_tokenizer(tiny_tok(), toy_latents(), stage1())
    eq, diffs = checkpoint_equal(a.checkpoint, b.checkpoint)
    assert eq, diffs
    assert a.losses == b.losses


def test_stage1_resume_matches_uninterrupted():
    full = train_tokenizer(tiny_tok(), toy_latents(), stage1())
    half = train_tokenizer(tiny_tok(), toy_latents(), stage1(), stop_after=10)
    assert half.checkpoint["step"] == 10
    resumed = train_tokenizer(tiny_tok(seed=0), toy_latents(), stage1(),
                              start=half.checkpoint)
    eq, diffs = checkpoint_equal(full.checkpoint, resumed.checkpoint)
    assert eq, diffs


def test_stage1_repa_zero_weight_matches_no_repa():
    feats = torch.randn(8, 16, 8, generator=torch.Generator().manual_seed(9))
    a = train_tokenizer(tiny_tok(feature_dim=8), toy_latents(),
                        stage1(repa_weight=0.0), feats=feats)
    b = train_tokenizer(tiny_tok(feature_dim=8), toy_latents(),
                        stage1(repa_weight=0.0), feats=None)
    eq, diffs = checkpoint_equal(a.checkpoint, b.checkpoint)
    assert eq, diffs
    c = train_tokenizer(tiny_tok(feature_dim=8), toy_latents(),
                        stage1(repa_weight=1.0), feats=feats)
    eq, _ = checkpoint_equal(a.checkpoint, c.checkpoint)
    assert not eq


def test_stage1_per_batch_k_and_logging(capsys):
    res = train_tokenizer(tiny_tok(), toy_latents(),
                          stage1(steps=4, per_batch_k=True, log_every=2))
    assert len(res.losses) == 4
    out = capsys.readouterr().out
    assert "step 2/4" in out and "step 4/4" in out


def test_stage1_aborts_on_nonfinite():
    m = tiny_tok()
    with torch.no_grad():
        m.decoder.final_proj.weight.fill_(1e38)  # velocity overflows to inf
    with pytest.raises(NumericError) as ei:
        train_tokenizer(m, toy_latents(), stage1(steps=3))
    assert ei.value.step == 0


def test_nan_weights_caught_at_quantizer_head():
    m = tiny_tok()
    with torch.no_grad():
        m.head_proj.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        train_tokenizer(m, toy_latents(), stage1(steps=3))


def test_stage1_empty_dataset_rejected():
    with pytest.raises(ValidationError):
        train_tokenizer(tiny_tok(), torch.zeros(0, 3, 8, 8), stage1())


def test_clip_invariant():
    m = tiny_tok()
    x = toy_latents(4)
    g = torch.Generator().manual_seed(5)
    out = m.training_forward(x, torch.randn(x.shape, generator=g),
                             torch.rand(4, generator=g),
                             torch.tensor([4, 4, 4, 4]))
    ((out.u_hat - x) ** 2).mean().backward()
    torch.nn.utils.clip_grad_norm_(m.parameters(), 1e-3)
    total = math.sqrt(sum(float((p.grad ** 2).sum())
                          for p in m.parameters() if p.grad is not None))
    assert total <= 1e-3 + 1e-6


def test_ema_differs_from_live_weights_and_loads():
    m = tiny_tok()
    res = train_tokenizer(m, toy_latents(), stage1())
    live = {k: v.clone() for k, v in m.state_dict().items()}
    assert not checkpoint_equal({"m": live}, {"m": res.checkpoint["ema"]})[0]
    load_ema_weights(m, res.checkpoint)
    now = dict(m.state_dict())
    eq, diffs = checkpoint_equal({"m": dict(now)}, {"m": res.checkpoint["ema"]})
    assert eq, diffs


# --- stage 2 training ------------------------------------------------------

def tiny_ar(vocab=64000, seed=0):
    m = ARModel(ArConfig(depth=1, k_max=4, num_classes=12, vocab=vocab))
    m.init_weights(torch.Generator().manual_seed(seed))
    return m


def stage2(steps=15, **kw):
    return Stage2Settings(
        optim=OptimSettings.for_steps(1e-3, 2, steps, tokens_per_step=16,
                                      betas=(0.9, 0.95), weight_decay=0.05),
        batch_size=4, seed=6, **kw)


def test_pretokenize_frozen_and_matches_tokenize():
    tok = tiny_tok()
    lat = toy_latents(6)
    codes = pretokenize(tok, lat, k=4)
    assert codes.shape == (6, 4)
    assert torch.equal(codes, tok.tokenize(lat, 4))


def test_compatibility_checks():
    tok = tiny_tok()
    check_compatible(tok, tiny_ar())
    with pytest.raises(ValidationError):
        check_compatible(tok, ARModel(ArConfig(depth=1, k_max=4, vocab=100)))
    with pytest.raises(ValidationError):
        check_compatible(tok, ARModel(ArConfig(depth=1, k_max=2)))


def test_stage2_deterministic_and_resume():
    seqs = torch.randint(0, 64000, (8, 4), generator=torch.Generator().manual_seed(7))
    cls = torch.arange(8) % 12
    a = train_ar(tiny_ar(), seqs, cls, stage2())
    b = train_ar(tiny_ar(), seqs, cls, stage2())
    eq, diffs = checkpoint_equal(a.checkpoint, b.checkpoint)
    assert eq, diffs
    half = train_ar(tiny_ar(), seqs, cls, stage2(), stop_after=7)
    resumed = train_ar(tiny_ar(), seqs, cls, stage2(), start=half.checkpoint)
    eq, diffs = checkpoint_equal(a.checkpoint, resumed.checkpoint)
    assert eq, diffs


def test_stage2_validation():
    with pytest.raises(ValidationError):
        train_ar(tiny_ar(vocab=100), torch.tensor([[101]]), torch.tensor([0]), stage2())
    with pytest.raises(ValidationError):
        train_ar(tiny_ar(), torch.zeros(1, 5, dtype=torch.long), torch.tensor([0]), stage2())
    with pytest.raises(ShapeError):
        train_ar(tiny_ar(), torch.zeros(2, 4, dtype=torch.long), torch.tensor([0]), stage2())


def test_stage2_cond_dropout_trains_null_path():
    seqs = torch.randint(0, 300, (6, 4), generator=torch.Generator().manual_seed(8))
    cls = torch.arange(6) % 12
    settings = dict(batch_size=6, seed=2)
    base = OptimSettings.for_steps(3e-3, 0, 120, tokens_per_step=24, betas=(0.9, 0.95),
                                   weight_decay=0.05)
    with_drop = train_ar(tiny_ar(vocab=300), seqs, cls,
                         Stage2Settings(optim=base, cond_dropout=0.3, **settings))
    without = train_ar(tiny_ar(vocab=300), seqs, cls,
                       Stage2Settings(optim=base, cond_dropout=0.0, **settings))
    m1, m0 = tiny_ar(vocab=300), tiny_ar(vocab=300)
    load_ema_weights(m1, with_drop.checkpoint)
    load_ema_weights(m0, without.checkpoint)
    with torch.no_grad():
        null1 = ar_nll(m1, seqs, None).item()
        null0 = ar_nll(m0, seqs, None).item()
    assert null1 < null0 - 0.1
