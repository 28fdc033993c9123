"""The assembled tokenizer: prefix-exact sequences, condition assembly,
straight-through training path."""

import pytest
import torch

from ordtok import fsq
from ordtok.encoder import EncoderConfig
from ordtok.errors import ShapeError, ValidationError
from ordtok.flow import GuidanceParams, rf_loss
from ordtok.tokenizer import TokenizerModel


def tiny_model(feature_dim=None, seed=0, k_max=4):
    cfg = EncoderConfig(depth=1, k_max=k_max, patch_size=2)
    m = TokenizerModel(3, 8, 8, cfg, feature_dim=feature_dim)
    m.init_weights(torch.Generator().manual_seed(seed))
    return m


def test_vocab_and_structure():
    m = tiny_model()
    assert m.vocab_size == 64000
    assert m.projector is None
    assert m.mask_token.shape == (6,)
    m2 = tiny_model(feature_dim=12)
    assert m2.projector is not None
    assert m2.projector.net[-1].out_features == 12


def test_tokenize_shapes_and_range():
    m = tiny_model()
    g = torch.Generator().manual_seed(1)
    x = torch.randn(3, 8, 8, generator=g)
    codes = m.tokenize(x)
    assert codes.shape == (4,) and codes.dtype == torch.long
    assert codes.min() >= 0 and codes.max() < 64000
    batch = m.tokenize(torch.randn(5, 3, 8, 8, generator=g), k=2)
    assert batch.shape == (5, 2)


def test_tokenize_prefix_exact():
    m = tiny_model()
    g = torch.Generator().manual_seed(2)
    x = torch.randn(3, 8, 8, generator=g)
    full = m.tokenize(x)
    for k in (1, 2, 3, 4):
        assert torch.equal(m.tokenize(x, k), full[:k])


def test_tokenize_deterministic():
    m = tiny_model()
    x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(3))
    assert torch.equal(m.tokenize(x), m.tokenize(x))


def test_tokenize_validation():
    m = tiny_model()
    x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(4))
    with pytest.raises(ValidationError):
        m.tokenize(x, k=0)
    with pytest.raises(ValidationError):
        m.tokenize(x, k=5)
    with pytest.raises(ShapeError):
        m.tokenize(torch.zeros(3, 8, 10))


def test_condition_from_codes():
    m = tiny_model()
    codes = torch.tensor([0, 63999])
    cond = m.condition_from_codes(codes)
    assert cond.shape == (4, 6)
    want = fsq.index_to_values(codes, m.levels)
    assert torch.equal(cond[:2], want)
    assert torch.equal(cond[2], m.mask_token.detach())
    assert torch.equal(cond[3], m.mask_token.detach())
    with pytest.raises(ValidationError):
        m.condition_from_codes(torch.tensor([64000]))
    with pytest.raises(ValidationError):
        m.condition_from_codes(torch.tensor([-1]))
    with pytest.raises(ShapeError):
        m.condition_from_codes(torch.zeros(2, 2, dtype=torch.long))


def test_decode_tokens_smoke():
    m = tiny_model()
    with torch.no_grad():
        m.decoder.final_proj.weight.add_(
            0.02 * torch.randn_like(m.decoder.final_proj.weight))
    codes = torch.tensor([7, 123, 4000])
    out = m.decode_tokens(codes, steps=3, guidance=GuidanceParams(mode="none"),
                          generator=torch.Generator().manual_seed(5))
    assert out.shape == (3, 8, 8)
    assert torch.isfinite(out).all()
    again = m.decode_tokens(codes, steps=3, guidance=GuidanceParams(mode="none"),
                            generator=torch.Generator().manual_seed(5))
    assert torch.equal(out, again)


def test_training_forward_shapes_and_grid_values():
    m = tiny_model()
    g = torch.Generator().manual_seed(6)
    x0 = torch.randn(2, 3, 8, 8, generator=g)
    eps = torch.randn(2, 3, 8, 8, generator=g)
    t = torch.rand(2, generator=g)
    k = torch.tensor([1, 4])
    out = m.training_forward(x0, eps, t, k, with_acts=True)
    assert out.u_hat.shape == (2, 3, 8, 8)
    assert out.acts.shape == (2, 16, 64)
    assert out.values.shape == (2, 4, 6)
    assert out.codes.shape == (2, 4)
    # straight-through values land on the quantization grid
    rt = fsq.index_to_values(out.codes, m.levels)
    assert torch.allclose(out.values.detach(), rt, atol=1e-6)


def test_training_forward_gradients_reach_encoder():
    m = tiny_model()
    # zero-init decoder blocks everything; open the output path first
    with torch.no_grad():
        m.decoder.final_proj.weight.add_(
            0.05 * torch.randn_like(m.decoder.final_proj.weight))
        for blk in m.decoder.blocks:
            blk.ada_reg.weight.add_(0.05 * torch.randn_like(blk.ada_reg.weight))
            blk.ada_patch.weight.add_(0.05 * torch.randn_like(blk.ada_patch.weight))
    g = torch.Generator().manual_seed(7)
    x0 = torch.randn(2, 3, 8, 8, generator=g)
    eps = torch.randn(2, 3, 8, 8, generator=g)
    t = torch.full((2,), 0.5)
    k = torch.tensor([2, 2])
    out = m.training_forward(x0, eps, t, k)
    rf_loss(out.u_hat, eps, x0).backward()
    assert m.encoder.patch_embed.weight.grad is not None
    assert m.encoder.patch_embed.weight.grad.abs().sum() > 0
    assert m.head_proj.weight.grad.abs().sum() > 0
    assert m.mask_token.grad is not None
    assert m.mask_token.grad.abs().sum() > 0


def test_training_forward_learns():
    torch.manual_seed(0)
    m = tiny_model(seed=1)
    g = torch.Generator().manual_seed(8)
    x0 = torch.randn(4, 3, 8, 8, generator=g)
    opt = torch.optim.Adam(m.parameters(), lr=1e-2)
    first = last = None
    for _ in range(150):
        eps = torch.randn(4, 3, 8, 8, generator=g)
        t = torch.rand(4, generator=g)
        k = torch.randint(1, 5, (4,), generator=g)
        out = m.training_forward(x0, eps, t, k)
        loss = rf_loss(out.u_hat, eps, x0)
        if first is None:
            first = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = loss.item()
    assert last < 0.7 * first
