"""Two-stage pipeline end to end: tokenize, model the codes, generate.

Trains a small tokenizer on synthetic shapes, freezes it, pretokenizes the
dataset, trains a class-conditional next-token model on the code sequences,
then samples codes for each class and decodes them back to images. The
point is the plumbing, not the picture quality. A few minutes on a CPU.
"""

import time
from pathlib import Path

import torch

from ordtok import (
    ARModel,
    ArConfig,
    DropoutSchedule,
    EncoderConfig,
    GenerationRequest,
    GuidanceParams,
    OptimSettings,
    Stage1Settings,
    Stage2Settings,
    TokenizerModel,
    generate,
    train_ar,
    train_tokenizer,
)
from ordtok.codec import IdentityPatch
from ordtok.data import save_image, synth_dataset
from ordtok.train import check_compatible, pretokenize

K = 8
OUT = Path("runs") / "demo-generation"


def main():
    images, labels = synth_dataset(24, seed=1, size=16)
    codec = IdentityPatch(2)
    latents = codec.encode(images)
    n_classes = int(labels.max().item()) + 1
    print(f"{images.shape[0]} images, {n_classes} classes")

    tok = TokenizerModel(codec.channels(), 8, 8,
                         EncoderConfig(depth=2, k_max=K), feature_dim=None)
    tok.init_weights(torch.Generator().manual_seed(0))
    # Same symmetry-breaking nudge as the rate-distortion demo.
    gn = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in tok.parameters():
            p += 0.1 * torch.randn(p.shape, generator=gn)
    t0 = time.monotonic()
    train_tokenizer(tok, latents, Stage1Settings(
        schedule=DropoutSchedule("pow2", K),
        optim=OptimSettings.for_steps(2e-3, 30, 600, weight_decay=0.0),
        batch_size=16, cond_dropout=0.1, repa_weight=0.0,
        seed=0, deterministic=True))
    tok.eval()
    print(f"stage 1 done in {time.monotonic() - t0:.0f}s")

    sequences = pretokenize(tok, latents, K)
    ar = ARModel(ArConfig(depth=2, k_max=K, num_classes=n_classes,
                          vocab=tok.vocab_size))
    ar.init_weights(torch.Generator().manual_seed(0))
    check_compatible(tok, ar)
    t0 = time.monotonic()
    train_ar(ar, sequences, labels, Stage2Settings(
        optim=OptimSettings.for_steps(3e-3, 30, 300, weight_decay=0.0),
        batch_size=16, cond_dropout=0.1, seed=0, deterministic=True))
    ar.eval()
    print(f"stage 2 done in {time.monotonic() - t0:.0f}s")

    OUT.mkdir(parents=True, exist_ok=True)
    for c in range(min(4, n_classes)):
        codes = generate(ar, GenerationRequest(class_id=c, k_tokens=K,
                                               top_k=16, seed=c))
        lat = tok.decode_tokens(codes, steps=25,
                                guidance=GuidanceParams(mode="cfg", scale=1.0),
                                generator=torch.Generator().manual_seed(c))
        path = OUT / f"class{c}.png"
        save_image(path, codec.decode(lat))
        print(f"class {c}: codes {codes.tolist()} -> {path}")


if __name__ == "__main__":
    main()
