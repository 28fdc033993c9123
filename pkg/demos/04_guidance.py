"""What the guidance modes do to a decode.

Decodes the same token sequence under no guidance, plain conditional
extrapolation, and the projected variant, from identical noise. Then prints
the projected mode's per-step deviation from the conditional velocity next
to its ceiling |s-1|*r. Seconds to run; the model is random-weight, the
numbers are only there to show the knobs.
"""

import torch

from ordtok import EncoderConfig, GuidanceParams, TokenizerModel


def build_model():
    m = TokenizerModel(3, 8, 8, EncoderConfig(depth=1, k_max=4),
                       feature_dim=None, enc_dim=16, enc_heads=2)
    g = torch.Generator().manual_seed(7)
    m.init_weights(g)
    # random init zeroes the adaLN gates; nudge everything so the
    # conditional and unconditional paths actually disagree
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=g))
    m.eval()
    return m


def main():
    model = build_model()
    codes = model.tokenize(torch.randn(1, 3, 8, 8,
                                       generator=torch.Generator().manual_seed(1)), 4)[0]
    print(f"codes {codes.tolist()}")

    def run(params, bound_log=None):
        return model.decode_tokens(codes, steps=16, guidance=params,
                                   generator=torch.Generator().manual_seed(0),
                                   bound_log=bound_log)

    base = run(GuidanceParams(mode="none", scale=1.0))
    for label, params in [
        ("cfg s=1", GuidanceParams(mode="cfg", scale=1.0)),
        ("cfg s=3", GuidanceParams(mode="cfg", scale=3.0)),
        ("apg s=3", GuidanceParams(mode="apg", scale=3.0)),
        ("apg s=7.5", GuidanceParams()),
    ]:
        out = run(params)
        print(f"{label:>9}: moved {(out - base).abs().mean().item():.4f} "
              f"from the unguided decode")

    log: list = []
    run(GuidanceParams(), bound_log=log)
    bound = log[0][1]
    print(f"\nprojected guidance, bound |s-1|*r = {bound:.2f}:")
    for i, (dev, _) in enumerate(log):
        bar = "#" * int(40 * dev / bound)
        print(f"  step {i:2d} deviation {dev:7.4f} |{bar}")


if __name__ == "__main__":
    main()
