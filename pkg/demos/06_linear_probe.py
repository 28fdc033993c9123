"""Probing token prefixes with a linear classifier.

Builds a three-class latent dataset with well-separated class prototypes,
runs it through a random-weight tokenizer, and fits the fixed probe recipe
on the quantized values of the first k tokens. Feature width grows with k
(6 values per token); on a dataset this separable every prefix length
should already be enough. Seconds to run.
"""

import torch

import ordtok.evalsuite as ev
from ordtok import EncoderConfig, TokenizerModel


def main():
    g = torch.Generator().manual_seed(21)
    protos = 8.0 * torch.randn(3, 12, 8, 8, generator=g)
    latents = protos.repeat_interleave(20, 0) + 0.05 * torch.randn(60, 12, 8, 8, generator=g)
    labels = torch.arange(3).repeat_interleave(20)

    tok = TokenizerModel(12, 8, 8, EncoderConfig(depth=1, k_max=8),
                         feature_dim=None, enc_dim=16, enc_heads=2)
    gg = torch.Generator().manual_seed(4)
    tok.init_weights(gg)
    with torch.no_grad():
        for p in tok.parameters():
            p.add_(0.5 * torch.randn(p.shape, generator=gg))
    tok.eval()

    print(f"{'k':>3} {'feature dim':>12} {'held-out acc':>13}")
    for k, acc in ev.probe_sweep(tok, latents, labels, ks=[1, 2, 4, 8]):
        dim = ev.probe_features(tok, latents, k).shape[1]
        print(f"{k:>3} {dim:>12} {acc:>13.3f}")


if __name__ == "__main__":
    main()
