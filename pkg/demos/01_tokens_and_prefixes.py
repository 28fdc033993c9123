"""Codes, values, streams, and the prefix property.

Walks the quantizer algebra on a few hand-picked codes, writes a token
stream to disk and reads it back, then shows that a short tokenization is
an exact prefix of a longer one. Runs in a couple of seconds.
"""

import tempfile
from pathlib import Path

import torch

from ordtok import EncoderConfig, FsqLevels, TokenizerModel, fsq
from ordtok.codec import IdentityPatch
from ordtok.data import synth_dataset


def main():
    levels = FsqLevels()
    print(f"levels {list(levels.levels)}: {levels.dim} dims, vocabulary {levels.vocab_size}")

    for code in (0, 1, 7, 63999):
        values = fsq.index_to_values(torch.tensor([code]), levels)[0]
        back = fsq.values_to_index(values.unsqueeze(0), levels).item()
        pretty = " ".join(f"{v:+.2f}" for v in values.tolist())
        print(f"  code {code:5d} -> [{pretty}] -> code {back}")

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "tokens.bin"
        codes = torch.tensor([17, 4242, 63999])
        fsq.save_tokens(codes, path)
        again = fsq.load_tokens(path)
        print(f"stream round trip: {codes.tolist()} -> {path.stat().st_size} bytes "
              f"-> {again.tolist()}")

    # a random-weight tokenizer is enough to show the structural property:
    # the first k codes never depend on how many registers follow them
    images, _ = synth_dataset(2, seed=0, size=16)
    codec = IdentityPatch(2)
    latents = codec.encode(images)
    model = TokenizerModel(codec.channels(), 8, 8,
                           EncoderConfig(depth=1, k_max=16), feature_dim=None)
    model.init_weights(torch.Generator().manual_seed(0))
    model.eval()
    short = model.tokenize(latents, 4)
    full = model.tokenize(latents, 16)
    assert torch.equal(short, full[:, :4])
    print(f"k=4 codes      {short[0].tolist()}")
    print(f"k=16, first 4  {full[0, :4].tolist()}  (identical, by construction)")


if __name__ == "__main__":
    main()
