"""Histograms of the training-time keep-count samplers.

Draws keep-counts from each schedule kind and prints ASCII histograms.
uniform spreads over every length, pow2 is flat on powers of two, and
unifpow2 rounds a uniform draw up to the next power of two, which piles
half of all mass on the top length. Instant.
"""

import torch

from ordtok import DropoutSchedule
from ordtok.schedule import sample_keep

N = 50_000


def histogram(kind: str, k_max: int):
    sched = DropoutSchedule(kind, k_max)
    draws = sample_keep(sched, torch.Generator().manual_seed(0), N)
    print(f"\n{kind} at K={k_max}:")
    support = sched.support()
    if len(support) > 10:  # uniform support is too wide to print per-value
        support = sorted(set(int(x) for x in torch.unique(draws)))[:10]
        print(f"  ({len(sched.support())} distinct lengths; first few shown)")
    for s in support:
        frac = (draws == s).float().mean().item()
        print(f"  k={s:>4}  {frac:6.3f}  |{'#' * int(120 * frac)}")


def main():
    histogram("uniform", 64)
    histogram("pow2", 64)
    histogram("unifpow2", 64)
    histogram("unifpow2", 256)
    print("\nthe K=256 top bin sits at one half, by construction")


if __name__ == "__main__":
    main()
