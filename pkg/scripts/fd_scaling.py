#!/usr/bin/env python3
"""Finite-difference agreement versus step size and adapter scale.

For a few adapter scales (alpha / rank) this prints the worst relative gap
between backprop and a central difference over random coordinates, for
several step sizes h. A backward bug would show a floor that does not move
with h; truncation shrinks as h**2 and roundoff grows as 1/h.
"""

from __future__ import annotations

import argparse

import numpy as np

from gradtrace.model import ModelConfig, completion_loss, example_gradient, init_state
from gradtrace.study import gen_base_dataset, get_families
from gradtrace.trainer import TrainConfig, train


def worst_gap(state, data, h: float, coords: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    flat = state.adapter_vector()
    worst = 0.0
    for z in data:
        g = example_gradient(state, z).values
        for i in rng.choice(flat.size, coords, replace=False):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fd = (completion_loss(state.with_adapter_vector(up), z) - completion_loss(state.with_adapter_vector(dn), z)) / (2 * h)
            scale = max(abs(g[i]), abs(fd))
            if scale > 0:
                worst = max(worst, abs(g[i] - fd) / scale)
    return worst


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scales", default="1,2,4,8")
    p.add_argument("--steps", default="1e-2,1e-3,1e-4,1e-5")
    p.add_argument("--coords", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    data = gen_base_dataset(get_families(["sort-digits", "copy"]), 8, a.seed, 64)
    hs = [float(h) for h in a.steps.split(",")]
    print("alpha/r  " + "  ".join(f"h={h:<8.0e}" for h in hs))
    for s in (float(x) for x in a.scales.split(",")):
        cfg = ModelConfig(embed_dim=32, layers=2, heads=2, context_len=64, adapter_rank=4, adapter_alpha=4 * s)
        tcfg = TrainConfig(epochs=3, batch_size=4, lr_peak=1e-2, lr_final=1e-3, warmup_steps=1, checkpoint_stride=100)
        state = train(init_state(cfg), data, tcfg).final
        gaps = [worst_gap(state, data[:4], h, a.coords, a.seed) for h in hs]
        print(f"{s:7g}  " + "  ".join(f"{g:10.2e}" for g in gaps))


if __name__ == "__main__":
    main()
