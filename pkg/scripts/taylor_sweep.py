#!/usr/bin/env python3
"""How well does eta * <g_z, g_z0> predict a real one-step loss change?

Trains the default desk run, draws random (checkpoint, z, z0) triples and
reports the median relative error of the first-order prediction for a range
of learning rates. The error should fall roughly linearly with eta until
the measured change reaches float64 resolution.
"""

from __future__ import annotations

import argparse

from gradtrace.oracle import median_rel_error, random_triples, taylor_sweep
from gradtrace.swift import StudyConfig, base_dataset, train_run


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--triples", type=int, default=50)
    p.add_argument("--etas", default="1e-2,1e-3,1e-4,1e-5,1e-6,1e-7")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    cfg = StudyConfig.from_seed(a.seed)
    series = train_run(cfg)
    triples = random_triples(series, base_dataset(cfg), a.triples, a.seed)
    etas = [float(e) for e in a.etas.split(",")]
    sweep = taylor_sweep(triples, etas)
    print(f"{'eta':>8}  {'median rel err':>14}  {'ratio to next':>13}")
    meds = [median_rel_error(sweep[eta]) for eta in etas]
    for k, (eta, med) in enumerate(zip(etas, meds)):
        ratio = f"{med / meds[k + 1]:.1f}" if k + 1 < len(meds) and meds[k + 1] > 0 else ""
        print(f"{eta:8.0e}  {med:14.3e}  {ratio:>13}")


if __name__ == "__main__":
    main()
