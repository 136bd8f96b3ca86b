#!/usr/bin/env python3
"""Train one desk run and trace all three strategy studies on it.

Writes, under --out:
    run/                 checkpoints and manifest
    trace-<kind>.csv     step,metric,value
    matrix-<kind>.csv    full RelInf matrices
    trace-<kind>.svg     line chart per study

Example:
    python scripts/run_studies.py --out results/desk
    python scripts/run_studies.py --out results/fast --lr-peak 1e-3 --lr-final 1e-5
"""

from __future__ import annotations

import argparse
import time
from dataclasses import replace
from pathlib import Path

from gradtrace import serialization as ser
from gradtrace.influence import GradientCache
from gradtrace.report import render_svg
from gradtrace.study import StrategyKind
from gradtrace.swift import StudyConfig, run_swift_study, train_run


def parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-peak", type=float, default=1e-5)
    p.add_argument("--lr-final", type=float, default=1e-7)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--pretrain-steps", type=int, default=0)
    p.add_argument("--kinds", default=",".join(k.value for k in StrategyKind))
    return p.parse_args()


def main() -> None:
    a = parse_args()
    base = StudyConfig.from_seed(a.seed, pretrain_steps=a.pretrain_steps)
    cfg = replace(base, train=replace(base.train, lr_peak=a.lr_peak, lr_final=a.lr_final, epochs=a.epochs))
    out = Path(a.out)

    t0 = time.perf_counter()
    series = train_run(cfg, log=print, log_every=50)
    ser.save_run(out / "run", series, cfg.to_dict())
    print(f"trained {series.final.step} steps in {time.perf_counter() - t0:.1f}s, checkpoints {series.steps}")

    cache = GradientCache()
    for kind in a.kinds.split(","):
        t1 = time.perf_counter()
        bundle = run_swift_study(kind, series, cfg, cache)
        ser.save_trace_csv(out / f"trace-{kind}.csv", bundle.rows())
        ser.save_matrix_csv(out / f"matrix-{kind}.csv", bundle.traces)
        ser.atomic_write_text(out / f"trace-{kind}.svg", render_svg(bundle.rows(), f"{kind} study"))
        print(f"{kind}: {len(bundle.labels)} metrics in {time.perf_counter() - t1:.1f}s")
        last = series.final.step
        for step, metric, value in bundle.rows():
            if step == last:
                print(f"  step {step:4d}  {metric:32s} {value: .4f}")


if __name__ == "__main__":
    main()
