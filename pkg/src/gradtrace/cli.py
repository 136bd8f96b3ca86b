"""Command-line entry point: ``gradtrace <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import serialization as ser
from .errors import GradTraceError
from .influence import GradientCache, trace
from .model import ModelConfig
from .oracle import median_rel_error, mini_retrain_check, random_triples, taylor_sweep
from .report import render_svg
from .study import PairedSets, StrategyKind, build_paired_sets, sample_eval_set, get_families
from .swift import StudyConfig, base_dataset, run_swift_study, train_run
from .trainer import TrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n\n{self.format_help()}")


def _add_study_config(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and schedule")
    g.add_argument("--seed", type=int, default=0, help="derive all seeds from this value")
    g.add_argument("--embed-dim", type=int, default=64)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--context-len", type=int, default=256)
    g.add_argument("--rank", type=int, default=8)
    g.add_argument("--alpha", type=float, default=64.0)
    g.add_argument("--epochs", type=int, default=6)
    g.add_argument("--batch-size", type=int, default=8)
    g.add_argument("--lr-peak", type=float, default=1e-5)
    g.add_argument("--lr-final", type=float, default=1e-7)
    g.add_argument("--warmup", type=int, default=10)
    g.add_argument("--stride", type=int, default=50, help="checkpoint every N steps")
    g.add_argument("--per-family", type=int, default=50)
    g.add_argument("--families", default=None, help="comma-separated task family names")
    g.add_argument("--n-eval", type=int, default=8)
    g.add_argument("--pretrain-steps", type=int, default=0)
    g.add_argument("--log-every", type=int, default=10)


def _study_config(a: argparse.Namespace) -> StudyConfig:
    families = tuple(a.families.split(",")) if a.families else None
    cfg = StudyConfig.from_seed(
        a.seed,
        model=ModelConfig(
            embed_dim=a.embed_dim, layers=a.layers, heads=a.heads, context_len=a.context_len,
            adapter_rank=a.rank, adapter_alpha=a.alpha,
        ),
        train=TrainConfig(
            epochs=a.epochs, batch_size=a.batch_size, lr_peak=a.lr_peak, lr_final=a.lr_final,
            warmup_steps=a.warmup, checkpoint_stride=a.stride,
        ),
        families=families,
        per_family_count=a.per_family,
        n_eval=a.n_eval,
        pretrain_steps=a.pretrain_steps,
    )
    if families:
        get_families(families)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gradtrace", description="Gradient-projection influence tracing at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic base dataset as JSONL")
    g.add_argument("--out", required=True)
    g.add_argument("--per-family", type=int, default=50)
    g.add_argument("--families", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--context-len", type=int, default=256)

    t = sub.add_parser("train", help="train adapters and write checkpoints + manifest")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", default=None, help="JSONL dataset (default: generate one)")
    _add_study_config(t)

    tr = sub.add_parser("trace", help="trace RelInf of probes onto evals over a run")
    tr.add_argument("--run", required=True)
    tr.add_argument("--probes", required=True)
    tr.add_argument("--evals", required=True)
    tr.add_argument("--label", default="Probe")
    tr.add_argument("--target", default="Eval")
    tr.add_argument("--out", required=True)
    tr.add_argument("--matrix", default=None, help="also write the full RelInf matrices")

    s = sub.add_parser("study", help="run one swift study end to end")
    s.add_argument("--kind", required=True, choices=[k.value for k in StrategyKind])
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--run", default=None, help="existing run directory (default: train one)")
    s.add_argument("--no-matrix", action="store_true")
    _add_study_config(s)

    o = sub.add_parser("oracle", help="retraining checks; writes a JSON report")
    o.add_argument("--out", required=True)
    o.add_argument("--run", default=None)
    o.add_argument("--triples", type=int, default=50)
    o.add_argument("--trials", type=int, default=10)
    o.add_argument("--kinds", default="cot,clarify,respond_eval")
    o.add_argument("--fine-tune-steps", type=int, default=5)
    o.add_argument("--fine-tune-lr", type=float, default=1e-3)
    o.add_argument("--k-top", type=int, default=4)
    _add_study_config(o)

    r = sub.add_parser("report", help="render a trace CSV as an SVG line chart")
    r.add_argument("trace_csv")
    r.add_argument("--out", default=None, help="default: next to the CSV with .svg")
    r.add_argument("--title", default=None)
    return p


def _emit_config(command: str, cfg: dict) -> None:
    print(json.dumps({"command": command, **cfg}, sort_keys=True, default=str), flush=True)


def _series_for(a, cfg: StudyConfig):
    if a.run:
        _, series = ser.load_run(a.run)
        return series
    return train_run(cfg, log=print, log_every=a.log_every)


def cmd_gen_data(a) -> None:
    families = get_families(a.families.split(",") if a.families else None)
    _emit_config("gen-data", {"out": a.out, "per_family": a.per_family, "seed": a.seed,
                              "families": [f.name for f in families], "context_len": a.context_len})
    from .study import gen_base_dataset

    ser.save_dataset(a.out, gen_base_dataset(families, a.per_family, a.seed, a.context_len))


def cmd_train(a) -> None:
    cfg = _study_config(a)
    _emit_config("train", {"out": a.out, "data": a.data, "run_id": cfg.run_id(), **cfg.to_dict()})
    data = ser.load_dataset(a.data, cfg.model.context_len) if a.data else base_dataset(cfg)
    series = train_run(cfg, data, log=print, log_every=a.log_every)
    ser.save_run(a.out, series, cfg.to_dict())


def cmd_trace(a) -> None:
    manifest, series = ser.load_run(a.run)
    ctx = series.final.config.context_len
    probes, evals = ser.load_dataset(a.probes, ctx), ser.load_dataset(a.evals, ctx)
    _emit_config("trace", {"run": a.run, "run_id": manifest.run_id, "probes": a.probes, "evals": a.evals,
                           "label": a.label, "target": a.target, "out": a.out, "matrix": a.matrix})
    sets = PairedSets(probes, evals)
    cross = f"{a.label}→Cross-task {a.target}" if sets.n >= 2 else None
    tr = trace(sets, series, f"{a.label}→In-task {a.target}", cross)
    ser.save_trace_csv(a.out, tr.rows())
    if a.matrix:
        ser.save_matrix_csv(a.matrix, [tr])


def cmd_study(a) -> None:
    cfg = _study_config(a)
    _emit_config("study", {"kind": a.kind, "out": a.out, "run": a.run, "run_id": cfg.run_id(), **cfg.to_dict()})
    series = _series_for(a, cfg)
    if a.run:
        cfg = replace(cfg, model=series.final.config)
    bundle = run_swift_study(a.kind, series, cfg)
    out = Path(a.out)
    ser.save_trace_csv(out / f"trace-{a.kind}.csv", bundle.rows())
    if not a.no_matrix:
        ser.save_matrix_csv(out / f"matrix-{a.kind}.csv", bundle.traces)


def cmd_oracle(a) -> None:
    cfg = _study_config(a)
    kinds = [StrategyKind(k) for k in a.kinds.split(",")]
    _emit_config("oracle", {"out": a.out, "run": a.run, "triples": a.triples, "trials": a.trials,
                            "kinds": [k.value for k in kinds], "fine_tune_steps": a.fine_tune_steps,
                            "fine_tune_lr": a.fine_tune_lr, "k_top": a.k_top, **cfg.to_dict()})
    series = _series_for(a, cfg)
    if a.run:
        cfg = replace(cfg, model=series.final.config)
    data = base_dataset(cfg)
    triples = random_triples(series, data, a.triples, cfg.data_seed)
    sweep = taylor_sweep(triples, [1e-4, 1e-5])
    report = {
        "run_id": series.run_id,
        "taylor": {f"{eta:g}": {"median_rel_error": median_rel_error(recs),
                                "records": [r.__dict__ for r in recs]} for eta, recs in sweep.items()},
        "retrain": {},
    }
    cache = GradientCache()
    ctx = cfg.model.context_len
    for kind in kinds:
        trials = []
        for t in range(a.trials):
            evals = sample_eval_set(cfg.n_eval, cfg.eval_seed + 1000 * (t + 1), get_families(cfg.families), ctx)
            sets = build_paired_sets(evals, kind, cfg.probe_seed + t, context_len=ctx)
            trials.append(mini_retrain_check(sets, series, a.k_top, a.fine_tune_steps, a.fine_tune_lr, cache).to_dict())
        report["retrain"][kind.value] = {
            "self_training_largest": sum(r["self_training_largest"] for r in trials),
            "ordering_matches": sum(r["ordering_matches"] for r in trials),
            "trials": trials,
        }
    ser.atomic_write_text(a.out, json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_report(a) -> None:
    out = a.out or str(Path(a.trace_csv).with_suffix(".svg"))
    _emit_config("report", {"trace_csv": a.trace_csv, "out": out})
    rows = ser.load_trace_csv(a.trace_csv)
    ser.atomic_write_text(out, render_svg(rows, a.title or Path(a.trace_csv).stem))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "trace": cmd_trace,
    "study": cmd_study,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        COMMANDS[args.command](args)
    except (GradTraceError, OSError, ValueError, KeyError) as exc:
        print(f"gradtrace {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
