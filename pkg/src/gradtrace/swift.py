"""End-to-end swift studies: base training run plus labeled influence traces."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

from .influence import GradientCache, InfluenceTrace, trace
from .model import Example, ModelConfig, init_state
from .study import (
    PairedSets,
    StrategyKind,
    analog_of,
    build_paired_sets,
    gen_base_dataset,
    get_families,
    make_negative,
    make_variant,
    sample_eval_set,
)
from .trainer import CheckpointSeries, TrainConfig, pretrain_base, train

ARROW = "→"


@dataclass(frozen=True)
class StudyConfig:
    """Everything that determines a study run.

    The defaults give 8 families x 50 examples, batch 8 and 6 epochs, i.e.
    a 300-step run checkpointed every 50 steps.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(checkpoint_stride=50))
    families: tuple[str, ...] | None = None
    per_family_count: int = 50
    data_seed: int = 0
    n_eval: int = 8
    eval_seed: int = 1
    probe_seed: int = 2
    pretrain_steps: int = 0
    pretrain_lr: float = 0.05

    @classmethod
    def from_seed(cls, seed: int, **overrides) -> "StudyConfig":
        """Derive every seed from one number."""
        base = cls(**overrides)
        return replace(
            base,
            model=replace(base.model, init_seed=seed),
            train=replace(base.train, seed=seed),
            data_seed=seed,
            eval_seed=seed + 1,
            probe_seed=seed + 2,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families) if self.families is not None else None
        return d

    def run_id(self) -> str:
        blob = json.dumps(
            {k: v for k, v in self.to_dict().items() if k not in ("n_eval", "eval_seed", "probe_seed")},
            sort_keys=True,
        )
        return "run-" + hashlib.blake2b(blob.encode(), digest_size=6).hexdigest()


def base_dataset(cfg: StudyConfig) -> list[Example]:
    return gen_base_dataset(get_families(cfg.families), cfg.per_family_count, cfg.data_seed, cfg.model.context_len)


def train_run(
    cfg: StudyConfig,
    data: Sequence[Example] | None = None,
    log: Callable[[str], None] | None = None,
    log_every: int = 10,
) -> CheckpointSeries:
    data = base_dataset(cfg) if data is None else list(data)
    state = init_state(cfg.model, cfg.run_id())
    if cfg.pretrain_steps:
        corpus = gen_base_dataset(get_families(cfg.families), cfg.per_family_count, cfg.data_seed + 1000, cfg.model.context_len)
        state = pretrain_base(state, corpus, cfg.pretrain_steps, cfg.pretrain_lr, cfg.train.batch_size, cfg.train.seed, log)
    return train(state, data, cfg.train, log=log, log_every=log_every)


@dataclass(frozen=True)
class StudyBundle:
    kind: StrategyKind
    traces: tuple[InfluenceTrace, ...]

    @property
    def labels(self) -> list[str]:
        out = []
        for tr in self.traces:
            out.append(tr.label_in)
            if tr.label_cross is not None:
                out.append(tr.label_cross)
        return out

    def rows(self) -> list[tuple[int, str, float]]:
        """(step, metric, value), grouped by step then in label order."""
        by_step: dict[int, list[tuple[int, str, float]]] = {}
        for tr in self.traces:
            for row in tr.rows():
                by_step.setdefault(row[0], []).append(row)
        order = {lab: i for i, lab in enumerate(self.labels)}
        return [r for step in sorted(by_step) for r in sorted(by_step[step], key=lambda r: order[r[1]])]


def _labels(src: str, dst: str) -> tuple[str, str]:
    return f"{src}{ARROW}In-task {dst}", f"{src}{ARROW}Cross-task {dst}"


def study_pairings(kind: StrategyKind | str, cfg: StudyConfig) -> list[tuple[str, str, PairedSets]]:
    """(source label, target label, paired sets) for one study."""
    kind = StrategyKind(kind)
    ctx = cfg.model.context_len
    evals = sample_eval_set(cfg.n_eval, cfg.eval_seed, get_families(cfg.families), ctx)
    analogs = [analog_of(z, cfg.probe_seed, ctx) for z in evals]
    if kind is StrategyKind.COT:
        cot = build_paired_sets(evals, kind, cfg.probe_seed, cross_task=cfg.n_eval >= 2, context_len=ctx)
        return [
            ("CoT", "non-CoT", cot),
            ("non-CoT", "non-CoT", PairedSets(analogs, evals, {"kind": "plain"})),
        ]
    pos = evals
    neg = [make_negative(z, ctx) for z in evals]
    pos_t = analogs
    neg_t = [make_negative(z, ctx) for z in analogs]
    if kind is StrategyKind.CLARIFY:
        clarify = [make_variant(z, kind, cfg.probe_seed, ctx) for z in neg]
        sources = [("Clarify", clarify), ("Pos", pos)]
    else:
        sources = [
            ("EvalPos", [make_variant(z, kind, cfg.probe_seed, ctx) for z in pos]),
            ("EvalNeg", [make_variant(z, kind, cfg.probe_seed, ctx) for z in neg]),
            ("Pos", pos),
        ]
    out = []
    for src, probes in sources:
        for dst, targets in (("Pos", pos_t), ("Neg", neg_t)):
            out.append((src, dst, PairedSets(probes, targets, {"kind": kind.value, "source": src, "target": dst})))
    return out


def run_swift_study(
    kind: StrategyKind | str,
    series: CheckpointSeries,
    cfg: StudyConfig,
    cache: GradientCache | None = None,
) -> StudyBundle:
    kind = StrategyKind(kind)
    cache = GradientCache() if cache is None else cache
    traces = []
    for src, dst, sets in study_pairings(kind, cfg):
        lab_in, lab_cross = _labels(src, dst)
        traces.append(trace(sets, series, lab_in, lab_cross if sets.n >= 2 else None, cache))
    return StudyBundle(kind, tuple(traces))
