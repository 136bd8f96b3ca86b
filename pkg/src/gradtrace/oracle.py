"""Ground truth by actually taking the steps the estimates predict."""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError
from .influence import GradientCache, influence_matrix, s_in, step_influence
from .model import Example, ModelState, completion_loss, example_gradient
from .study import PairedSets
from .trainer import CheckpointSeries, _apply_update, _mean_gradient, single_sgd_step

REL_FLOOR = 1e-12


@dataclass(frozen=True)
class TaylorRecord:
    step: int
    z: str
    z0: str
    eta: float
    predicted: float
    measured: float
    rel_error: float


def taylor_check(state: ModelState, z: Example, z0: Example, eta: float) -> TaylorRecord:
    """Compare the first-order prediction with the realized one-step loss change."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    predicted = step_influence(example_gradient(state, z), example_gradient(state, z0), eta)
    measured = completion_loss(state, z0) - completion_loss(single_sgd_step(state, z, eta), z0)
    if not (np.isfinite(predicted) and np.isfinite(measured)):
        raise NumericError("taylor check diverged")
    rel = abs(predicted - measured) / max(abs(measured), REL_FLOOR)
    return TaylorRecord(state.step, z.id, z0.id, eta, predicted, measured, rel)


def random_triples(series: CheckpointSeries, examples: Sequence[Example], count: int, seed: int):
    """``count`` (state, z, z0) draws with z != z0."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        state = series.checkpoints[int(rng.integers(len(series)))]
        i, j = rng.choice(len(examples), 2, replace=False)
        out.append((state, examples[int(i)], examples[int(j)]))
    return out


def taylor_sweep(triples, etas: Sequence[float]) -> dict[float, list[TaylorRecord]]:
    return {eta: [taylor_check(s, z, z0, eta) for s, z, z0 in triples] for eta in etas}


def median_rel_error(records: Sequence[TaylorRecord]) -> float:
    return statistics.median(r.rel_error for r in records)


# --------------------------------------------------------------------------
# mini retraining
# --------------------------------------------------------------------------

def fine_tune(state: ModelState, data: Sequence[Example], steps: int, lr: float) -> ModelState:
    """Full-batch SGD on the adapters at constant ``lr``."""
    cur = state
    for _ in range(steps):
        _, g = _mean_gradient(cur, data, "adapter")
        cur = _apply_update(cur, g, lr, "adapter", cur.step + 1)
    return cur


def total_loss(state: ModelState, examples: Sequence[Example]) -> float:
    total = 0.0
    for z in examples:
        total += completion_loss(state, z)
    return total


@dataclass
class RetrainReport:
    step: int
    fine_tune_steps: int
    lr: float
    predicted: dict[str, float]
    realized: dict[str, float]
    probe_ranking: list[str] = field(default_factory=list)
    ordering_matches: bool = False
    self_training_largest: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def mini_retrain_check(
    sets: PairedSets,
    series: CheckpointSeries | ModelState,
    k_top: int | None = None,
    steps: int = 5,
    lr: float = 1e-3,
    cache: GradientCache | None = None,
) -> RetrainReport:
    """Fine-tune the final checkpoint on each candidate set and measure.

    Conditions: ``probes``, ``evals`` (training on the targets themselves)
    and, when ``k_top`` is given, ``top-k probes`` chosen by their paired
    RelInf at the final checkpoint. Realized reduction is the drop in total
    eval loss. The predicted score of a condition is its mean paired RelInf,
    so ``evals`` is predicted at exactly 1.
    """
    state = series.final if isinstance(series, CheckpointSeries) else series
    cache = GradientCache() if cache is None else cache
    m = influence_matrix(sets, state, cache)
    diag = [float(m[i, i]) for i in range(sets.n)]
    ranking = sorted(range(sets.n), key=lambda i: (-diag[i], i))

    conditions: dict[str, list[Example]] = {"probes": list(sets.probes), "evals": list(sets.evals)}
    predicted = {"probes": s_in(sets, state, cache), "evals": 1.0}
    if k_top:
        chosen = sorted(ranking[:k_top])
        conditions[f"top-{k_top} probes"] = [sets.probes[i] for i in chosen]
        predicted[f"top-{k_top} probes"] = sum(diag[i] for i in chosen) / len(chosen)

    before = total_loss(state, sets.evals)
    realized = {}
    for name, data in conditions.items():
        tuned = fine_tune(state, data, steps, lr)
        realized[name] = before - total_loss(tuned, sets.evals)

    pred_order = predicted["probes"] < predicted["evals"]
    real_order = realized["probes"] < realized["evals"]
    others = [v for k, v in realized.items() if k != "evals"]
    return RetrainReport(
        step=state.step,
        fine_tune_steps=steps,
        lr=lr,
        predicted=predicted,
        realized=realized,
        probe_ranking=[sets.probes[i].id for i in ranking],
        ordering_matches=pred_order == real_order,
        self_training_largest=all(realized["evals"] > v for v in others),
    )
