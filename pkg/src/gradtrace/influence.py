"""Gradient-projection influence scores and their traces over checkpoints.

Sign convention: a *positive* step influence means a predicted *decrease* of
the evaluation loss, i.e. ``eta * <grad l(z), grad l(z0)>`` approximates
``l(z0; theta_t) - l(z0; theta_{t+1})`` after an SGD step on ``z``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateGradientError, DimensionError, NumericError, ProvenanceError, SizeError
from .model import Example, GradientVector, ModelState, Scope, completion_loss, example_gradient
from .study import PairedSets
from .trainer import CheckpointSeries, single_sgd_step

EPS = 1e-30


def worker_count() -> int:
    env = os.environ.get("GRADTRACE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _values(g) -> np.ndarray:
    return g.values if isinstance(g, GradientVector) else np.asarray(g, dtype=np.float64)


def dot(g1, g2) -> float:
    """Inner product accumulated strictly left to right."""
    if isinstance(g1, GradientVector) and isinstance(g2, GradientVector):
        if g1.run_id != g2.run_id or g1.step != g2.step:
            raise ProvenanceError(
                f"gradients from ({g1.run_id!r}, step {g1.step}) and ({g2.run_id!r}, step {g2.step})"
            )
    a, b = _values(g1), _values(g2)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cannot dot shapes {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0
    # cumsum is a sequential accumulate, unlike np.dot / np.sum
    return float(np.cumsum(a * b)[-1])


def step_influence(g_z, g_z0, eta: float) -> float:
    """Predicted one-step loss decrease on z0 from an SGD step on z."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return eta * dot(g_z, g_z0)


def rel_inf(g_z, g_z0) -> float:
    """Influence of z on z0 relative to z0's influence on itself."""
    den = dot(g_z0, g_z0)
    if not den > EPS:
        who = g_z0.example_id if isinstance(g_z0, GradientVector) else "eval"
        raise DegenerateGradientError(f"gradient of {who!r} has squared norm {den!r} <= {EPS}")
    return dot(g_z, g_z0) / den


def _seq_mean(values: Iterable[float], count: int) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / count


def s_in_from_matrix(m: np.ndarray) -> float:
    n = m.shape[0]
    return _seq_mean((float(m[i, i]) for i in range(n)), n)


def s_cross_from_matrix(m: np.ndarray) -> float:
    n = m.shape[0]
    if n < 2:
        raise SizeError("cross-task score needs n >= 2")
    return _seq_mean((float(m[i, j]) for i in range(n) for j in range(n) if j != i), n * (n - 1))


# --------------------------------------------------------------------------
# gradient cache
# --------------------------------------------------------------------------

class GradientCache:
    """Per-example gradients keyed by checkpoint content and example id.

    The key includes a hash of the parameters, so two states that share a
    (run, step) label but differ in content never collide.
    """

    def __init__(self, scope: Scope = "adapter", threads: int | None = None):
        self.scope = scope
        self.threads = threads or worker_count()
        self._store: dict[tuple, GradientVector] = {}
        self._hashes: dict[int, tuple[ModelState, str]] = {}
        self.computed = 0

    def _hash(self, state: ModelState) -> str:
        hit = self._hashes.get(id(state))
        if hit is None or hit[0] is not state:
            hit = (state, state.content_hash())
            self._hashes[id(state)] = hit
        return hit[1]

    def key(self, state: ModelState, z: Example) -> tuple:
        return (state.run_id, state.step, self._hash(state), z.id, self.scope)

    def get_many(self, state: ModelState, examples: Sequence[Example]) -> list[GradientVector]:
        keys = [self.key(state, z) for z in examples]
        missing: dict[tuple, Example] = {}
        for k, z in zip(keys, examples):
            if k not in self._store and k not in missing:
                missing[k] = z
        if missing:
            todo = list(missing.items())
            fn = lambda kz: example_gradient(state, kz[1], self.scope)  # noqa: E731
            if self.threads > 1 and len(todo) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    results = list(pool.map(fn, todo))
            else:
                results = [fn(kz) for kz in todo]
            for (k, _), g in zip(todo, results):
                self._store[k] = g
            self.computed += len(todo)
        return [self._store[k] for k in keys]

    def get(self, state: ModelState, z: Example) -> GradientVector:
        return self.get_many(state, [z])[0]

    def __len__(self) -> int:
        return len(self._store)


def _grads(sets: PairedSets, state: ModelState, cache: GradientCache | None):
    cache = GradientCache() if cache is None else cache
    g = cache.get_many(state, list(sets.probes) + list(sets.evals))
    return g[: sets.n], g[sets.n:]


def _rel_inf_at(gp, ge, i: int, j: int, step: int | None) -> float:
    try:
        return rel_inf(gp[i], ge[j])
    except DegenerateGradientError as exc:
        where = f"step {step}, " if step is not None else ""
        raise DegenerateGradientError(f"{where}eval index {j}: {exc}") from exc


def matrix_from_grads(gp: Sequence, ge: Sequence, step: int | None = None) -> np.ndarray:
    if len(gp) != len(ge):
        raise SizeError(f"{len(gp)} probe gradients vs {len(ge)} eval gradients")
    n = len(ge)
    m = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            m[i, j] = _rel_inf_at(gp, ge, i, j, step)
    return m


def in_task_score(gp: Sequence, ge: Sequence, step: int | None = None) -> float:
    """(1/n) * sum_i RelInf(probe_i, eval_i), from precomputed gradients."""
    if len(gp) != len(ge) or not ge:
        raise SizeError("need equal, non-zero numbers of probe and eval gradients")
    n = len(ge)
    return _seq_mean((_rel_inf_at(gp, ge, i, i, step) for i in range(n)), n)


def cross_task_score(gp: Sequence, ge: Sequence, step: int | None = None) -> float:
    """Mean RelInf(probe_i, eval_j) over i != j, from precomputed gradients."""
    if len(gp) != len(ge):
        raise SizeError("need equal numbers of probe and eval gradients")
    n = len(ge)
    if n < 2:
        raise SizeError("cross-task score needs n >= 2")
    vals = (_rel_inf_at(gp, ge, i, j, step) for i in range(n) for j in range(n) if j != i)
    return _seq_mean(vals, n * (n - 1))


def influence_matrix(sets: PairedSets, state: ModelState, cache: GradientCache | None = None) -> np.ndarray:
    """M[i, j] = RelInf(probe_i, eval_j) at ``state``."""
    gp, ge = _grads(sets, state, cache)
    return matrix_from_grads(gp, ge, state.step)


def s_in(sets: PairedSets, state: ModelState, cache: GradientCache | None = None) -> float:
    """Average in-task influence of the probes on their paired evals."""
    gp, ge = _grads(sets, state, cache)
    return in_task_score(gp, ge, state.step)


def s_cross(sets: PairedSets, state: ModelState, cache: GradientCache | None = None) -> float:
    """Average cross-task influence: every probe on every non-paired eval."""
    if sets.n < 2:
        raise SizeError("cross-task score needs n >= 2")
    gp, ge = _grads(sets, state, cache)
    return cross_task_score(gp, ge, state.step)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    step: int
    matrix: np.ndarray = field(repr=False)
    s_in: float
    s_cross: float | None


@dataclass(frozen=True)
class InfluenceTrace:
    run_id: str
    label_in: str
    label_cross: str | None
    records: tuple[TraceRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def steps(self) -> list[int]:
        return [r.step for r in self.records]

    def series(self) -> dict[str, list[tuple[int, float]]]:
        out = {self.label_in: [(r.step, r.s_in) for r in self.records]}
        if self.label_cross is not None:
            out[self.label_cross] = [(r.step, r.s_cross) for r in self.records]
        return out

    def rows(self) -> list[tuple[int, str, float]]:
        """(step, metric, value) rows, step-major."""
        rows = []
        for r in self.records:
            rows.append((r.step, self.label_in, r.s_in))
            if self.label_cross is not None:
                rows.append((r.step, self.label_cross, r.s_cross))
        return rows

    def check_redundancy(self) -> bool:
        for r in self.records:
            if s_in_from_matrix(r.matrix) != r.s_in:
                return False
            if r.s_cross is not None and s_cross_from_matrix(r.matrix) != r.s_cross:
                return False
        return True


def trace(
    sets: PairedSets,
    series: CheckpointSeries | Sequence[ModelState],
    label_in: str,
    label_cross: str | None = None,
    cache: GradientCache | None = None,
) -> InfluenceTrace:
    """RelInf matrix, s_in and s_cross at every checkpoint.

    ``label_cross=None`` skips the cross-task score (needed when n == 1).
    """
    states = series.checkpoints if isinstance(series, CheckpointSeries) else list(series)
    if not states:
        raise SizeError("checkpoint series is empty")
    if label_cross is not None and sets.n < 2:
        raise SizeError("cross-task score needs n >= 2")
    cache = GradientCache() if cache is None else cache
    records = []
    for state in states:
        m = influence_matrix(sets, state, cache)
        si = s_in(sets, state, cache)
        sc = s_cross(sets, state, cache) if label_cross is not None else None
        if si != s_in_from_matrix(m) or (sc is not None and sc != s_cross_from_matrix(m)):
            raise NumericError(f"step {state.step}: aggregate scores disagree with the stored matrix")
        records.append(TraceRecord(state.step, m, si, sc))
    run_id = states[0].run_id
    return InfluenceTrace(run_id, label_in, label_cross, tuple(records))


# --------------------------------------------------------------------------
# batch-size-1 replay
# --------------------------------------------------------------------------

EtaSchedule = Sequence[float] | Callable[[int], float]


def _etas(etas: EtaSchedule, steps: int) -> list[float]:
    if callable(etas):
        return [float(etas(t)) for t in range(steps)]
    etas = [float(e) for e in etas]
    if len(etas) < steps:
        raise SizeError(f"eta schedule has {len(etas)} entries for {steps} steps")
    return etas[:steps]


def replay(z: Example, state0: ModelState, steps: int, etas: EtaSchedule) -> list[ModelState]:
    """States theta_0 .. theta_T from repeated SGD steps on ``z`` alone."""
    states = [state0]
    for eta in _etas(etas, steps):
        try:
            states.append(single_sgd_step(states[-1], z, eta))
        except NumericError as exc:
            raise NumericError(f"replay diverged at step {len(states) - 1}: {exc}") from exc
    return states


def tracin_measured(z: Example, z0: Example, state0: ModelState, steps: int, etas: EtaSchedule) -> float:
    """Sum over replayed steps of l(z0; theta_t) - l(z0; theta_{t+1})."""
    losses = [completion_loss(s, z0) for s in replay(z, state0, steps, etas)]
    total = 0.0
    for a, b in zip(losses, losses[1:]):
        total += a - b
    if not np.isfinite(total):
        raise NumericError("non-finite measured influence")
    return total


def tracin_approx(z: Example, z0: Example, state0: ModelState, steps: int, etas: EtaSchedule) -> float:
    """Sum over replayed steps of eta_t * <grad l(z), grad l(z0)>."""
    return float(sum(tracin_approx_terms(z, z0, state0, steps, etas)))


def tracin_approx_terms(z: Example, z0: Example, state0: ModelState, steps: int, etas: EtaSchedule) -> list[float]:
    etas = _etas(etas, steps)
    states = replay(z, state0, steps, etas)
    terms = []
    for eta, s in zip(etas, states):
        terms.append(step_influence(example_gradient(s, z), example_gradient(s, z0), eta))
    return terms
