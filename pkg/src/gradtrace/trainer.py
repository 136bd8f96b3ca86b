"""Minibatch SGD on the adapter parameters, with checkpointing."""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergedError, NumericError, SizeError
from .model import (
    Example,
    ModelState,
    Scope,
    check_example,
    flatten,
    loss_and_grads,
    param_names,
    unflatten,
    adapter_shapes,
    base_shapes,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    lr_peak: float = 1e-5
    lr_final: float = 1e-7
    warmup_steps: int = 10
    checkpoint_stride: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_peak > self.lr_final > 0:
            raise ValueError("need lr_peak > lr_final > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.checkpoint_stride < 1:
            raise ValueError("checkpoint_stride must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"batch_size": 32, "checkpoint_stride": 50, **overrides})

    def steps_per_epoch(self, n_examples: int) -> int:
        return math.ceil(n_examples / self.batch_size)

    def total_steps(self, n_examples: int) -> int:
        return self.epochs * self.steps_per_epoch(n_examples)

    def schedule(self, n_examples: int) -> "LinearSchedule":
        return LinearSchedule(self.lr_peak, self.lr_final, self.warmup_steps, self.total_steps(n_examples))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LinearSchedule:
    """Linear warmup from 0 to ``peak``, then linear decay to ``final``.

    Steps are update indices ``0 .. total_steps - 1``; the last update uses
    ``final`` exactly and anything beyond is clamped there.
    """

    peak: float
    final: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total steps ({self.total_steps})")

    @property
    def last_step(self) -> int:
        return self.total_steps - 1

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if step < self.warmup_steps:
            return self.peak * step / self.warmup_steps
        if step >= self.last_step:
            return self.final
        frac = (step - self.warmup_steps) / (self.last_step - self.warmup_steps)
        return self.peak + (self.final - self.peak) * frac


def lr_at(step: int, cfg: TrainConfig, n_examples: int) -> float:
    return cfg.schedule(n_examples).lr_at(step)


def epoch_seed(seed: int, epoch: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{epoch}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    """Example order for one epoch; ``random.shuffle`` is Fisher-Yates."""
    order = list(range(n))
    random.Random(epoch_seed(seed, epoch)).shuffle(order)
    return order


@dataclass
class CheckpointSeries:
    run_id: str
    checkpoints: list[ModelState]
    schedule: dict[int, float] = field(default_factory=dict)
    losses: dict[int, float] = field(default_factory=dict)

    @property
    def steps(self) -> list[int]:
        return [s.step for s in self.checkpoints]

    @property
    def final(self) -> ModelState:
        return self.checkpoints[-1]

    def at(self, step: int) -> ModelState:
        for s in self.checkpoints:
            if s.step == step:
                return s
        raise KeyError(f"no checkpoint at step {step}")

    def __len__(self) -> int:
        return len(self.checkpoints)


def _mean_gradient(state: ModelState, batch: Sequence[Example], scope: Scope) -> tuple[float, np.ndarray]:
    names = param_names(state.config, scope)
    total = None
    loss_sum = 0.0
    for z in batch:  # canonical order keeps the reduction reproducible
        loss, grads = loss_and_grads(state, z, scope)
        loss_sum += loss
        g = flatten(grads, names)
        total = g if total is None else total + g
    return loss_sum / len(batch), total / len(batch)


def _apply_update(state: ModelState, delta_source: np.ndarray, eta: float, scope: Scope, step: int) -> ModelState:
    if scope == "adapter":
        new = state.adapter_vector() - eta * delta_source
        return state.replace(step=step, adapter=unflatten(new, adapter_shapes(state.config)))
    if scope == "base":
        flat = np.concatenate([v.reshape(-1) for v in state.base.values()])
        return state.replace(step=step, base=unflatten(flat - eta * delta_source, base_shapes(state.config)))
    raise ValueError(f"cannot update scope {scope!r}")


def single_sgd_step(state: ModelState, z: Example, eta: float) -> ModelState:
    """One batch-size-1 SGD step on the adapters: theta - eta * grad loss(z)."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    _, grads = loss_and_grads(state, z, "adapter")
    g = flatten(grads, param_names(state.config, "adapter"))
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for example {z.id!r}")
    return _apply_update(state, g, eta, "adapter", state.step + 1)


def train(
    state0: ModelState,
    data: Sequence[Example],
    cfg: TrainConfig,
    *,
    log: Callable[[str], None] | None = None,
    log_every: int = 1,
) -> CheckpointSeries:
    """Fine-tune adapters with minibatch SGD.

    ``state0.step`` may be non-zero, in which case the run resumes from that
    step; shuffling and the schedule depend only on (seed, step), so a resumed
    run matches an uninterrupted one bit for bit.
    """
    if not data:
        raise SizeError("training data is empty")
    for z in data:
        check_example(z, state0.config)
    n = len(data)
    spe = cfg.steps_per_epoch(n)
    total = cfg.total_steps(n)
    sched = cfg.schedule(n)
    series = CheckpointSeries(state0.run_id, [state0])
    state = state0
    order, order_epoch = None, -1
    for step in range(state0.step, total):
        epoch, pos = divmod(step, spe)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(n, cfg.seed, epoch), epoch
        batch = [data[i] for i in order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        eta = sched.lr_at(step)
        try:
            loss, g = _mean_gradient(state, batch, "adapter")
        except NumericError as exc:
            raise DivergedError(step, str(exc)) from exc
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            raise DivergedError(step, "non-finite loss")
        series.schedule[step] = eta
        series.losses[step] = loss
        if log is not None and (step % log_every == 0 or step == total - 1):
            log(f"step={step} loss={loss!r} lr={eta!r}")
        state = _apply_update(state, g, eta, "adapter", step + 1)
        if state.step % cfg.checkpoint_stride == 0 or state.step == total:
            series.checkpoints.append(state)
    return series


def epoch_mean_losses(series: CheckpointSeries, steps_per_epoch: int) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for step, loss in sorted(series.losses.items()):
        by_epoch.setdefault(step // steps_per_epoch, []).append(loss)
    return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def pretrain_base(
    state: ModelState,
    corpus: Sequence[Example],
    steps: int,
    lr: float = 0.05,
    batch_size: int = 8,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> ModelState:
    """Full SGD on the base weights at constant ``lr``; adapters untouched.

    Used to give the frozen base some competence before adapter fine-tuning.
    The returned state is at step 0.
    """
    if steps <= 0:
        return state
    n = len(corpus)
    spe = math.ceil(n / batch_size)
    cur = state
    order, order_epoch = None, -1
    for step in range(steps):
        epoch, pos = divmod(step, spe)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(n, seed + 7919, epoch), epoch
        batch = [corpus[i] for i in order[pos * batch_size:(pos + 1) * batch_size]]
        try:
            loss, g = _mean_gradient(cur, batch, "base")
        except NumericError as exc:
            raise DivergedError(step, str(exc)) from exc
        if log is not None and step % 10 == 0:
            log(f"pretrain step={step} loss={loss!r} lr={lr!r}")
        cur = _apply_update(cur, g, lr, "base", 0)
    return cur
