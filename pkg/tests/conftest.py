import numpy as np
import pytest

from gradtrace.model import Example, ModelConfig, init_state
from gradtrace.study import gen_base_dataset, get_families
from gradtrace.trainer import TrainConfig, train

# small enough that a per-example gradient costs a millisecond or two
TINY = ModelConfig(embed_dim=16, layers=1, heads=2, context_len=256, adapter_rank=2, adapter_alpha=4.0, mlp_ratio=2)

# well-conditioned for finite differences: alpha / rank = 1 keeps the h**2
# truncation of a central difference well below 1e-6 relative
FD_MODEL = ModelConfig(embed_dim=32, layers=2, heads=2, context_len=64, adapter_rank=4, adapter_alpha=4.0)


def fd_resolution(loss: float, h: float) -> float:
    """Denominator floor for relative FD errors.

    At a 1e-6 relative tolerance this admits an absolute gap of
    eps * |loss| / h, i.e. one rounding of the loss divided by the step,
    which is the resolution limit of the difference quotient itself.
    """
    return 1e6 * np.finfo(float).eps * max(1.0, abs(loss)) / h


def short_examples(n: int = 16, seed: int = 0) -> list[Example]:
    fams = get_families(["sort-digits", "copy"])
    return gen_base_dataset(fams, (n + 1) // 2, seed, 64)[:n]


@pytest.fixture(scope="session")
def tiny_data():
    return gen_base_dataset(get_families(["copy", "reverse", "sort-digits", "uppercase"]), 6, 0, 256)


@pytest.fixture(scope="session")
def tiny_series(tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=4, lr_peak=1e-3, lr_final=1e-5, warmup_steps=2, checkpoint_stride=4)
    return train(init_state(TINY, "tiny-run"), tiny_data, cfg)


@pytest.fixture(scope="session")
def fd_state():
    """FD_MODEL after a short run, so the adapters are away from B = 0."""
    data = short_examples()
    cfg = TrainConfig(epochs=3, batch_size=4, lr_peak=1e-2, lr_final=1e-3, warmup_steps=1, checkpoint_stride=100)
    return train(init_state(FD_MODEL, "fd-run"), data, cfg).final, data


class Results:
    """Collects one PASS/FAIL line per acceptance criterion."""

    lines: list[str] = []

    @classmethod
    def record(cls, number: int, name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
        cls.lines.append(line)
        print(line)


@pytest.fixture
def acceptance_log():
    return Results


def pytest_terminal_summary(terminalreporter):
    if Results.lines:
        terminalreporter.section("acceptance")
        for line in sorted(Results.lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
