import numpy as np
import pytest

from gradtrace.errors import DivergedError
from gradtrace.model import completion_loss, example_gradient, init_state
from gradtrace.trainer import (
    LinearSchedule, TrainConfig, epoch_mean_losses, epoch_order, lr_at, pretrain_base, single_sgd_step, train,
)

from conftest import TINY


def test_schedule_shape():
    s = LinearSchedule(peak=1.0, final=0.1, warmup_steps=10, total_steps=101)
    assert s.lr_at(0) == 0.0
    assert s.lr_at(5) == 0.5
    assert s.lr_at(10) == 1.0
    assert s.lr_at(55) == pytest.approx(0.55, rel=1e-15)
    assert s.lr_at(100) == 0.1
    assert s.lr_at(500) == 0.1


def test_schedule_is_monotone_after_warmup():
    s = LinearSchedule(1e-5, 1e-7, 10, 300)
    lrs = [s.lr_at(t) for t in range(300)]
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))


def test_full_scale_endpoints():
    cfg = TrainConfig.full_scale()
    n = 4096
    assert lr_at(10, cfg, n) == 1e-5
    assert lr_at(cfg.total_steps(n) - 1, cfg, n) == 1e-7


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(lr_peak=1e-7, lr_final=1e-5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        LinearSchedule(1.0, 0.1, 10, 10)


def test_epoch_order_is_a_seeded_permutation():
    a = epoch_order(50, seed=3, epoch=0)
    assert sorted(a) == list(range(50))
    assert a == epoch_order(50, seed=3, epoch=0)
    assert a != epoch_order(50, seed=3, epoch=1)
    assert a != epoch_order(50, seed=4, epoch=0)


def test_zero_epochs_returns_only_the_initial_checkpoint(tiny_data):
    s0 = init_state(TINY, "r")
    series = train(s0, tiny_data, TrainConfig(epochs=0))
    assert series.steps == [0]
    assert series.final is s0


def test_sgd_step_reduces_the_loss_on_its_example(tiny_data):
    s0 = init_state(TINY)
    z = tiny_data[0]
    assert completion_loss(single_sgd_step(s0, z, 1e-3), z) < completion_loss(s0, z)


def test_zero_learning_rate_is_the_identity(tiny_data):
    s0 = init_state(TINY)
    s1 = single_sgd_step(s0, tiny_data[0], 0.0)
    assert s1.step == 1
    assert s1.adapter_vector().tobytes() == s0.adapter_vector().tobytes()


def test_update_is_minus_eta_times_gradient(tiny_series, tiny_data):
    s0 = tiny_series.final
    z = tiny_data[3]
    eta = 1e-3
    delta = single_sgd_step(s0, z, eta).adapter_vector() - s0.adapter_vector()
    assert np.max(np.abs(delta + eta * example_gradient(s0, z).values)) <= 1e-15


def test_negative_learning_rate_rejected(tiny_data):
    with pytest.raises(ValueError):
        single_sgd_step(init_state(TINY), tiny_data[0], -1e-3)


def test_training_is_deterministic(tiny_data, tiny_series):
    cfg = TrainConfig(epochs=2, batch_size=4, lr_peak=1e-3, lr_final=1e-5, warmup_steps=2, checkpoint_stride=4)
    again = train(init_state(TINY, "tiny-run"), tiny_data, cfg)
    assert again.steps == tiny_series.steps
    for a, b in zip(again.checkpoints, tiny_series.checkpoints):
        assert a.adapter_vector().tobytes() == b.adapter_vector().tobytes()
    assert again.losses == tiny_series.losses


def test_checkpoint_steps(tiny_series, tiny_data):
    # 24 examples, batch 4: 6 steps per epoch, 12 in total, stride 4
    assert tiny_series.steps == [0, 4, 8, 12]
    assert sorted(tiny_series.schedule) == list(range(12))


def test_base_weights_stay_frozen(tiny_series):
    first, last = tiny_series.checkpoints[0], tiny_series.final
    for k in first.base:
        assert first.base[k].tobytes() == last.base[k].tobytes()
    assert first.adapter_vector().tobytes() != last.adapter_vector().tobytes()


def test_resume_matches_an_uninterrupted_run(tiny_data, tiny_series):
    cfg = TrainConfig(epochs=2, batch_size=4, lr_peak=1e-3, lr_final=1e-5, warmup_steps=2, checkpoint_stride=4)
    resumed = train(tiny_series.at(4), tiny_data, cfg)
    assert resumed.final.adapter_vector().tobytes() == tiny_series.final.adapter_vector().tobytes()


def test_epoch_losses_fall(tiny_data):
    cfg = TrainConfig(epochs=3, batch_size=4, lr_peak=3e-3, lr_final=1e-4, warmup_steps=2, checkpoint_stride=100)
    series = train(init_state(TINY), tiny_data, cfg)
    means = epoch_mean_losses(series, cfg.steps_per_epoch(len(tiny_data)))
    assert len(means) == 3
    assert means[-1] < means[0]


def test_log_lines(tiny_data):
    lines = []
    cfg = TrainConfig(epochs=1, batch_size=8, lr_peak=1e-3, lr_final=1e-5, warmup_steps=1)
    train(init_state(TINY), tiny_data, cfg, log=lines.append, log_every=2)
    assert [line.split()[0] for line in lines] == ["step=0", "step=2"]
    assert lines[0].startswith("step=0 loss=") and lines[0].endswith("lr=0.0")


def test_divergence_is_reported_with_its_step(tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=4, lr_peak=1e300, lr_final=1.0, warmup_steps=1)
    with np.errstate(all="ignore"), pytest.raises(DivergedError) as info:
        train(init_state(TINY), tiny_data, cfg)
    assert info.value.step >= 1


def test_pretraining_moves_only_the_base(tiny_data):
    s0 = init_state(TINY)
    s1 = pretrain_base(s0, tiny_data, steps=2, lr=0.05, batch_size=4)
    assert s1.step == 0
    assert s1.adapter_vector().tobytes() == s0.adapter_vector().tobytes()
    assert s1.base["head"].tobytes() != s0.base["head"].tobytes()
