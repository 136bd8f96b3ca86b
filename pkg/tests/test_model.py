import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradtrace.errors import DimensionError, LengthError
from gradtrace.model import (
    BOS, EOS, PAD, SEP, Example, ModelConfig, _bind, adapter_delta, adapter_param_count, adapter_shapes,
    completion_loss, decode, encode, example_gradient, init_state, logits, loss_and_grads, loss_layout,
    token_gradients, token_losses,
)
from gradtrace.tensor import Tape

from conftest import FD_MODEL, TINY, fd_resolution, short_examples


def _zeroed(state, *suffixes):
    base = {k: (np.zeros_like(v) if k.endswith(suffixes) else v) for k, v in state.base.items()}
    return state.replace(base=base)


def test_special_ids():
    assert (BOS, SEP, EOS, PAD) == (256, 257, 258, 259)


def test_encode_bytes():
    assert encode("Hi!") == [72, 105, 33]
    assert encode("é") == [0xC3, 0xA9]


def test_encode_rejects_empty_and_overlong():
    with pytest.raises(LengthError):
        encode("", "response")
    with pytest.raises(LengthError):
        encode("x" * 255, "query", context_len=256)
    assert len(encode("x" * 254, "query", context_len=256)) == 254


def test_decode_names_special_tokens():
    z = Example.from_text("e", "copy", "ab", "c")
    assert z.sequence() == [97, 98, SEP, 99, EOS]
    assert decode(z.sequence()) == "ab<sep>c<eos>"


@settings(max_examples=50)
@given(st.text(min_size=1, max_size=40).filter(lambda s: len(s.encode()) <= 40))
def test_encode_decode_roundtrip(text):
    assert decode(encode(text)) == text


def test_example_length_limit():
    with pytest.raises(LengthError):
        Example.from_text("e", "copy", "q" * 200, "r" * 60, context_len=256)
    assert Example.from_text("e", "copy", "q" * 200, "r" * 54, context_len=256).length == 256


def test_loss_layout_masks_only_the_completion():
    z = Example.from_text("e", "copy", "abc", "xy")
    inputs, targets, mask = loss_layout(z)
    assert list(inputs) == [97, 98, 99, SEP, 120, 121]
    assert list(targets) == [98, 99, SEP, 120, 121, EOS]
    assert list(mask) == [0, 0, 0, 1, 1, 1]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(adapter_rank=0)
    assert ModelConfig().adapter_scale == 8.0


def test_adapter_count_formula():
    cfg = ModelConfig()
    d, h, r = cfg.embed_dim, cfg.hidden_dim, cfg.adapter_rank
    assert adapter_param_count(cfg) == cfg.layers * 2 * r * (d + h)
    z = Example.from_text("e", "copy", "ab", "ab")
    assert len(example_gradient(init_state(TINY), z)) == adapter_param_count(TINY)


def test_zero_head_gives_uniform_loss():
    state = _zeroed(init_state(TINY), "head")
    z = Example.from_text("e", "copy", "abcd", "xyz")
    # three response bytes plus the end token, each at probability 1/260
    assert completion_loss(state, z) == pytest.approx(4 * math.log(260), rel=1e-12)
    np.testing.assert_allclose(token_losses(state, z), [math.log(260)] * 4, rtol=1e-12)


def test_forward_is_deterministic(tiny_data):
    s1, s2 = init_state(TINY), init_state(TINY)
    z = tiny_data[0]
    assert completion_loss(s1, z) == completion_loss(s2, z)
    assert example_gradient(s1, z).values.tobytes() == example_gradient(s2, z).values.tobytes()


def test_logits_are_causal():
    state = init_state(TINY)
    seq = list(b"hello world")
    other = seq[:5] + list(b"XXXXXX")
    a, b = logits(state, seq), logits(state, other)
    np.testing.assert_array_equal(a[:5], b[:5])
    assert not np.array_equal(a[5:], b[5:])


def test_query_matters_only_through_attention():
    """With every attention output projection zeroed, the query cannot reach the response."""
    state = init_state(TINY)
    z1 = Example.from_text("a", "copy", "Copy: abcdef.", "xyz")
    z2 = Example.from_text("b", "copy", "Copy: fedcba.", "xyz")
    assert completion_loss(state, z1) != completion_loss(state, z2)
    blind = _zeroed(state, "attn.wo")
    assert completion_loss(blind, z1) == completion_loss(blind, z2)


def test_fresh_adapters_leave_the_base_output_unchanged():
    state = init_state(TINY)
    no_adapter = state.replace(adapter={k: np.zeros_like(v) for k, v in state.adapter.items()})
    seq = list(b"abc")
    np.testing.assert_array_equal(logits(state, seq), logits(no_adapter, seq))


def test_adapter_b_gradient_is_nonzero_at_init():
    state = init_state(TINY)
    _, grads = loss_and_grads(state, Example.from_text("e", "copy", "ab", "ab"))
    for name in adapter_shapes(TINY):
        if name.endswith("lora_b"):
            assert np.abs(grads[name]).max() > 0
        else:
            assert not grads[name].any()  # dL/dA is proportional to B = 0


def test_doubling_alpha_doubles_the_adapter_contribution():
    cfg2 = ModelConfig(**{**TINY.to_dict(), "adapter_alpha": 2 * TINY.adapter_alpha})
    s1 = init_state(TINY)
    rng = np.random.default_rng(0)
    adapter = {k: v + 0.01 * rng.normal(size=v.shape) for k, v in s1.adapter.items()}
    s1 = s1.replace(adapter=adapter)
    s2 = init_state(cfg2).replace(adapter=adapter)
    x = np.random.default_rng(1).normal(size=(3, TINY.embed_dim))
    deltas = []
    for st_ in (s1, s2):
        t = Tape()
        p = _bind(t, st_, "none")
        a, b = p["layers.0.mlp.up.lora_a"], p["layers.0.mlp.up.lora_b"]
        deltas.append(adapter_delta(t.constant(x), a, b, st_.config.adapter_scale).value)
    np.testing.assert_allclose(deltas[1], 2 * deltas[0], rtol=1e-14)


def test_token_gradients_sum_to_the_example_gradient(tiny_series):
    state = tiny_series.final
    z = Example.from_text("e", "reverse", "Reverse: abc.", "[cba]")
    parts = token_gradients(state, z)
    assert len(parts) == len(z.response) + 1
    total = np.sum(parts, axis=0)
    g = example_gradient(state, z).values
    assert np.max(np.abs(total - g)) <= 1e-12 * max(1.0, np.max(np.abs(g)))


def test_gradient_matches_finite_differences_on_20_coordinates(fd_state):
    state, data = fd_state
    z = data[0]
    g = example_gradient(state, z).values
    flat = state.adapter_vector()
    rng = np.random.default_rng(7)
    h = 1e-4
    loss0 = completion_loss(state, z)
    floor = fd_resolution(loss0, h)
    worst = 0.0
    for i in rng.choice(flat.size, 20, replace=False):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (completion_loss(state.with_adapter_vector(up), z) - completion_loss(state.with_adapter_vector(dn), z)) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor))
    assert worst <= 1e-6


def test_fd_error_at_default_scale_is_truncation():
    """At alpha/r = 8 the gap to central differences shrinks as h**2, so it is the FD error, not ours."""
    cfg = ModelConfig(embed_dim=16, layers=1, heads=2, context_len=64, adapter_rank=2, adapter_alpha=16.0)
    state = init_state(cfg)
    rng = np.random.default_rng(0)
    state = state.with_adapter_vector(state.adapter_vector() + 0.05 * rng.normal(size=adapter_param_count(cfg)))
    z = short_examples(1)[0]
    g = example_gradient(state, z).values
    flat = state.adapter_vector()
    i = int(np.argmax(np.abs(g)))

    def gap(h):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (completion_loss(state.with_adapter_vector(up), z) - completion_loss(state.with_adapter_vector(dn), z)) / (2 * h)
        return abs(fd - g[i])

    ratio = gap(1e-2) / gap(1e-3)
    assert 50 < ratio < 200


def test_state_validates_shapes():
    state = init_state(TINY)
    bad = dict(state.adapter)
    bad["layers.0.mlp.up.lora_a"] = np.zeros((1, 1))
    with pytest.raises(DimensionError):
        state.replace(adapter=bad)


def test_state_arrays_are_read_only():
    state = init_state(TINY)
    with pytest.raises(ValueError):
        state.base["head"][0, 0] = 1.0


def test_content_hash_tracks_parameters():
    s = init_state(TINY)
    v = s.adapter_vector()
    v[0] += 1e-12
    assert s.content_hash() == init_state(TINY).content_hash()
    assert s.content_hash() != s.with_adapter_vector(v).content_hash()


def test_example_longer_than_model_context_is_rejected():
    cfg = ModelConfig(**{**TINY.to_dict(), "context_len": 8})
    z = Example.from_text("e", "copy", "abcd", "efg", context_len=256)
    with pytest.raises(LengthError):
        completion_loss(init_state(cfg), z)
