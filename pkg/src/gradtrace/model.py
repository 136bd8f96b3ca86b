"""Byte-level causal decoder with frozen base weights and low-rank adapters.

A sequence is laid out as ``query + [SEP] + response + [EOS]``. The model reads
every token but only the positions that predict the response tokens and the
end token contribute to the loss, which is a *sum* of per-token negative
log-likelihoods.

Adapters sit on the MLP up and down projections::

    y = x @ W + b + (alpha / r) * (x @ A) @ B

with ``A`` of shape (in, r) and ``B`` of shape (r, out). ``B`` starts at zero,
so an untrained adapter leaves the base layer untouched.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import DimensionError, LengthError
from .tensor import Tape, Tensor

N_BYTES = 256
BOS, SEP, EOS, PAD = 256, 257, 258, 259
SPECIAL_NAMES = {BOS: "<bos>", SEP: "<sep>", EOS: "<eos>", PAD: "<pad>"}

Scope = Literal["adapter", "base", "all"]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    embed_dim: int = 64
    layers: int = 2
    heads: int = 2
    context_len: int = 256
    adapter_rank: int = 8
    adapter_alpha: float = 64.0
    mlp_ratio: int = 4
    init_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < N_BYTES + 4:
            raise ValueError("vocab_size must cover 256 bytes plus 4 special tokens")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.adapter_rank < 1:
            raise ValueError("adapter_rank must be >= 1")
        if self.adapter_rank > min(self.embed_dim, self.hidden_dim):
            raise ValueError("adapter_rank exceeds the adapted layers' dimensions")
        if self.context_len < 4:
            raise ValueError("context_len too small")

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def adapter_scale(self) -> float:
        return self.adapter_alpha / self.adapter_rank

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Adapter rank and alpha as used for the 7B model (64 / 512)."""
        return cls(**{"adapter_rank": 64, "adapter_alpha": 512.0, "embed_dim": 256, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------

def encode(text: str | bytes, role: Literal["query", "response"] = "query", context_len: int = 256) -> list[int]:
    """Map text to byte token ids.

    ``role`` only matters for the empty check and the budget: a single field
    must leave room for the separator and the end token.
    """
    if role not in ("query", "response"):
        raise ValueError(f"unknown role {role!r}")
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not raw:
        raise LengthError(f"empty {role}")
    if len(raw) + 2 > context_len:
        raise LengthError(f"{role} of {len(raw)} bytes does not fit context of {context_len}")
    return list(raw)


def decode(tokens: Iterable[int]) -> str:
    out = bytearray()
    for t in tokens:
        if t < N_BYTES:
            out.append(t)
        else:
            out.extend(SPECIAL_NAMES.get(t, f"<{t}>").encode())
    return out.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Example:
    id: str
    task: str
    query: tuple[int, ...]
    response: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "query", tuple(int(t) for t in self.query))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        if not self.query or not self.response:
            raise LengthError(f"example {self.id!r}: query and response must be non-empty")

    @classmethod
    def from_text(cls, id: str, task: str, query: str, response: str, context_len: int = 256) -> "Example":
        ex = cls(id, task, tuple(encode(query, "query", context_len)), tuple(encode(response, "response", context_len)))
        if ex.length > context_len:
            raise LengthError(f"example {id!r} has {ex.length} tokens, context is {context_len}")
        return ex

    @property
    def query_text(self) -> str:
        return decode(self.query)

    @property
    def response_text(self) -> str:
        return decode(self.response)

    @property
    def length(self) -> int:
        return len(self.query) + len(self.response) + 2

    def sequence(self) -> list[int]:
        return [*self.query, SEP, *self.response, EOS]


def check_example(z: Example, cfg: ModelConfig) -> None:
    if z.length > cfg.context_len:
        raise LengthError(f"example {z.id!r} has {z.length} tokens, context is {cfg.context_len}")
    if max(z.query + z.response) >= cfg.vocab_size:
        raise DimensionError(f"example {z.id!r} has a token id outside the vocabulary")


def loss_layout(z: Example) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(input ids, target ids, completion mask) for one example."""
    seq = z.sequence()
    inputs = np.array(seq[:-1], dtype=np.int64)
    targets = np.array(seq[1:], dtype=np.int64)
    mask = np.zeros(len(targets))
    mask[len(z.query):] = 1.0  # the SEP position predicts the first response token
    return inputs, targets, mask


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def base_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.context_len, d),
    }
    for l in range(cfg.layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.up.w": (d, h), p + "mlp.up.b": (h,),
            p + "mlp.down.w": (h, d), p + "mlp.down.b": (d,),
        })
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def adapter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical adapter parameter order; gradient vectors follow it."""
    d, h, r = cfg.embed_dim, cfg.hidden_dim, cfg.adapter_rank
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(cfg.layers):
        p = f"layers.{l}.mlp."
        shapes[p + "up.lora_a"] = (d, r)
        shapes[p + "up.lora_b"] = (r, h)
        shapes[p + "down.lora_a"] = (h, r)
        shapes[p + "down.lora_b"] = (r, d)
    return shapes


def adapter_param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in adapter_shapes(cfg).values())


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModelState:
    """Parameters at one training step. Arrays are read-only."""

    config: ModelConfig
    step: int
    base: Mapping[str, np.ndarray]
    adapter: Mapping[str, np.ndarray]
    run_id: str = ""

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be non-negative")
        for names, have in ((base_shapes(self.config), self.base), (adapter_shapes(self.config), self.adapter)):
            if list(have) != list(names):
                raise DimensionError("parameter names or order do not match the config")
            for k, shape in names.items():
                if have[k].shape != shape:
                    raise DimensionError(f"{k}: shape {have[k].shape}, expected {shape}")
        object.__setattr__(self, "base", {k: _readonly(v) for k, v in self.base.items()})
        object.__setattr__(self, "adapter", {k: _readonly(v) for k, v in self.adapter.items()})

    def replace(self, *, step: int | None = None, base=None, adapter=None, run_id: str | None = None) -> "ModelState":
        return ModelState(
            self.config,
            self.step if step is None else step,
            self.base if base is None else base,
            self.adapter if adapter is None else adapter,
            self.run_id if run_id is None else run_id,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {**self.base, **self.adapter}

    def adapter_vector(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.adapter.values()])

    def with_adapter_vector(self, flat: np.ndarray, step: int | None = None) -> "ModelState":
        return self.replace(step=step, adapter=unflatten(flat, adapter_shapes(self.config)))

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(repr((self.step, self.config)).encode())
        for name, v in self.params().items():
            h.update(name.encode())
            h.update(v.tobytes())
        return h.hexdigest()


def unflatten(flat: np.ndarray, shapes: Mapping[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(math.prod(s) for s in shapes.values())
    if flat.shape != (total,):
        raise DimensionError(f"flat vector of length {flat.size}, expected {total}")
    out, pos = {}, 0
    for k, s in shapes.items():
        n = math.prod(s)
        out[k] = flat[pos:pos + n].reshape(s)
        pos += n
    return out


def init_state(cfg: ModelConfig, run_id: str = "") -> ModelState:
    """Random base weights from ``cfg.init_seed``; adapters with B = 0."""
    rng = np.random.default_rng(cfg.init_seed)
    base = {}
    for name, shape in base_shapes(cfg).items():
        if name.endswith(".g"):
            base[name] = np.ones(shape)
        elif name.endswith(".b"):
            base[name] = np.zeros(shape)
        else:
            base[name] = rng.normal(0.0, 0.02, size=shape)
    adapter = {}
    for name, shape in adapter_shapes(cfg).items():
        if name.endswith("lora_a"):
            bound = 1.0 / math.sqrt(shape[0])
            adapter[name] = rng.uniform(-bound, bound, size=shape)
        else:
            adapter[name] = np.zeros(shape)
    return ModelState(cfg, 0, base, adapter, run_id)


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def _bind(tape: Tape, state: ModelState, scope: Scope) -> dict[str, Tensor]:
    bound = {}
    for k, v in state.base.items():
        bound[k] = tape.param(k, v) if scope in ("base", "all") else tape.constant(v, k)
    for k, v in state.adapter.items():
        bound[k] = tape.param(k, v) if scope in ("adapter", "all") else tape.constant(v, k)
    return bound


def adapter_delta(x: Tensor, a: Tensor, b: Tensor, scale: float) -> Tensor:
    """The low-rank term ``scale * (x @ A) @ B``."""
    return x.tape.apply("scale", (x @ a) @ b, factor=scale)


def _adapted_linear(x: Tensor, p: dict[str, Tensor], prefix: str, scale: float) -> Tensor:
    base = x @ p[prefix + "w"] + p[prefix + "b"]
    return base + adapter_delta(x, p[prefix + "lora_a"], p[prefix + "lora_b"], scale)


def _attention(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    tape = x.tape
    d = x.shape[1]
    dh = d // heads
    q = x @ p[prefix + "wq"]
    k = x @ p[prefix + "wk"]
    v = x @ p[prefix + "wv"]
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = tape.apply("slice", q, start=lo, stop=hi)
        kh = tape.apply("slice", k, start=lo, stop=hi)
        vh = tape.apply("slice", v, start=lo, stop=hi)
        scores = tape.apply("scale", qh @ tape.apply("transpose", kh), factor=1.0 / math.sqrt(dh))
        outs.append(tape.apply("causal_softmax", scores) @ vh)
    mixed = outs[0] if heads == 1 else tape.apply("concat", *outs)
    return mixed @ p[prefix + "wo"]


def forward_logits(tape: Tape, p: dict[str, Tensor], cfg: ModelConfig, tokens: Sequence[int]) -> Tensor:
    n = len(tokens)
    if n > cfg.context_len:
        raise LengthError(f"{n} positions exceed context of {cfg.context_len}")
    x = tape.apply("gather", p["tok_emb"], ids=tokens) + tape.apply("gather", p["pos_emb"], ids=np.arange(n))
    scale = cfg.adapter_scale
    for l in range(cfg.layers):
        pre = f"layers.{l}."
        h = tape.apply("layernorm", x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = x + _attention(h, p, pre + "attn.", cfg.heads)
        h = tape.apply("layernorm", x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = tape.apply("gelu", _adapted_linear(h, p, pre + "mlp.up.", scale))
        x = x + _adapted_linear(u, p, pre + "mlp.down.", scale)
    h = tape.apply("layernorm", x, p["ln_f.g"], p["ln_f.b"])
    return h @ p["head"]


def logits(state: ModelState, tokens: Sequence[int]) -> np.ndarray:
    tape = Tape()
    return np.array(forward_logits(tape, _bind(tape, state, "none"), state.config, tokens).value)


def _loss_on_tape(state: ModelState, z: Example, scope: Scope, weights: np.ndarray | None = None):
    check_example(z, state.config)
    inputs, targets, mask = loss_layout(z)
    tape = Tape()
    p = _bind(tape, state, scope)
    nll = tape.apply("xent", forward_logits(tape, p, state.config, inputs), targets=targets)
    loss = tape.apply("sum", nll, weights=mask if weights is None else weights)
    return tape, loss


def completion_loss(state: ModelState, z: Example) -> float:
    """Sum of negative log-likelihoods over the response tokens and the end token."""
    _, loss = _loss_on_tape(state, z, "none")
    return float(loss.value)


def token_losses(state: ModelState, z: Example) -> np.ndarray:
    """Per-position NLL over the completion positions, in order."""
    check_example(z, state.config)
    inputs, targets, mask = loss_layout(z)
    tape = Tape()
    nll = tape.apply("xent", forward_logits(tape, _bind(tape, state, "none"), state.config, inputs), targets=targets)
    return np.array(nll.value[mask > 0])


def param_names(cfg: ModelConfig, scope: Scope) -> list[str]:
    names = []
    if scope in ("base", "all"):
        names += list(base_shapes(cfg))
    if scope in ("adapter", "all"):
        names += list(adapter_shapes(cfg))
    return names


def loss_and_grads(state: ModelState, z: Example, scope: Scope = "adapter") -> tuple[float, dict[str, np.ndarray]]:
    tape, loss = _loss_on_tape(state, z, scope)
    return float(loss.value), tape.backward(loss)


def flatten(grads: Mapping[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k]).reshape(-1) for k in names])


@dataclass(frozen=True)
class GradientVector:
    run_id: str
    step: int
    example_id: str
    values: np.ndarray = field(repr=False)
    scope: str = "adapter"

    def __len__(self) -> int:
        return len(self.values)


def example_gradient(state: ModelState, z: Example, scope: Scope = "adapter") -> GradientVector:
    """Gradient of the completion loss, flattened in canonical parameter order."""
    _, grads = loss_and_grads(state, z, scope)
    values = flatten(grads, param_names(state.config, scope))
    values.flags.writeable = False
    return GradientVector(state.run_id, state.step, z.id, values, scope)


def token_gradients(state: ModelState, z: Example, scope: Scope = "adapter") -> list[np.ndarray]:
    """One flat gradient per completion token, each from its own backward pass."""
    _, _, mask = loss_layout(z)
    names = param_names(state.config, scope)
    out = []
    for pos in np.flatnonzero(mask):
        w = np.zeros_like(mask)
        w[pos] = 1.0
        tape, loss = _loss_on_tape(state, z, scope, weights=w)
        out.append(flatten(tape.backward(loss), names))
    return out
