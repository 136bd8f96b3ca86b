"""Dense float64 tensors with a reverse-mode tape.

Every value produced on a :class:`Tape` is recorded as a node; ``Tape.backward``
walks the nodes in reverse creation order, which is a valid topological order
because a node can only reference nodes created before it.

Values are stored as read-only, C-contiguous ``float64`` numpy arrays so they
can be shared between threads without copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError, NumericError, TapeStateError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LAYERNORM_EPS = 1e-5


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C")
    a.flags.writeable = False
    return a


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """A value recorded on a tape, plus what is needed to differentiate it."""

    __slots__ = ("value", "tape", "index", "kind", "inputs", "ctx", "requires_grad", "name")

    def __init__(self, value, tape, index, kind, inputs=(), ctx=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.value.reshape(-1)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor<{self.kind}{label} shape={self.shape}>"

    # operator sugar; all of these go through Tape.apply
    def __add__(self, other: Tensor) -> Tensor:
        if other.value.ndim == 1 and self.value.ndim == 2:
            return self.tape.apply("add_bias", self, other)
        return self.tape.apply("add", self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return self.tape.apply("mul", self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return self.tape.apply("matmul", self, other)


# ---------------------------------------------------------------------------
# op table: kind -> (forward, backward)
#   forward(values, **attrs) -> (out, ctx)
#   backward(grad_out, values, out, ctx) -> tuple of input grads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpRule:
    forward: Callable
    backward: Callable
    arity: int | None = None  # None means variadic


OPS: dict[str, OpRule] = {}


def _op(kind: str, arity: int | None):
    def register(pair):
        fwd, bwd = pair()
        OPS[kind] = OpRule(fwd, bwd, arity)
        return pair

    return register


def _need_2d(a: np.ndarray, kind: str) -> None:
    if a.ndim != 2:
        raise DimensionError(f"{kind} expects a 2-d input, got shape {a.shape}")


@_op("matmul", 2)
def _matmul():
    def fwd(vals):
        a, b = vals
        _need_2d(a, "matmul")
        _need_2d(b, "matmul")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
        return a @ b, None

    def bwd(g, vals, out, ctx):
        a, b = vals
        return g @ b.T, a.T @ g

    return fwd, bwd


@_op("add", 2)
def _add():
    def fwd(vals):
        a, b = vals
        if a.shape != b.shape:
            raise DimensionError(f"add shapes {a.shape} and {b.shape} differ")
        return a + b, None

    def bwd(g, vals, out, ctx):
        return g, g

    return fwd, bwd


@_op("mul", 2)
def _mul():
    def fwd(vals):
        a, b = vals
        if a.shape != b.shape:
            raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ")
        return a * b, None

    def bwd(g, vals, out, ctx):
        a, b = vals
        return g * b, g * a

    return fwd, bwd


@_op("add_bias", 2)
def _add_bias():
    def fwd(vals):
        x, b = vals
        _need_2d(x, "add_bias")
        if b.shape != (x.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not broadcast over {x.shape}")
        return x + b, None

    def bwd(g, vals, out, ctx):
        return g, g.sum(axis=0)

    return fwd, bwd


@_op("scale", 1)
def _scale():
    def fwd(vals, factor):
        return vals[0] * factor, factor

    def bwd(g, vals, out, factor):
        return (g * factor,)

    return fwd, bwd


@_op("transpose", 1)
def _transpose():
    def fwd(vals):
        _need_2d(vals[0], "transpose")
        return vals[0].T, None

    def bwd(g, vals, out, ctx):
        return (g.T,)

    return fwd, bwd


@_op("gather", 1)
def _gather():
    def fwd(vals, ids):
        table = vals[0]
        _need_2d(table, "gather")
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
            raise DimensionError(f"gather ids out of range for table with {table.shape[0]} rows")
        return table[ids], ids

    def bwd(g, vals, out, ids):
        gt = np.zeros_like(vals[0])
        np.add.at(gt, ids, g)
        return (gt,)

    return fwd, bwd


@_op("slice", 1)
def _slice():
    def fwd(vals, start, stop):
        x = vals[0]
        if not 0 <= start < stop <= x.shape[-1]:
            raise DimensionError(f"slice [{start}:{stop}] outside last axis of size {x.shape[-1]}")
        return x[..., start:stop], (start, stop)

    def bwd(g, vals, out, ctx):
        start, stop = ctx
        gx = np.zeros_like(vals[0])
        gx[..., start:stop] = g
        return (gx,)

    return fwd, bwd


@_op("concat", None)
def _concat():
    def fwd(vals):
        lead = vals[0].shape[:-1]
        if any(v.shape[:-1] != lead for v in vals):
            raise DimensionError("concat inputs disagree on leading dimensions")
        widths = [v.shape[-1] for v in vals]
        return np.concatenate(vals, axis=-1), widths

    def bwd(g, vals, out, widths):
        cuts = np.cumsum(widths)[:-1]
        return tuple(np.split(g, cuts, axis=-1))

    return fwd, bwd


@_op("gelu", 1)
def _gelu():
    def fwd(vals):
        x = vals[0]
        cdf = ndtr(x)
        return x * cdf, cdf

    def bwd(g, vals, out, cdf):
        x = vals[0]
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return fwd, bwd


@_op("layernorm", 3)
def _layernorm():
    def fwd(vals):
        x, gamma, beta = vals
        _need_2d(x, "layernorm")
        d = x.shape[1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise DimensionError("layernorm gain/bias must match the feature dimension")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = xc * rstd
        return xhat * gamma + beta, (xhat, rstd)

    def bwd(g, vals, out, ctx):
        x, gamma, beta = vals
        xhat, rstd = ctx
        gxhat = g * gamma
        gx = rstd * (
            gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return fwd, bwd


@_op("causal_softmax", 1)
def _causal_softmax():
    def fwd(vals):
        s = vals[0]
        _need_2d(s, "causal_softmax")
        if s.shape[0] != s.shape[1]:
            raise DimensionError("causal_softmax expects a square score matrix")
        mask = np.tril(np.ones(s.shape, dtype=bool))
        z = np.where(mask, s, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0)
        return e / e.sum(axis=1, keepdims=True), None

    def bwd(g, vals, p, ctx):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return fwd, bwd


@_op("xent", 1)
def _xent():
    # per-position negative log-likelihood of integer targets
    def fwd(vals, targets):
        logits = vals[0]
        _need_2d(logits, "xent")
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (logits.shape[0],):
            raise DimensionError("xent needs one target per logit row")
        if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
            raise DimensionError("xent target id outside the vocabulary")
        m = logits.max(axis=1, keepdims=True)
        z = logits - m
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(logits.shape[0])
        nll = lse - z[rows, targets]
        return nll, (targets, z, lse)

    def bwd(g, vals, out, ctx):
        targets, z, lse = ctx
        p = np.exp(z - lse[:, None])
        p[np.arange(len(targets)), targets] -= 1.0
        return (p * g[:, None],)

    return fwd, bwd


@_op("sum", 1)
def _sum():
    def fwd(vals, weights=None):
        x = vals[0]
        if weights is None:
            return np.asarray(x.sum()), None
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape:
            raise DimensionError(f"weights shape {w.shape} differs from input {x.shape}")
        return np.asarray((x * w).sum()), w

    def bwd(g, vals, out, w):
        x = vals[0]
        if w is None:
            return (np.full(x.shape, float(g)),)
        return (w * float(g),)

    return fwd, bwd


class Tape:
    """Records operations for one forward pass and differentiates them once."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False

    def _push(self, value, kind, inputs=(), ctx=None, requires_grad=False, name=None) -> Tensor:
        node = Tensor(_freeze(value), self, len(self.nodes), kind, tuple(inputs), ctx, requires_grad, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Tensor:
        """A named leaf that receives a gradient."""
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, f"parameter {name!r}")
        return self._push(value, "param", requires_grad=True, name=name)

    def constant(self, value, name: str | None = None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, "constant")
        return self._push(value, "const", name=name)

    def apply(self, kind: str, *inputs: Tensor, **attrs) -> Tensor:
        """Run op ``kind`` forward and record it."""
        if self.consumed:
            raise TapeStateError("tape already consumed by backward()")
        rule = OPS.get(kind)
        if rule is None:
            raise KeyError(f"unknown op kind {kind!r}")
        if rule.arity is not None and len(inputs) != rule.arity:
            raise DimensionError(f"{kind} takes {rule.arity} inputs, got {len(inputs)}")
        for t in inputs:
            if t.tape is not self:
                raise TapeStateError("inputs belong to a different tape")
        out, ctx = rule.forward([t.value for t in inputs], **attrs)
        _check_finite(out, kind)
        return self._push(out, kind, inputs, ctx, any(t.requires_grad for t in inputs))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of scalar ``loss`` with respect to every ``param`` leaf.

        Parameters the loss does not depend on get exact zeros.
        """
        if self.consumed:
            raise TapeStateError("backward() already called on this tape")
        if loss.tape is not self:
            raise TapeStateError("loss belongs to a different tape")
        if loss.value.shape != ():
            raise DimensionError(f"loss must be a scalar, got shape {loss.value.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {loss.index: np.ones(())}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.get(node.index)
            if g is None or not node.inputs:
                continue
            rule = OPS[node.kind]
            in_grads = rule.backward(g, [t.value for t in node.inputs], node.value, node.ctx)
            for t, gi in zip(node.inputs, in_grads):
                if not t.requires_grad:
                    continue
                if t.index in grads:
                    grads[t.index] = grads[t.index] + gi
                else:
                    grads[t.index] = np.array(gi, dtype=np.float64)

        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.kind == "param":
                g = grads.get(node.index)
                out[node.name] = np.zeros(node.value.shape) if g is None else np.asarray(g, dtype=np.float64)
        return out


def forward_op(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply op ``kind`` to tensors that all live on one tape."""
    if not inputs:
        raise DimensionError("forward_op needs at least one input")
    return inputs[0].tape.apply(kind, *inputs, **attrs)
