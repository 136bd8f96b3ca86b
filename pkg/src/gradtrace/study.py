"""Synthetic tasks and the three data-creation strategies.

Every task renders a *positive* example as::

    query:    "<instruction> <input>. Answer in brackets."
    response: "[<output>]"

and a *negative* one by dropping the format directive from the query and
emitting the bare output. Strategy variants (CoT, clarification, response
evaluation) are deterministic text transforms of an example that keep its
original query (and, where relevant, response) verbatim inside the result.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import LengthError, SizeError
from .model import Example

FORMAT_DIRECTIVE = "Answer in brackets."
COT_DIRECTIVE = "Reason first, then answer."
CLARIFY_WRAPPER = "Rephrase the [input] clearly."
EVAL_WRAPPER = "Does the [output] meet the [input]?"
VERDICT_OK = "MEETS"
VERDICT_BAD = "DOES NOT MEET"

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_DIGITS = "0123456789"
_VOWELS = set("aeiou")


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class StrategyKind(str, enum.Enum):
    COT = "cot"
    CLARIFY = "clarify"
    RESPOND_EVAL = "respond_eval"


# --------------------------------------------------------------------------
# task families
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskFamily:
    """A task: how to sample an input, solve it, and narrate the solution."""

    name: str
    instruction: str
    requirement: str
    sample: Callable[[random.Random, int], str]
    solve: Callable[[str], str]
    explain: Callable[[str], str]

    def query(self, inp: str, with_format: bool = True) -> str:
        q = f"{self.instruction} {inp}."
        return f"{q} {FORMAT_DIRECTIVE}" if with_format else q

    def response(self, inp: str, with_format: bool = True) -> str:
        out = self.solve(inp)
        return f"[{out}]" if with_format else out

    def parse(self, query: str) -> str:
        """Recover the input payload from a query this family rendered."""
        body = query
        if body.endswith(" " + FORMAT_DIRECTIVE):
            body = body[: -len(FORMAT_DIRECTIVE) - 1]
        prefix = self.instruction + " "
        if not body.startswith(prefix) or not body.endswith("."):
            raise ValueError(f"query was not rendered by family {self.name!r}: {query!r}")
        return body[len(prefix):-1]

    def requirements(self) -> str:
        return f"{self.requirement}; use brackets"

    def make(self, id: str, inp: str, positive: bool = True, context_len: int = 256) -> Example:
        return Example.from_text(id, self.name, self.query(inp, positive), self.response(inp, positive), context_len)

    def stream(self, seed: int, max_len: int = 8):
        """Endless deterministic stream of inputs for this family."""
        rng = random.Random(derive_seed(seed, self.name))
        while True:
            yield self.sample(rng, max_len)


def _rand_str(rng: random.Random, alphabet: str, lo: int, hi: int) -> str:
    n = rng.randint(lo, max(lo, hi))
    return "".join(rng.choice(alphabet) for _ in range(n))


def _sort_trace(s: str) -> str:
    rest = list(s)
    picks = []
    while rest:
        m = min(rest)
        picks.append(m)
        rest.remove(m)
    return "smallest remaining: " + ",".join(picks)


def _modsum(s: str) -> str:
    return str(sum(int(t) for t in s.split()) % 10)


def _modsum_trace(s: str) -> str:
    acc, steps = 0, []
    for t in s.split():
        acc += int(t)
        steps.append(f"+{t}={acc}")
    return "running sum " + " ".join(steps) + f", mod 10 gives {acc % 10}"


def _substr_sample(rng: random.Random, max_len: int) -> str:
    word = _rand_str(rng, _LETTERS, 5, max(5, max_len))
    i = rng.randint(1, len(word) - 1)
    j = rng.randint(i, min(len(word), i + 3))
    return f"{i}-{j} of {word}"


def _substr_solve(s: str) -> str:
    span, word = s.split(" of ")
    i, j = (int(t) for t in span.split("-"))
    return word[i - 1:j]


def _substr_trace(s: str) -> str:
    span, word = s.split(" of ")
    i, j = (int(t) for t in span.split("-"))
    return "positions " + ",".join(f"{k}={word[k - 1]}" for k in range(i, j + 1))


def _classify_sample(rng: random.Random, max_len: int) -> str:
    kind = rng.choice(["alpha", "digit", "mixed"])
    alphabet = {"alpha": _LETTERS, "digit": _DIGITS, "mixed": _LETTERS + _DIGITS}[kind]
    while True:
        s = _rand_str(rng, alphabet, 3, max_len)
        if kind != "mixed" or (any(c.isalpha() for c in s) and any(c.isdigit() for c in s)):
            return s


def _classify(s: str) -> str:
    letters = sum(c.isalpha() for c in s)
    if letters == len(s):
        return "alpha"
    return "digit" if letters == 0 else "mixed"


def _classify_trace(s: str) -> str:
    letters = sum(c.isalpha() for c in s)
    return f"letters={letters} digits={len(s) - letters}"


BUILTIN_FAMILIES: dict[str, TaskFamily] = {
    f.name: f
    for f in [
        TaskFamily(
            "copy", "Copy:", "repeat the input",
            lambda rng, m: _rand_str(rng, _LETTERS + _DIGITS, 3, m),
            lambda s: s,
            lambda s: "characters in order: " + ",".join(s),
        ),
        TaskFamily(
            "reverse", "Reverse:", "input backwards",
            lambda rng, m: _rand_str(rng, _LETTERS, 3, m),
            lambda s: s[::-1],
            lambda s: "last to first: " + ",".join(reversed(s)),
        ),
        TaskFamily(
            "sort-digits", "Sort the digits:", "digits ascending",
            lambda rng, m: _rand_str(rng, _DIGITS, 3, m),
            lambda s: "".join(sorted(s)),
            _sort_trace,
        ),
        TaskFamily(
            "modular-sum", "Sum mod 10:", "last digit of the sum",
            lambda rng, m: " ".join(rng.choice(_DIGITS) for _ in range(rng.randint(2, max(2, min(5, m))))),
            _modsum,
            _modsum_trace,
        ),
        TaskFamily(
            "substring-extract", "Extract characters", "characters in the 1-based span",
            _substr_sample,
            _substr_solve,
            _substr_trace,
        ),
        TaskFamily(
            "pattern-classify", "Classify as alpha, digit or mixed:", "name the character class",
            _classify_sample,
            _classify,
            _classify_trace,
        ),
        TaskFamily(
            "uppercase", "Uppercase:", "letters in upper case",
            lambda rng, m: _rand_str(rng, _LETTERS, 3, m),
            str.upper,
            lambda s: " ".join(f"{c}>{c.upper()}" for c in s),
        ),
        TaskFamily(
            "vowel-count", "Count the vowels in", "number of vowels",
            lambda rng, m: _rand_str(rng, _LETTERS, 3, m),
            lambda s: str(sum(c in _VOWELS for c in s)),
            lambda s: "vowels found: " + (",".join(c for c in s if c in _VOWELS) or "none"),
        ),
    ]
}


def get_families(names: Sequence[str] | None = None) -> list[TaskFamily]:
    if names is None:
        return list(BUILTIN_FAMILIES.values())
    unknown = [n for n in names if n not in BUILTIN_FAMILIES]
    if unknown:
        raise KeyError(f"unknown task families: {unknown}")
    return [BUILTIN_FAMILIES[n] for n in names]


def family_of(z: Example) -> TaskFamily:
    return BUILTIN_FAMILIES[z.task]


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

_MAX_RETRIES = 8


def _generate(family: TaskFamily, id: str, inputs, positive: bool, context_len: int, exclude=frozenset()) -> tuple[Example, str]:
    max_len = 8
    for _ in range(_MAX_RETRIES):
        inp = family.sample(inputs, max_len)
        if inp in exclude:
            continue
        try:
            return family.make(id, inp, positive, context_len), inp
        except LengthError:
            max_len = max(3, max_len // 2)
    raise LengthError(f"could not fit a {family.name!r} example in context {context_len}")


def gen_base_dataset(
    families: Sequence[TaskFamily] | None = None,
    per_family_count: int = 64,
    seed: int = 0,
    context_len: int = 256,
) -> list[Example]:
    """``per_family_count`` positive examples per family, family by family."""
    if per_family_count < 1:
        raise SizeError("per_family_count must be >= 1")
    families = get_families() if families is None else list(families)
    out = []
    for fam in families:
        rng = random.Random(derive_seed("base", seed, fam.name))
        for k in range(per_family_count):
            ex, _ = _generate(fam, f"base/{fam.name}/{k:05d}", rng, True, context_len)
            out.append(ex)
    return out


def sample_eval_set(
    n: int,
    seed: int,
    families: Sequence[TaskFamily] | None = None,
    context_len: int = 256,
) -> list[Example]:
    """``n`` positive evaluation examples, one per family in turn."""
    if n < 1:
        raise SizeError("n must be >= 1")
    families = get_families() if families is None else list(families)
    out = []
    for i in range(n):
        fam = families[i % len(families)]
        rng = random.Random(derive_seed("eval", seed, i, fam.name))
        ex, _ = _generate(fam, f"eval/{seed}/{i:03d}", rng, True, context_len)
        out.append(ex)
    return out


def analog_of(z: Example, seed: int, context_len: int = 256) -> Example:
    """A fresh example of the same task with a different input."""
    fam = family_of(z)
    own = fam.parse(z.query_text)
    rng = random.Random(derive_seed("analog", seed, z.id))
    positive = z.query_text.endswith(FORMAT_DIRECTIVE)
    ex, _ = _generate(fam, f"probe/analog/{seed}/{z.id}", rng, positive, context_len, exclude={own})
    return ex


def make_negative(z: Example, context_len: int = 256) -> Example:
    """Under-specified query paired with an unformatted answer."""
    fam = family_of(z)
    return fam.make(z.id + "/neg", fam.parse(z.query_text), False, context_len)


def make_positive(z: Example, context_len: int = 256) -> Example:
    fam = family_of(z)
    base_id = z.id[:-4] if z.id.endswith("/neg") else z.id
    return fam.make(base_id + "/pos", fam.parse(z.query_text), True, context_len)


def judge(query: str, response: str, fam: TaskFamily) -> bool:
    """Ground truth from the task rule: correct value in the required format."""
    return response == fam.response(fam.parse(query), True)


def make_variant(z: Example, kind: StrategyKind | str, seed: int = 0, context_len: int = 256) -> Example:
    """Rewrite ``z`` with one of the three data-creation strategies.

    ``seed`` is accepted for interface symmetry; all three transforms are
    fully determined by ``z``.
    """
    kind = StrategyKind(kind)
    fam = family_of(z)
    q, r = z.query_text, z.response_text
    inp = fam.parse(q)
    if kind is StrategyKind.COT:
        query = f"{q} {COT_DIRECTIVE}"
        response = f"{fam.explain(inp)}. So the answer is {r}"
    elif kind is StrategyKind.CLARIFY:
        query = f"[input]: {q}\n{CLARIFY_WRAPPER}"
        response = f"{fam.query(inp, True)} Needs: {fam.requirements()}."
    else:
        ok = judge(q, r, fam)
        expected = fam.response(inp, True)
        query = f"{EVAL_WRAPPER}\n[input]: {q}\n[output]: {r}"
        response = (
            f"Needs: {fam.requirements()}. {fam.explain(inp)}. "
            f"Expected {expected}, got {r}. Verdict: {VERDICT_OK if ok else VERDICT_BAD}"
        )
    return Example.from_text(f"{z.id}/{kind.value}", z.task, query, response, context_len)


@dataclass(frozen=True)
class PairedSets:
    """Probe i is paired with eval i."""

    probes: tuple[Example, ...]
    evals: tuple[Example, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "probes", tuple(self.probes))
        object.__setattr__(self, "evals", tuple(self.evals))
        if len(self.probes) != len(self.evals):
            raise SizeError(f"{len(self.probes)} probes vs {len(self.evals)} evals")
        if not self.probes:
            raise SizeError("paired sets must be non-empty")

    @property
    def n(self) -> int:
        return len(self.evals)


def build_paired_sets(
    evals: Sequence[Example],
    kind: StrategyKind | str,
    seed: int,
    cross_task: bool = True,
    context_len: int = 256,
) -> PairedSets:
    """probe_i = make_variant(analog_of(eval_i))."""
    kind = StrategyKind(kind)
    if cross_task and len({z.task for z in evals}) < 2:
        raise SizeError("cross-task metrics need evals from at least two tasks")
    probes = [make_variant(analog_of(z, seed, context_len), kind, seed, context_len) for z in evals]
    return PairedSets(tuple(probes), tuple(evals), {"kind": kind.value, "seed": seed})
