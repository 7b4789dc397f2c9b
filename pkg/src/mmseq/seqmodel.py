"""Tabular autoregressive conditional sequence model.

The model p(y|x) factorizes left to right. Each next-token distribution is a
softmax over one row of a logit table. A row is selected by an *anchor*
(the source token at position ``min(t, |x| - 1)``, or a dedicated null anchor
for an empty source) and the last ``context_order`` target tokens, padded on
the left with the end marker. At position ``max_len`` the end marker is
emitted with probability one, so the support is finite and normalized.

Sequences are plain tuples of content token ids; the end marker is implicit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence as _Seq

import numpy as np

from .errors import EnumerationTooLarge, InvalidSequenceError, InvalidTokenError, ParseError

Sequence = tuple  # tuple[int, ...] of content token ids

EOS = "</s>"
DEFAULT_ENUM_CAP = 1_000_000
CHECKPOINT_FORMAT = "mmseq-tabular/1"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if any(not isinstance(t, str) or not t for t in self.tokens):
            raise ValueError("token strings must be non-empty")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token strings must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} out of range")

    @classmethod
    def build(cls, words: Iterable[str], eos: str = EOS) -> "Vocabulary":
        """End marker at id 0, then ``words`` in first-occurrence order."""
        seen = {eos: 0}
        for w in words:
            seen.setdefault(w, len(seen))
        return cls(tuple(seen), 0)

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    @property
    def content_ids(self) -> list[int]:
        return [i for i in range(len(self.tokens)) if i != self.eos_id]

    def get(self, token: str):
        return self._index.get(token)

    def encode(self, words: Iterable[str]) -> Sequence:
        ids = []
        for w in words:
            i = self._index.get(w)
            if i is None or i == self.eos_id:
                raise InvalidTokenError(f"token {w!r} not in vocabulary")
            ids.append(i)
        return tuple(ids)

    def decode(self, seq: _Seq[int]) -> list[str]:
        return [self.tokens[i] for i in seq]

    def check(self, seq: _Seq[int]) -> None:
        n = len(self.tokens)
        for i in seq:
            if not (0 <= i < n) or i == self.eos_id:
                raise InvalidTokenError(f"id {i} is not a content token of this vocabulary")

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "eos_id": self.eos_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), int(d["eos_id"]))


@dataclass(frozen=True, eq=False)
class TabularModel:
    """Logit table ``logits[anchor, context, next_token]``.

    Instances are immutable; :func:`apply_update` returns a new model. Derived
    tables (softmax, cumulative sums) are cached on first use.
    """

    vocab_src: Vocabulary
    vocab_tgt: Vocabulary
    logits: np.ndarray
    context_order: int = 1
    max_len: int = 8
    _support_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.context_order < 0:
            raise ValueError("context_order must be >= 0")
        if self.max_len < 0:
            raise ValueError("max_len must be >= 0")
        arr = np.array(self.logits, dtype=np.float64)
        if arr.shape != self.shape:
            arr = arr.reshape(self.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "logits", arr)

    # -- geometry ---------------------------------------------------------
    @property
    def n_anchor(self) -> int:
        return len(self.vocab_src) + 1

    @property
    def null_anchor(self) -> int:
        return len(self.vocab_src)

    @property
    def n_ctx(self) -> int:
        return len(self.vocab_tgt) ** self.context_order

    @property
    def n_next(self) -> int:
        return len(self.vocab_tgt)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_anchor, self.n_ctx, self.n_next)

    @property
    def num_params(self) -> int:
        return self.n_anchor * self.n_ctx * self.n_next

    @property
    def params(self) -> np.ndarray:
        return self.logits.reshape(-1)

    @cached_property
    def bos_ctx(self) -> int:
        ctx = 0
        for _ in range(self.context_order):
            ctx = ctx * self.n_next + self.vocab_tgt.eos_id
        return ctx

    # -- cached tables ----------------------------------------------------
    @cached_property
    def log_probs(self) -> np.ndarray:
        """Row-wise log-softmax, shape ``(n_anchor * n_ctx, n_next)``."""
        z = self.logits.reshape(-1, self.n_next)
        z = z - z.max(axis=1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        out.flags.writeable = False
        return out

    @cached_property
    def probs(self) -> np.ndarray:
        z = self.logits.reshape(-1, self.n_next)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        out = e / e.sum(axis=1, keepdims=True)
        out.flags.writeable = False
        return out

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs, axis=1)
        c[:, -1] = 1.0
        return c

    # -- construction -----------------------------------------------------
    @classmethod
    def zeros(cls, vocab_src, vocab_tgt, context_order=1, max_len=8) -> "TabularModel":
        shape = (len(vocab_src) + 1, len(vocab_tgt) ** context_order, len(vocab_tgt))
        return cls(vocab_src, vocab_tgt, np.zeros(shape), context_order, max_len)

    @classmethod
    def random(cls, vocab_src, vocab_tgt, rng, scale=1.0, context_order=1, max_len=8) -> "TabularModel":
        shape = (len(vocab_src) + 1, len(vocab_tgt) ** context_order, len(vocab_tgt))
        return cls(vocab_src, vocab_tgt, scale * rng.standard_normal(shape), context_order, max_len)

    def with_params(self, params) -> "TabularModel":
        params = np.asarray(params, dtype=np.float64)
        if params.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {params.size}")
        return TabularModel(self.vocab_src, self.vocab_tgt, params.reshape(self.shape),
                            self.context_order, self.max_len)

    # -- indexing ---------------------------------------------------------
    def anchor(self, x: Sequence, t: int) -> int:
        if not x:
            return self.null_anchor
        return x[min(t, len(x) - 1)]

    def next_ctx(self, ctx: int, tok: int) -> int:
        if self.context_order == 0:
            return 0
        return (ctx * self.n_next + tok) % self.n_ctx

    def steps(self, x: Sequence, y: Sequence) -> list[tuple[int, int]]:
        """``(row, emitted)`` for every non-forced generation step of ``y``."""
        self.vocab_src.check(x)
        self.vocab_tgt.check(y)
        if len(y) > self.max_len:
            raise InvalidSequenceError(f"length {len(y)} exceeds max_len {self.max_len}")
        eos = self.vocab_tgt.eos_id
        n_ctx = self.n_ctx
        out = []
        ctx = self.bos_ctx
        for t in range(min(len(y) + 1, self.max_len)):
            tok = y[t] if t < len(y) else eos
            out.append((self.anchor(x, t) * n_ctx + ctx, tok))
            ctx = self.next_ctx(ctx, tok)
        return out


def log_prob(model: TabularModel, x: Sequence, y: Sequence) -> float:
    lp = model.log_probs
    total = 0.0
    for row, tok in model.steps(x, y):
        total += lp[row, tok]
    return float(total)


def grad_log_prob(model: TabularModel, x: Sequence, y: Sequence) -> np.ndarray:
    """Analytic gradient of ``log_prob`` w.r.t. the flat logit vector."""
    V = model.n_next
    probs = model.probs
    g = np.zeros(model.num_params)
    for row, tok in model.steps(x, y):
        g[row * V:(row + 1) * V] -= probs[row]
        g[row * V + tok] += 1.0
    return g


def sample(model: TabularModel, x: Sequence, rng: np.random.Generator) -> Sequence:
    """Ancestral sample at temperature 1."""
    eos = model.vocab_tgt.eos_id
    cdf = model.cdf
    n_ctx = model.n_ctx
    out = []
    ctx = model.bos_ctx
    for t in range(model.max_len):
        row = model.anchor(x, t) * n_ctx + ctx
        tok = int(np.searchsorted(cdf[row], rng.random(), side="right"))
        if tok == eos:
            break
        out.append(tok)
        ctx = model.next_ctx(ctx, tok)
    return tuple(out)


def greedy_decode(model: TabularModel, x: Sequence) -> Sequence:
    eos = model.vocab_tgt.eos_id
    out = []
    ctx = model.bos_ctx
    for t in range(model.max_len):
        row = model.anchor(x, t) * model.n_ctx + ctx
        tok = int(np.argmax(model.log_probs[row]))
        if tok == eos:
            break
        out.append(tok)
        ctx = model.next_ctx(ctx, tok)
    return tuple(out)


def support_size(model: TabularModel) -> int:
    c = len(model.vocab_tgt) - 1
    return sum(c ** n for n in range(model.max_len + 1))


def enumerate_support(model: TabularModel, x: Sequence, cap: int = DEFAULT_ENUM_CAP) -> list[tuple[Sequence, float]]:
    """Every sequence of length ``0..max_len`` with its exact probability.

    Log-probabilities are accumulated in the same order as :func:`log_prob`,
    so ``exp(log_prob(y))`` reproduces the listed value bit for bit.
    """
    n = support_size(model)
    if n > cap:
        raise EnumerationTooLarge(f"support has {n} sequences, cap is {cap}")
    model.vocab_src.check(x)
    lp = model.log_probs
    eos = model.vocab_tgt.eos_id
    content = model.vocab_tgt.content_ids
    n_ctx = model.n_ctx
    out = []

    def walk(prefix, ctx, acc):
        t = len(prefix)
        if t == model.max_len:
            out.append((tuple(prefix), float(np.exp(acc))))
            return
        row = model.anchor(x, t) * n_ctx + ctx
        out.append((tuple(prefix), float(np.exp(acc + lp[row, eos]))))
        for tok in content:
            prefix.append(tok)
            walk(prefix, model.next_ctx(ctx, tok), acc + lp[row, tok])
            prefix.pop()

    walk([], model.bos_ctx, 0.0)
    return out


def apply_update(model: TabularModel, grad: np.ndarray, lr: float) -> TabularModel:
    """One SGD *ascent* step: ``logits + lr * grad``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (model.num_params,):
        raise ValueError(f"gradient has shape {grad.shape}, expected ({model.num_params},)")
    if not np.isfinite(lr):
        raise ValueError("learning rate must be finite")
    return model.with_params(model.params + lr * grad)


# -- checkpoints ------------------------------------------------------------

def model_to_dict(model: TabularModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "vocab_src": model.vocab_src.to_dict(),
        "vocab_tgt": model.vocab_tgt.to_dict(),
        "context_order": model.context_order,
        "max_len": model.max_len,
        "shape": list(model.shape),
        "logits": model.params.tolist(),
    }


def model_from_dict(d: dict) -> TabularModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"unknown checkpoint format {d.get('format')!r}")
    model = TabularModel(
        Vocabulary.from_dict(d["vocab_src"]),
        Vocabulary.from_dict(d["vocab_tgt"]),
        np.asarray(d["logits"], dtype=np.float64),
        int(d["context_order"]),
        int(d["max_len"]),
    )
    if list(model.shape) != list(d["shape"]):
        raise ParseError(f"shape mismatch: header {d['shape']}, vocabularies imply {list(model.shape)}")
    return model


def save_model(model: TabularModel, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> TabularModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
