"""Parallel corpora: loading, synthetic tasks, batching."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ParseError
from .seqmodel import Vocabulary

TASK_KINDS = ("copy", "token_map", "length_control")


@dataclass(frozen=True)
class ParallelCorpus:
    examples: tuple  # of (x, refs) with refs a non-empty tuple of target sequences
    vocab_src: Vocabulary
    vocab_tgt: Vocabulary

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple((tuple(x), tuple(tuple(r) for r in refs))
                                                   for x, refs in self.examples))
        for x, refs in self.examples:
            if not refs:
                raise ValueError("every example needs at least one reference")
            self.vocab_src.check(x)
            for r in refs:
                self.vocab_tgt.check(r)

    def __len__(self):
        return len(self.examples)

    def pairs(self) -> list[tuple]:
        """Flattened ``(x, y)`` pairs, one per reference."""
        return [(x, r) for x, refs in self.examples for r in refs]

    def to_lines(self) -> tuple[list[str], list[str]]:
        src, tgt = [], []
        for x, y in self.pairs():
            src.append(" ".join(self.vocab_src.decode(x)))
            tgt.append(" ".join(self.vocab_tgt.decode(y)))
        return src, tgt


def load_parallel_corpus(src_lines, tgt_lines) -> ParallelCorpus:
    """Whitespace-tokenized parallel text; consecutive identical sources become one multi-reference example."""
    src_lines = [line.rstrip("\n") for line in src_lines]
    tgt_lines = [line.rstrip("\n") for line in tgt_lines]
    if len(src_lines) != len(tgt_lines):
        raise ParseError(f"line-count mismatch: {len(src_lines)} source lines vs {len(tgt_lines)} target lines")
    if not src_lines:
        raise ParseError("empty corpus")
    src_tok = [line.split() for line in src_lines]
    tgt_tok = [line.split() for line in tgt_lines]
    vsrc = Vocabulary.build(w for toks in src_tok for w in toks)
    vtgt = Vocabulary.build(w for toks in tgt_tok for w in toks)
    examples: list[tuple] = []
    for s, t in zip(src_tok, tgt_tok):
        x, y = vsrc.encode(s), vtgt.encode(t)
        if examples and examples[-1][0] == x:
            examples[-1][1].append(y)
        else:
            examples.append((x, [y]))
    return ParallelCorpus(tuple(examples), vsrc, vtgt)


def read_parallel_corpus(src_path, tgt_path) -> ParallelCorpus:
    with open(src_path, encoding="utf-8") as fs, open(tgt_path, encoding="utf-8") as ft:
        return load_parallel_corpus(fs.readlines(), ft.readlines())


def encode_with(corpus_lines, vocab_src, vocab_tgt) -> ParallelCorpus:
    """Re-encode a text corpus (e.g. a dev set) against existing vocabularies."""
    src_lines, tgt_lines = corpus_lines
    loaded = load_parallel_corpus(src_lines, tgt_lines)
    examples = []
    for x, refs in loaded.examples:
        xs = vocab_src.encode(loaded.vocab_src.decode(x))
        examples.append((xs, tuple(vocab_tgt.encode(loaded.vocab_tgt.decode(r)) for r in refs)))
    return ParallelCorpus(tuple(examples), vocab_src, vocab_tgt)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Desk-scale parallel task.

    ``copy``: y = x. ``token_map``: y_i = mapping[x_i]. ``length_control``:
    x is a prefix of the cyclic source pattern, y the first ``ceil(ratio * |x|)``
    tokens of the cyclic target pattern. Copy and token-map sources never
    repeat a token twice in a row when ``no_repeat`` is set. Without an explicit
    ``mapping``, one is drawn from ``mapping_seed`` (not ``seed``), so train
    and dev splits generated with different seeds share it.
    """

    kind: str = "length_control"
    src_vocab: int = 5
    tgt_vocab: int = 5
    min_len: int = 1
    max_src_len: int = 5
    max_tgt_len: int = 8
    size: int = 2000
    ratio: float = 1.5
    mapping: tuple | None = None
    no_repeat: bool = True
    mapping_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise ConfigError("vocabularies need at least one token")
        if not 1 <= self.min_len <= self.max_src_len:
            raise ConfigError("need 1 <= min_len <= max_src_len")
        if self.size < 1:
            raise ConfigError("size must be >= 1")
        if self.kind == "copy" and self.src_vocab != self.tgt_vocab:
            raise ConfigError("copy needs equal vocabulary sizes")
        if self.kind != "length_control" and self.no_repeat and self.src_vocab < 2 and self.max_src_len > 1:
            raise ConfigError("no_repeat needs at least two source tokens")
        if self.kind == "length_control" and not self.ratio > 0:
            raise ConfigError("ratio must be positive")
        if self.mapping is not None and (len(self.mapping) != self.src_vocab
                                         or any(not 0 <= m < self.tgt_vocab for m in self.mapping)):
            raise ConfigError("mapping must send each source index to a target index")
        if self.longest_target() > self.max_tgt_len:
            raise ConfigError(f"targets up to {self.longest_target()} tokens exceed max_tgt_len {self.max_tgt_len}")

    def target_length(self, n: int) -> int:
        if self.kind == "length_control":
            return math.ceil(round(self.ratio * n, 9))
        return n

    def longest_target(self) -> int:
        return self.target_length(self.max_src_len)

    def vocabularies(self) -> tuple[Vocabulary, Vocabulary]:
        if self.kind == "copy":
            words = [f"w{i}" for i in range(self.src_vocab)]
            return Vocabulary.build(words), Vocabulary.build(words)
        return (Vocabulary.build(f"s{i}" for i in range(self.src_vocab)),
                Vocabulary.build(f"t{i}" for i in range(self.tgt_vocab)))

    def resolved_mapping(self) -> tuple[int, ...]:
        if self.mapping is not None:
            return tuple(self.mapping)
        rng = np.random.default_rng(self.mapping_seed)
        if self.src_vocab == self.tgt_vocab:
            return tuple(int(i) for i in rng.permutation(self.tgt_vocab))
        return tuple(int(i) for i in rng.integers(0, self.tgt_vocab, size=self.src_vocab))

    def dictionary_lines(self) -> list[str]:
        """Lexical dictionary (``src tgt prob``) implied by a token map."""
        vs, vt = self.vocabularies()
        cs, ct = vs.content_ids, vt.content_ids
        return [f"{vs.tokens[cs[i]]} {vt.tokens[ct[j]]} 1.0" for i, j in enumerate(self.resolved_mapping())]


def generate_synthetic(spec: SyntheticTaskSpec) -> ParallelCorpus:
    vs, vt = spec.vocabularies()
    cs, ct = vs.content_ids, vt.content_ids
    rng = np.random.default_rng(spec.seed)
    mapping = spec.resolved_mapping() if spec.kind == "token_map" else None
    examples = []
    for _ in range(spec.size):
        n = int(rng.integers(spec.min_len, spec.max_src_len + 1))
        if spec.kind == "length_control":
            x = tuple(cs[i % len(cs)] for i in range(n))
            y = tuple(ct[i % len(ct)] for i in range(spec.target_length(n)))
        else:
            idx = []
            for _ in range(n):
                i = int(rng.integers(len(cs)))
                if spec.no_repeat:
                    while idx and i == idx[-1]:
                        i = int(rng.integers(len(cs)))
                idx.append(i)
            x = tuple(cs[i] for i in idx)
            y = x if spec.kind == "copy" else tuple(ct[mapping[i]] for i in idx)
        examples.append((x, (y,)))
    return ParallelCorpus(tuple(examples), vs, vt)


def batches(examples, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """One shuffled epoch; the final batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def batch_stream(examples, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    while True:
        yield from batches(examples, batch_size, rng)
