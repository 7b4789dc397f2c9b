"""Prior-knowledge feature vectors over (source, target) pairs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError


def length_ratio(x, y, beta: float = 1.0) -> float:
    """Bounded ratio between ``beta * |x|`` and ``|y|``; 1 when they agree.

    The empty target scores 0.
    """
    if len(x) == 0:
        raise ValueError("length_ratio needs a non-empty source")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    bx = beta * len(x)
    ny = len(y)
    if ny == 0:
        return 0.0
    if bx < ny:
        return bx / ny
    return ny / bx


@dataclass(frozen=True)
class LexDictionary:
    entries: tuple[tuple[str, str, float], ...]
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((s, t, float(p)) for s, t, p in self.entries))
        pairs = [(s, t) for s, t, _ in self.entries]
        if len(set(pairs)) != len(pairs):
            raise ValueError("dictionary pairs must be unique")
        if any(p < self.threshold for _, _, p in self.entries):
            raise ValueError("entry below threshold")

    def __len__(self):
        return len(self.entries)


def load_lex_dictionary(lines: Iterable[str], threshold: float = 0.5) -> LexDictionary:
    """Parse ``src tgt prob`` lines, keeping entries with ``prob >= threshold``.

    Duplicate pairs keep their highest probability at the first-seen position.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    best: dict[tuple[str, str], float] = {}
    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ParseError(f"expected 'src tgt prob', got {line.strip()!r}", line_no)
        src, tgt, raw = parts
        try:
            prob = float(raw)
        except ValueError:
            raise ParseError(f"bad probability {raw!r}", line_no) from None
        if not 0.0 <= prob <= 1.0:
            raise ParseError(f"probability {prob} outside [0, 1]", line_no)
        key = (src, tgt)
        if key not in best or prob > best[key]:
            best[key] = prob
    kept = tuple((s, t, p) for (s, t), p in best.items() if p >= threshold)
    return LexDictionary(kept, threshold)


def read_lex_dictionary(path, threshold: float = 0.5) -> LexDictionary:
    with open(path, encoding="utf-8") as fh:
        return load_lex_dictionary(fh, threshold)


def lexical_dict_features(d: LexDictionary, x, y, vocab_src=None, vocab_tgt=None) -> np.ndarray:
    """One 0/1 indicator per entry: source word in ``x`` and target word in ``y``.

    ``x``/``y`` are token strings, or ids when the vocabularies are given.
    """
    if vocab_src is not None:
        x = vocab_src.decode(x)
    if vocab_tgt is not None:
        y = vocab_tgt.decode(y)
    xs, ys = set(x), set(y)
    return np.array([float(s in xs and t in ys) for s, t, _ in d.entries])


# -- feature components -----------------------------------------------------
# Each component maps (x, y) id tuples to a list of floats of length ``dim``.

@dataclass(frozen=True)
class LengthRatioFeature:
    beta: float = 1.0
    dim: int = field(default=1, init=False)

    def __call__(self, x, y):
        return [length_ratio(x, y, self.beta)]


@dataclass(frozen=True)
class TargetLengthFeature:
    """Raw target length ``|y|``."""

    dim: int = field(default=1, init=False)

    def __call__(self, x, y):
        return [float(len(y))]


@dataclass(frozen=True)
class ConstantFeature:
    value: float = 1.0
    dim: int = field(default=1, init=False)

    def __call__(self, x, y):
        return [self.value]


@dataclass(frozen=True, eq=False)
class LexicalDictFeature:
    """Dictionary indicators resolved against the model vocabularies.

    Entries whose words are out of vocabulary stay in place and are always 0.
    """

    dictionary: LexDictionary
    vocab_src: object
    vocab_tgt: object

    def __post_init__(self):
        pairs = []
        for s, t, _ in self.dictionary.entries:
            i, j = self.vocab_src.get(s), self.vocab_tgt.get(t)
            pairs.append((i, j) if i is not None and j is not None else None)
        object.__setattr__(self, "_pairs", tuple(pairs))

    @property
    def dim(self):
        return len(self.dictionary)

    def __call__(self, x, y):
        xs, ys = set(x), set(y)
        return [0.0 if p is None else float(p[0] in xs and p[1] in ys) for p in self._pairs]


class FeatureSet:
    """Ordered concatenation of scaled feature components."""

    def __init__(self, components: Sequence, scales: Sequence[float] | None = None, cache_size: int = 1 << 16):
        self.components = tuple(components)
        self.scales = tuple(float(s) for s in scales) if scales is not None else (1.0,) * len(self.components)
        if len(self.scales) != len(self.components):
            raise ValueError("one scale per component")
        self.m = sum(c.dim for c in self.components)
        self._cache: dict = {}
        self._cache_size = cache_size

    def __len__(self):
        return self.m

    def __call__(self, x, y) -> np.ndarray:
        key = (x, y)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        vals = []
        for comp, s in zip(self.components, self.scales):
            out = comp(x, y)
            vals.extend(out if s == 1.0 else [v * s for v in out])
        vec = np.array(vals, dtype=np.float64)
        if vec.shape != (self.m,) or not np.all(np.isfinite(vec)):
            raise ValueError(f"feature evaluation produced {vec!r}")
        vec.flags.writeable = False
        if len(self._cache) < self._cache_size:
            self._cache[key] = vec
        return vec

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


def evaluate(fs: FeatureSet, x, y) -> np.ndarray:
    return fs(x, y)


def empirical_average(fs: FeatureSet, x, refs) -> np.ndarray:
    """Mean feature vector over the references of ``x``."""
    if len(refs) == 0:
        raise ValueError("at least one reference is required")
    base = fs(x, refs[0])
    if len(refs) == 1:
        return base
    # shifted mean: identical references reproduce ``base`` exactly
    return base + np.mean([fs(x, r) - base for r in refs], axis=0)
