"""Run configuration: one YAML document, strict keys, dotted overrides.

Defaults (all documented here so a config file can be empty)::

    seed: 0                 # training / verification seed
    out: runs/default
    enum_cap: 1000000
    task:     synthetic task (kind, vocab sizes, lengths, train/dev sizes)
              or parallel text (kind: corpus, train_src, train_tgt, dev_src, dev_tgt)
    model:    context_order 1, max_len 8, init_scale 0.0
    features: [{type: length_ratio, beta: 1.0}]
              other types: lexical_dict (path, threshold 0.5; path "auto"
              uses the token-map dictionary), constant (value), target_length
    train:    TrainConfig fields; ``lambda`` is accepted for ``lam``
              (J 5, lambda 0.5, strategy jackknife)
    verify:   replicates 200000, strategies, J 3, K 2, simplistic_J 2,
              economical_J 1, lemma true, lemma_J 2, instance_seed 0
    gradcheck: seeds 20, h 1e-5, tol 1e-5, features default|constant,
              drop_factor_two false (test hook)
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .data import TASK_KINDS, ParallelCorpus, SyntheticTaskSpec, encode_with, generate_synthetic, read_parallel_corpus
from .errors import ConfigError
from .estimators import STRATEGIES
from .features import (ConstantFeature, FeatureSet, LengthRatioFeature, LexicalDictFeature, TargetLengthFeature,
                       load_lex_dictionary, read_lex_dictionary)
from .seqmodel import DEFAULT_ENUM_CAP, TabularModel
from .training import TrainConfig

FEATURE_KEYS = {
    "length_ratio": {"beta", "scale"},
    "lexical_dict": {"path", "threshold", "scale"},
    "constant": {"value", "scale"},
    "target_length": {"scale"},
}


@dataclass(frozen=True)
class TaskSection:
    kind: str = "length_control"
    src_vocab: int = 5
    tgt_vocab: int = 5
    min_len: int = 1
    max_src_len: int = 5
    ratio: float = 1.5
    mapping: list | None = None
    mapping_seed: int = 0
    no_repeat: bool = True
    train_size: int = 2000
    dev_size: int = 200
    data_seed: int = 1
    train_src: str | None = None
    train_tgt: str | None = None
    dev_src: str | None = None
    dev_tgt: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS + ("corpus",):
            raise ConfigError(f"task.kind must be one of {TASK_KINDS + ('corpus',)}")
        paths = (self.train_src, self.train_tgt, self.dev_src, self.dev_tgt)
        if self.kind == "corpus" and any(p is None for p in paths):
            raise ConfigError("task.kind 'corpus' needs train_src, train_tgt, dev_src and dev_tgt")

    def synthetic(self, size: int, seed: int, max_len: int) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.kind, self.src_vocab, self.tgt_vocab, self.min_len, self.max_src_len,
                                 max_len, size, self.ratio, None if self.mapping is None else tuple(self.mapping),
                                 self.no_repeat, self.mapping_seed, seed)


@dataclass(frozen=True)
class ModelSection:
    context_order: int = 1
    max_len: int = 8
    init_scale: float = 0.0

    def __post_init__(self):
        if self.context_order < 0 or self.max_len < 1:
            raise ConfigError("model needs context_order >= 0 and max_len >= 1")


@dataclass(frozen=True)
class VerifySection:
    replicates: int = 200_000
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    J: int = 3
    K: int = 2
    simplistic_J: int = 2
    economical_J: int = 1
    lemma: bool = True
    lemma_J: int = 2
    instance_seed: int = 0

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"verify.strategies must be a non-empty subset of {STRATEGIES}")


@dataclass(frozen=True)
class GradcheckSection:
    seeds: int = 20
    h: float = 1e-5
    tol: float = 1e-5
    features: str = "default"
    drop_factor_two: bool = False

    def __post_init__(self):
        if self.seeds < 1 or not self.h > 0:
            raise ConfigError("gradcheck needs seeds >= 1 and h > 0")
        if self.features not in ("default", "constant"):
            raise ConfigError("gradcheck.features must be 'default' or 'constant'")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    enum_cap: int = DEFAULT_ENUM_CAP
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    features: list = field(default_factory=lambda: [{"type": "length_ratio", "beta": 1.0}])
    train: TrainConfig = field(default_factory=TrainConfig)
    verify: VerifySection = field(default_factory=VerifySection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["lambda"] = d["train"].pop("lam")
        d["train"].pop("seed")
        d["train"].pop("enum_cap")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


SECTIONS = {"task": TaskSection, "model": ModelSection, "verify": VerifySection, "gradcheck": GradcheckSection}


def _section(cls, raw, name):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in {name}: {exc}") from None


def _features(raw):
    if not isinstance(raw, list) or not raw:
        raise ConfigError("features must be a non-empty list")
    out = []
    for i, spec in enumerate(raw):
        if not isinstance(spec, dict) or "type" not in spec:
            raise ConfigError(f"features[{i}] needs a 'type'")
        kind = spec["type"]
        if kind not in FEATURE_KEYS:
            raise ConfigError(f"features[{i}]: unknown type {kind!r}")
        unknown = sorted(set(spec) - FEATURE_KEYS[kind] - {"type"})
        if unknown:
            raise ConfigError(f"unknown key(s) in features[{i}]: {', '.join(unknown)}")
        if kind == "lexical_dict" and "path" not in spec:
            raise ConfigError(f"features[{i}]: lexical_dict needs a path (or 'auto')")
        out.append(dict(spec))
    return out


def from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    enum_cap = raw.get("enum_cap", DEFAULT_ENUM_CAP)
    if not isinstance(seed, int) or not isinstance(enum_cap, int) or enum_cap < 1:
        raise ConfigError("seed and enum_cap must be integers (enum_cap >= 1)")
    train_raw = dict(raw.get("train") or {})
    if "lambda" in train_raw:
        if "lam" in train_raw:
            raise ConfigError("give either train.lambda or train.lam, not both")
        train_raw["lam"] = train_raw.pop("lambda")
    for k in ("seed", "enum_cap"):
        if k in train_raw:
            raise ConfigError(f"train.{k} is set at the top level")
    train_raw.update(seed=seed, enum_cap=enum_cap)
    kwargs = {name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    return RunConfig(seed=seed, out=str(raw.get("out", "runs/default")), enum_cap=enum_cap,
                     features=_features(raw.get("features", [{"type": "length_ratio", "beta": 1.0}])),
                     train=_section(TrainConfig, train_raw, "train"), **kwargs)


def apply_override(raw: dict, item: str) -> dict:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML. Lists take integer keys."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {value!r}: {exc}") from None
    raw = copy.deepcopy(raw)
    node = raw
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[_index(node, p)]
        else:
            node = node.setdefault(p, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"override {key!r} descends into a scalar")
    if isinstance(node, list):
        node[_index(node, parts[-1])] = parsed
    else:
        node[parts[-1]] = parsed
    return raw


def _index(node, p):
    try:
        i = int(p)
        node[i]
    except (ValueError, IndexError):
        raise ConfigError(f"bad list index {p!r}") from None
    return i


def load_config(path=None, overrides=(), seed=None, out=None) -> RunConfig:
    """Read a YAML (or JSON) config, apply overrides, then the --seed/--out flags."""
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for item in overrides:
        raw = apply_override(raw, item)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return from_dict(raw)


# -- building run objects ------------------------------------------------------

def build_corpora(cfg: RunConfig) -> tuple[ParallelCorpus, ParallelCorpus]:
    t = cfg.task
    if t.kind == "corpus":
        try:
            train = read_parallel_corpus(t.train_src, t.train_tgt)
            with open(t.dev_src, encoding="utf-8") as fs, open(t.dev_tgt, encoding="utf-8") as ft:
                dev = encode_with((fs.readlines(), ft.readlines()), train.vocab_src, train.vocab_tgt)
        except OSError as exc:
            raise ConfigError(f"cannot read corpus: {exc}") from None
        return train, dev
    max_len = cfg.model.max_len
    train = generate_synthetic(t.synthetic(t.train_size, t.data_seed, max_len))
    dev = generate_synthetic(t.synthetic(t.dev_size, t.data_seed + 1, max_len))
    return train, dev


def build_features(cfg: RunConfig, vocab_src, vocab_tgt) -> FeatureSet:
    comps, scales = [], []
    for spec in cfg.features:
        kind = spec["type"]
        if kind == "length_ratio":
            comps.append(LengthRatioFeature(float(spec.get("beta", 1.0))))
        elif kind == "constant":
            comps.append(ConstantFeature(float(spec.get("value", 1.0))))
        elif kind == "target_length":
            comps.append(TargetLengthFeature())
        else:
            threshold = float(spec.get("threshold", 0.5))
            if spec["path"] == "auto":
                if cfg.task.kind != "token_map":
                    raise ConfigError("lexical_dict path 'auto' needs a token_map task")
                lines = cfg.task.synthetic(1, 0, cfg.model.max_len).dictionary_lines()
                d = load_lex_dictionary(lines, threshold)
            else:
                try:
                    d = read_lex_dictionary(spec["path"], threshold)
                except OSError as exc:
                    raise ConfigError(f"cannot read dictionary: {exc}") from None
            comps.append(LexicalDictFeature(d, vocab_src, vocab_tgt))
        scales.append(float(spec.get("scale", 1.0)))
    return FeatureSet(comps, scales)


def build_model(cfg: RunConfig, vocab_src, vocab_tgt) -> TabularModel:
    m = cfg.model
    if m.init_scale == 0.0:
        return TabularModel.zeros(vocab_src, vocab_tgt, context_order=m.context_order, max_len=m.max_len)
    rng = np.random.default_rng(cfg.seed)
    return TabularModel.random(vocab_src, vocab_tgt, rng, scale=m.init_scale, context_order=m.context_order,
                               max_len=m.max_len)
