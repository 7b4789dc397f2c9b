"""SGD training with cross-entropy and moment-matching updates.

A run is a CE-only warm start followed by the MM phase, in either
*alternation* (fixed blocks of CE steps then MM steps) or *interpolation*
(``ce + lambda * mm`` every step). The dev MM loss is estimated from samples
with a fixed evaluation seed, and the checkpoint with the lowest value seen
during the MM phase is retained.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from .data import ParallelCorpus, batch_stream
from .errors import ConfigError
from .estimators import EstimatorConfig, ce_gradient, estimate_instance_gradient, samples_per_instance
from .features import FeatureSet, empirical_average
from .seqmodel import DEFAULT_ENUM_CAP, TabularModel, apply_update, greedy_decode, log_prob, sample

MODES = ("alternation", "interpolation")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "interpolation"
    lam: float = 0.5
    J: int = 5
    K: int = 2
    strategy: str = "jackknife"
    warmup_steps: int = 1000
    max_steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.05
    ce_steps: int = 100
    mm_steps: int = 100
    eval_every: int = 50
    dev_samples: int = 32
    beta: float = 1.0
    seed: int = 0
    enum_cap: int = DEFAULT_ENUM_CAP

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("max_steps and batch_size must be >= 1")
        if self.warmup_steps < 0 or self.ce_steps < 0 or self.mm_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.mode == "alternation" and self.ce_steps + self.mm_steps == 0:
            raise ConfigError("alternation needs ce_steps + mm_steps > 0")
        if self.eval_every < 1 or self.dev_samples < 1:
            raise ConfigError("eval_every and dev_samples must be >= 1")
        if not np.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be finite")
        self.estimator()  # validates strategy / J / K

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(self.strategy, self.J, self.K, self.seed)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class MetricsRecord:
    step: int
    phase: str
    update: str
    ce_loss_dev: float
    mm_loss_dev: float
    moment_gap: list
    exact_match: float
    mm_samples: int
    wall_time: float = 0.0

    def to_dict(self, with_time: bool = False) -> dict:
        d = {
            "step": self.step,
            "phase": self.phase,
            "update": self.update,
            "ce_loss_dev": self.ce_loss_dev,
            "mm_loss_dev": self.mm_loss_dev,
            "moment_gap": list(self.moment_gap),
            "exact_match": self.exact_match,
            "mm_samples": self.mm_samples,
        }
        if with_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class Checkpoint:
    model: TabularModel
    step: int
    mm_loss_dev: float


@dataclass
class TrainResult:
    model: TabularModel
    best: Checkpoint | None
    metrics: list = field(default_factory=list)
    mm_samples: int = 0
    phase_start: MetricsRecord | None = None


def interpolate(grad_ce, grad_mm, lam: float) -> np.ndarray:
    """``grad_ce + lam * grad_mm``; both arguments must already point uphill."""
    grad_ce, grad_mm = np.asarray(grad_ce, dtype=np.float64), np.asarray(grad_mm, dtype=np.float64)
    if grad_ce.shape != grad_mm.shape:
        raise ValueError(f"shape mismatch: {grad_ce.shape} vs {grad_mm.shape}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return grad_ce + lam * grad_mm


def dev_moments(model, fs: FeatureSet, examples, S: int, seed: int) -> tuple[float, np.ndarray]:
    """Sampled dev MM loss and the mean per-feature gap ``phi_hat_approx - phi_bar``."""
    if len(examples) == 0:
        raise ValueError("empty dev set")
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = np.random.default_rng(seed)
    total = 0.0
    gap = np.zeros(fs.m)
    for x, refs in examples:
        phi_hat = np.mean([fs(x, sample(model, x, rng)) for _ in range(S)], axis=0)
        delta = phi_hat - empirical_average(fs, x, refs)
        total += float(delta @ delta)
        gap += delta
    return total / len(examples), gap / len(examples)


def dev_mm_loss(model, fs: FeatureSet, examples, S: int, seed: int) -> float:
    """Plug-in estimate of the MM loss from ``S`` samples per source."""
    return dev_moments(model, fs, examples, S, seed)[0]


def dev_ce_loss(model, examples) -> float:
    """Mean negative log-likelihood per reference."""
    nll = [-log_prob(model, x, r) for x, refs in examples for r in refs]
    return float(np.mean(nll))


def exact_match_rate(model, examples) -> float:
    return float(np.mean([greedy_decode(model, x) in refs for x, refs in examples]))


def _examples(corpus):
    return corpus.examples if isinstance(corpus, ParallelCorpus) else tuple(corpus)


def train(config: TrainConfig, model: TabularModel, fs: FeatureSet, train_corpus, dev_corpus,
          on_eval=None) -> TrainResult:
    """Run the warm start and the MM phase; deterministic given ``config.seed``.

    ``on_eval(record, model)`` is called after every evaluation.
    """
    train_ex, dev_ex = _examples(train_corpus), _examples(dev_corpus)
    if not train_ex or not dev_ex:
        raise ValueError("training and dev corpora must be non-empty")
    est = config.estimator()
    per_instance = samples_per_instance(est)
    batch_ss, mm_ss = np.random.SeedSequence(config.seed).spawn(2)
    stream = batch_stream(train_ex, config.batch_size, np.random.default_rng(batch_ss))
    mm_rng = np.random.default_rng(mm_ss)
    eval_seed = config.seed
    t0 = time.perf_counter()
    result = TrainResult(model, None)

    def evaluate(step, phase, update):
        loss, gap = dev_moments(result.model, fs, dev_ex, config.dev_samples, eval_seed)
        rec = MetricsRecord(step, phase, update, dev_ce_loss(result.model, dev_ex), loss, gap.tolist(),
                            exact_match_rate(result.model, dev_ex), result.mm_samples,
                            time.perf_counter() - t0)
        result.metrics.append(rec)
        if phase == "mm" and (result.best is None or loss < result.best.mm_loss_dev):
            result.best = Checkpoint(result.model, step, loss)
        if on_eval is not None:
            on_eval(rec, result.model)
        return rec

    def mm_gradient(batch):
        g = np.zeros(result.model.num_params)
        for x, refs in batch:
            try:
                g += estimate_instance_gradient(result.model, fs, x, refs, est, mm_rng, config.enum_cap)
            except Exception as exc:
                raise RuntimeError(f"MM estimator failed at step {step}: {exc}") from exc
        result.mm_samples += per_instance * len(batch)
        return g / len(batch)

    step = 0
    for _ in range(config.warmup_steps):
        step += 1
        batch = next(stream)
        result.model = apply_update(result.model, ce_gradient(result.model, _pairs(batch)), config.learning_rate)
        if step % config.eval_every == 0 and step < config.warmup_steps:
            evaluate(step, "warmup", "ce")

    result.phase_start = evaluate(step, "mm", "start")
    cycle = config.ce_steps + config.mm_steps
    for s in range(config.max_steps):
        step += 1
        batch = next(stream)
        if config.mode == "interpolation":
            direction = ce_gradient(result.model, _pairs(batch))
            if config.lam > 0:
                direction = interpolate(direction, -mm_gradient(batch), config.lam)
            update = "interpolation"
        elif s % cycle < config.ce_steps:
            direction, update = ce_gradient(result.model, _pairs(batch)), "ce"
        else:
            direction, update = -mm_gradient(batch), "mm"
        result.model = apply_update(result.model, direction, config.learning_rate)
        if (s + 1) % config.eval_every == 0 or s + 1 == config.max_steps:
            evaluate(step, "mm", update)
    return result


def _pairs(batch):
    return [(x, r) for x, refs in batch for r in refs]
