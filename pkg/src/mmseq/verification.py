"""Independent oracles: finite differences, Monte Carlo unbiasedness, sampler fidelity.

Replicate ``r`` of a Monte Carlo run draws from
``SeedSequence(seed, spawn_key=(r,))``, and replicates are reduced in fixed
chunks in index order, so results do not depend on the worker count.
"""
from __future__ import annotations

import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np
from scipy import stats

from .errors import ConfigError
from .estimators import (
    EstimatorConfig,
    estimate_instance_gradient,
    instance_gradient_exact,
    support_table,
)
from .features import (
    FeatureSet,
    LengthRatioFeature,
    LexDictionary,
    LexicalDictFeature,
    TargetLengthFeature,
)
from .seqmodel import DEFAULT_ENUM_CAP, TabularModel, Vocabulary, enumerate_support, grad_log_prob, sample

MIN_REPLICATES = 10_000
CHUNK = 4096


def finite_difference_gradient(loss, params, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(loss(p + h e_i) - loss(p - h e_i)) / 2h``."""
    if not h > 0:
        raise ValueError("h must be positive")
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        fplus = loss(params)
        params[i] = old - h
        fminus = loss(params)
        params[i] = old
        if not (np.isfinite(fplus) and np.isfinite(fminus)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        grad[i] = (fplus - fminus) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``max|a - b| / max(max|a|, max|b|, floor)``.

    The floor keeps roundoff in a vanishing finite-difference gradient from
    reading as a 100% error; 0 when both vectors are exactly zero.
    """
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    if not np.any(a != b):
        return 0.0
    return float(np.abs(a - b).max() / scale)


# -- replicate statistics -----------------------------------------------------

class RunningMoments:
    """Chunked mean / sum-of-squares accumulator (Chan et al. combination).

    Each chunk is shifted by its first row, so a run of identical vectors
    reproduces that vector exactly as its mean.
    """

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add_chunk(self, rows: np.ndarray):
        k = rows.shape[0]
        if k == 0:
            return
        d = rows - rows[0]
        dm = d.mean(axis=0)
        cmean = rows[0] + dm
        cm2 = ((d - dm) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = k, cmean, cm2
            return
        tot = self.n + k
        delta = cmean - self.mean
        self.mean = self.mean + delta * (k / tot)
        self.m2 = self.m2 + cm2 + delta ** 2 * (self.n * k / tot)
        self.n = tot

    @property
    def std_error(self) -> np.ndarray:
        if self.n < 2:
            return np.full_like(self.mean, np.inf)
        return np.sqrt(self.m2 / (self.n - 1) / self.n)


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))


def _run_chunk(fn, seed, start, stop):
    return np.stack([np.asarray(fn(replicate_rng(seed, r)), dtype=np.float64) for r in range(start, stop)])


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MM_THREADS", "1")))
    except ValueError:
        return 1


def run_replicates(fn, replicates: int, seed: int, workers: int | None = None) -> RunningMoments:
    """Evaluate ``fn(rng)`` for ``replicates`` independent streams.

    ``fn`` must be picklable when ``workers > 1``.
    """
    workers = worker_count() if workers is None else workers
    bounds = [(s, min(s + CHUNK, replicates)) for s in range(0, replicates, CHUNK)]
    moments = None
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = pool.map(_run_chunk, *zip(*[(fn, seed, a, b) for a, b in bounds]))
            for rows in chunks:
                moments = moments or RunningMoments(rows.shape[1])
                moments.add_chunk(rows)
    else:
        for a, b in bounds:
            rows = _run_chunk(fn, seed, a, b)
            moments = moments or RunningMoments(rows.shape[1])
            moments.add_chunk(rows)
    return moments


@dataclass
class BiasReport:
    means: np.ndarray
    std_errors: np.ndarray
    exact: np.ndarray
    z_scores: np.ndarray
    replicates: int
    max_abs_z: float
    fraction_within_4: float
    label: str = ""

    @classmethod
    def from_moments(cls, moments: RunningMoments, exact, label="", atol=1e-12):
        exact = np.asarray(exact, dtype=np.float64)
        se = moments.std_error
        diff = moments.mean - exact
        z = np.zeros_like(diff)
        live = se > 0
        z[live] = diff[live] / se[live]
        # zero-variance coordinates must agree with the reference outright
        z[~live & (np.abs(diff) > atol)] = np.inf
        absz = np.abs(z)
        return cls(moments.mean, se, exact, z, moments.n, float(absz.max(initial=0.0)),
                   float(np.mean(absz <= 4.0)) if z.size else 1.0, label)

    def passes(self, min_fraction: float = 0.99, max_z: float = 6.0) -> bool:
        return self.fraction_within_4 >= min_fraction and self.max_abs_z <= max_z

    @property
    def exact_match(self) -> bool:
        return bool(np.all(self.std_errors == 0) and np.all(self.means == self.exact))

    def summary(self) -> dict:
        return {
            "label": self.label,
            "replicates": self.replicates,
            "max_abs_z": self.max_abs_z,
            "fraction_within_4": self.fraction_within_4,
            "exact_match": self.exact_match,
            "passes": self.passes(),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = [float(t) if np.isfinite(t) else str(t) for t in v]
        d.update(self.summary())
        return d


def _estimator_replicate(model, fs, x, refs, config, rng):
    return estimate_instance_gradient(model, fs, x, refs, config, rng)


def estimator_bias_report(model, fs, x, refs, config: EstimatorConfig, replicates: int, seed: int,
                          cap: int = DEFAULT_ENUM_CAP, workers: int | None = None) -> BiasReport:
    """Replicate means of an MM gradient estimator against the exact per-instance gradient."""
    if replicates < MIN_REPLICATES:
        raise ConfigError(f"{replicates} replicates is too few to be conclusive (need >= {MIN_REPLICATES})")
    exact = instance_gradient_exact(model, fs, x, refs, cap)
    fn = partial(_estimator_replicate, model, fs, x, refs, config)
    moments = run_replicates(fn, replicates, seed, workers)
    return BiasReport.from_moments(moments, exact, label=config.strategy)


# -- Lemma: leave-one-out products are unbiased ---------------------------------

def lemma1_reference(model, fs, zeta, x=(), center=None, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """``A = E_y[<phi_hat, phi(y)> zeta(y)]`` by enumeration.

    With ``center`` given, features are replaced by ``phi - center`` throughout.
    """
    seqs, probs = support_table(model, x, cap)
    feats = np.stack([fs(x, y) for y in seqs])
    if center is not None:
        feats = feats - center
    phi_hat = probs @ feats
    zetas = np.stack([np.atleast_1d(np.asarray(zeta(y), dtype=np.float64)) for y in seqs])
    return (probs * (feats @ phi_hat)) @ zetas


def lemma1_estimate(model, fs, zeta, J, rng, x=(), center=None) -> np.ndarray:
    """One draw of ``B = (1/J) sum_i <loo_mean_{-i}, phi(y_i)> zeta(y_i)``."""
    ys = [sample(model, x, rng) for _ in range(J)]
    feats = np.stack([fs(x, y) for y in ys])
    if center is not None:
        feats = feats - center
    loo = (feats.sum(axis=0) - feats) / (J - 1)
    out = None
    for y, w in zip(ys, np.einsum("jm,jm->j", loo, feats)):
        term = w * np.atleast_1d(np.asarray(zeta(y), dtype=np.float64))
        out = term if out is None else out + term
    return out / J


def lemma1_check(model, fs, zeta, J, replicates, seed, x=(), center=None,
                 cap: int = DEFAULT_ENUM_CAP, workers: int | None = None) -> BiasReport:
    if J < 2:
        raise ConfigError("the leave-one-out estimate needs J >= 2")
    if replicates < MIN_REPLICATES:
        raise ConfigError(f"{replicates} replicates is too few to be conclusive (need >= {MIN_REPLICATES})")
    exact = lemma1_reference(model, fs, zeta, x, center, cap)
    fn = partial(_lemma_replicate, model, fs, zeta, J, tuple(x), center)
    return BiasReport.from_moments(run_replicates(fn, replicates, seed, workers), exact, label="lemma1")


def _lemma_replicate(model, fs, zeta, J, x, center, rng):
    return lemma1_estimate(model, fs, zeta, J, rng, x, center)


# -- sampler fidelity -----------------------------------------------------------

@dataclass
class FrequencyReport:
    n_samples: int
    tv_distance: float
    chi2: float
    dof: int
    p_value: float
    n_buckets: int

    def passes(self, alpha: float = 1e-3, max_tv: float = 0.002) -> bool:
        return self.p_value > alpha and self.tv_distance < max_tv


def sampler_frequency_check(model, x, n_samples: int, seed: int, cap: int = DEFAULT_ENUM_CAP,
                            min_expected: float = 5.0) -> FrequencyReport:
    """Empirical ancestral-sample frequencies against enumerated probabilities."""
    if n_samples < MIN_REPLICATES:
        raise ConfigError(f"need at least {MIN_REPLICATES} samples")
    support = enumerate_support(model, x, cap)
    rng = np.random.default_rng(seed)
    counts = Counter(sample(model, x, rng) for _ in range(n_samples))
    probs = np.array([p for _, p in support])
    observed = np.array([counts.pop(y, 0) for y, _ in support], dtype=np.float64)
    if counts:
        raise AssertionError(f"sampler produced sequences outside the support: {list(counts)[:3]}")
    tv = 0.5 * float(np.abs(observed / n_samples - probs).sum())
    expected = probs * n_samples
    small = expected < min_expected
    obs_b = list(observed[~small])
    exp_b = list(expected[~small])
    if small.any():
        obs_b.append(observed[small].sum())
        exp_b.append(expected[small].sum())
    obs_b, exp_b = np.array(obs_b), np.array(exp_b)
    keep = exp_b > 0
    if np.any(obs_b[~keep] > 0):
        chi2 = np.inf
    else:
        chi2 = float(((obs_b[keep] - exp_b[keep]) ** 2 / exp_b[keep]).sum())
    dof = int(keep.sum()) - 1
    if dof > 0:
        p = float(stats.chi2.sf(chi2, dof))
    else:
        p = 1.0 if np.isfinite(chi2) else 0.0
    return FrequencyReport(n_samples, tv, chi2, dof, p, int(keep.sum()))


# -- canonical instances ---------------------------------------------------------

def tiny_vocabularies(n_src: int = 2, n_tgt: int = 3):
    src = Vocabulary.build([f"s{i}" for i in range(1, n_src + 1)])
    tgt = Vocabulary.build([chr(ord("a") + i) for i in range(n_tgt)])
    return src, tgt


def standard_instance(seed: int = 0):
    """Random 3-token model (max_len 3) with a length-ratio + 2-entry dictionary feature set.

    Returns ``(model, fs, x, refs)``.
    """
    src, tgt = tiny_vocabularies(2, 3)
    model = TabularModel.random(src, tgt, np.random.default_rng(seed), scale=1.0, context_order=1, max_len=3)
    lex = LexDictionary((("s1", "a", 0.9), ("s2", "b", 0.7)))
    fs = FeatureSet([LengthRatioFeature(1.0), LexicalDictFeature(lex, src, tgt)])
    x = src.encode(["s1", "s2"])
    refs = [tgt.encode(["a", "b"])]
    return model, fs, x, refs


def designed_unmatched_instance():
    """Model that prefers long outputs, a one-token reference, and the raw length feature."""
    src, tgt = tiny_vocabularies(2, 3)
    logits = np.zeros((len(src) + 1, len(tgt), len(tgt)))
    logits[..., tgt.eos_id] = -2.0
    model = TabularModel(src, tgt, logits, context_order=1, max_len=3)
    fs = FeatureSet([TargetLengthFeature()])
    x = src.encode(["s1"])
    refs = [tgt.encode(["a"])]
    return model, fs, x, refs


def lemma_instance(seed: int = 0):
    """Unconditional random 3-token model with ``phi = |y|`` and ``zeta = grad log p``."""
    src, tgt = tiny_vocabularies(2, 3)
    model = TabularModel.random(src, tgt, np.random.default_rng(seed), scale=1.0, context_order=1, max_len=3)
    fs = FeatureSet([TargetLengthFeature()])
    zeta = partial(grad_log_prob, model, ())
    return model, fs, zeta


def gradcheck_instance(seed: int):
    """Random model, batch and feature set (m = 4) for finite-difference checks."""
    rng = np.random.default_rng(seed)
    src, tgt = tiny_vocabularies(3, 3)
    model = TabularModel.random(src, tgt, rng, scale=1.0, context_order=1, max_len=3)
    lex = LexDictionary(((f"s{1 + rng.integers(3)}", "a", 0.8), ("s2", chr(ord("a") + rng.integers(1, 3)), 0.6)))
    fs = FeatureSet([LengthRatioFeature(float(rng.uniform(0.5, 2.0))), LexicalDictFeature(lex, src, tgt),
                     TargetLengthFeature()], scales=[1.0, 1.0, 0.5])
    batch = []
    for _ in range(2):
        x = tuple(int(i) for i in rng.choice(src.content_ids, size=rng.integers(1, 4)))
        refs = [tuple(int(i) for i in rng.choice(tgt.content_ids, size=rng.integers(0, 4)))
                for _ in range(rng.integers(1, 3))]
        batch.append((x, refs))
    return model, fs, batch


def gradcheck(model, fs, batch, h: float = 1e-5, cap: int = DEFAULT_ENUM_CAP, grad_fn=None) -> float:
    """Relative error between an analytic MM gradient and finite differences of the exact loss."""
    from .estimators import mm_gradient_exact, mm_loss_exact

    grad_fn = grad_fn or mm_gradient_exact
    analytic = grad_fn(model, fs, batch, cap)
    fd = finite_difference_gradient(lambda p: mm_loss_exact(model.with_params(p), fs, batch, cap), model.params, h)
    return relative_error(analytic, fd)
