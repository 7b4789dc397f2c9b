"""Moment-matching loss, its exact gradient, and stochastic gradient estimators.

Sign conventions: every ``mm_*`` gradient is the gradient of the MM loss
(descend it). ``ce_gradient`` and ``rl_pg_gradient`` are gradients of
log-likelihood / expected reward (ascend them).

The factor 2 from differentiating the squared norm is kept everywhere, so the
expectation of each unbiased estimator equals :func:`instance_gradient_exact`
with no rescaling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .features import FeatureSet, empirical_average
from .seqmodel import DEFAULT_ENUM_CAP, TabularModel, enumerate_support, grad_log_prob, sample

STRATEGIES = ("exact", "simplistic", "economical", "jackknife")

RewardFunction = Callable  # (x, y) -> float, must not depend on model parameters


@dataclass(frozen=True)
class MomentGap:
    delta: np.ndarray
    phi_hat: np.ndarray
    phi_bar: np.ndarray


def moment_gap(phi_hat, phi_bar) -> MomentGap:
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    phi_bar = np.asarray(phi_bar, dtype=np.float64)
    return MomentGap(phi_hat - phi_bar, phi_hat, phi_bar)


@dataclass(frozen=True)
class EstimatorConfig:
    strategy: str = "jackknife"
    J: int = 5
    K: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "jackknife" and self.J < 2:
            raise ConfigError("jackknife needs J >= 2")
        if self.strategy in ("simplistic", "economical") and self.J < 1:
            raise ConfigError(f"{self.strategy} needs J >= 1")
        if self.strategy == "simplistic" and self.K < 1:
            raise ConfigError("simplistic needs K >= 1")


# -- exact quantities by enumeration ----------------------------------------

def support_table(model: TabularModel, x, cap: int = DEFAULT_ENUM_CAP):
    """``(sequences, probs)`` for the full support of ``p(.|x)``, cached on the model."""
    key = ("support", tuple(x), cap)
    hit = model._support_cache.get(key)
    if hit is None:
        support = enumerate_support(model, x, cap)
        probs = np.array([p for _, p in support])
        probs.flags.writeable = False
        hit = model._support_cache[key] = ([y for y, _ in support], probs)
    return hit


def support_score_grads(model: TabularModel, x, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """``grad log p(y|x)`` for every support sequence, one row each."""
    key = ("grads", tuple(x), cap)
    hit = model._support_cache.get(key)
    if hit is None:
        seqs, _ = support_table(model, x, cap)
        hit = np.stack([grad_log_prob(model, x, y) for y in seqs])
        hit.flags.writeable = False
        model._support_cache[key] = hit
    return hit


def _feature_matrix(fs: FeatureSet, x, seqs) -> np.ndarray:
    return np.stack([fs(x, y) for y in seqs])


def model_average_exact(model: TabularModel, fs: FeatureSet, x, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """Expected feature vector under ``p(.|x)``."""
    seqs, probs = support_table(model, x, cap)
    return probs @ _feature_matrix(fs, x, seqs)


def _check_batch(batch):
    if len(batch) == 0:
        raise ValueError("empty batch")


def mm_loss_exact(model: TabularModel, fs: FeatureSet, batch, cap: int = DEFAULT_ENUM_CAP) -> float:
    """Mean squared distance between model and empirical feature averages.

    ``batch`` is a list of ``(x, refs)`` pairs.
    """
    _check_batch(batch)
    total = 0.0
    for x, refs in batch:
        delta = model_average_exact(model, fs, x, cap) - empirical_average(fs, x, refs)
        total += float(delta @ delta)
    return total / len(batch)


def multiplicative_score(phi_hat, phi_bar, phi_y) -> float:
    """``<phi_hat - phi_bar, phi_y - phi_bar>``."""
    phi_hat, phi_bar, phi_y = (np.asarray(v, dtype=np.float64) for v in (phi_hat, phi_bar, phi_y))
    if not phi_hat.shape == phi_bar.shape == phi_y.shape:
        raise ValueError(f"dimension mismatch: {phi_hat.shape}, {phi_bar.shape}, {phi_y.shape}")
    return float((phi_hat - phi_bar) @ (phi_y - phi_bar))


def instance_gradient_exact(model, fs, x, refs, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """Exact per-instance gradient of ``||phi_hat - phi_bar||^2``."""
    seqs, probs = support_table(model, x, cap)
    grads = support_score_grads(model, x, cap)
    feats = _feature_matrix(fs, x, seqs)
    phi_bar = empirical_average(fs, x, refs)
    phi_hat = probs @ feats
    scores = (feats - phi_bar) @ (phi_hat - phi_bar)
    return 2.0 * ((probs * scores) @ grads)


def mm_gradient_exact(model, fs, batch, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    _check_batch(batch)
    g = np.zeros(model.num_params)
    for x, refs in batch:
        g += instance_gradient_exact(model, fs, x, refs, cap)
    return g / len(batch)


# -- sampled estimators -------------------------------------------------------

def jackknife_average(feature_list, j: int) -> np.ndarray:
    """Mean of all feature vectors except the one at (0-based) index ``j``."""
    J = len(feature_list)
    if J < 2:
        raise ValueError("leave-one-out average needs at least 2 vectors")
    if not 0 <= j < J:
        raise IndexError(f"index {j} out of range for {J} vectors")
    rest = [np.asarray(f, dtype=np.float64) for i, f in enumerate(feature_list) if i != j]
    return np.mean(rest, axis=0)


def _draw(model, fs, x, n, rng):
    ys = [sample(model, x, rng) for _ in range(n)]
    return ys, np.stack([fs(x, y) for y in ys])


def _weighted_scores(model, x, ys, scores, scale) -> np.ndarray:
    g = np.zeros(model.num_params)
    for y, s in zip(ys, scores):
        if s != 0.0:
            g += s * grad_log_prob(model, x, y)
    return scale * g


def mm_gradient_jackknife(model, fs, x, refs, J, rng, return_scores=False):
    """Unbiased leave-one-out estimator from a single set of ``J`` samples."""
    if J < 2:
        raise ValueError("jackknife estimator needs J >= 2")
    phi_bar = empirical_average(fs, x, refs)
    ys, feats = _draw(model, fs, x, J, rng)
    loo = (feats.sum(axis=0) - feats) / (J - 1)
    scores = np.einsum("jm,jm->j", loo - phi_bar, feats - phi_bar)
    g = _weighted_scores(model, x, ys, scores, 2.0 / J)
    return (g, scores) if return_scores else g


def mm_gradient_simplistic(model, fs, x, refs, J, K, rng, return_scores=False):
    """Unbiased estimator using ``K`` samples for the model average and ``J`` fresh ones for the expectation."""
    if J < 1 or K < 1:
        raise ValueError("simplistic estimator needs J >= 1 and K >= 1")
    phi_bar = empirical_average(fs, x, refs)
    _, avg_feats = _draw(model, fs, x, K, rng)
    phi_hat = avg_feats.mean(axis=0)
    ys, feats = _draw(model, fs, x, J, rng)
    scores = (feats - phi_bar) @ (phi_hat - phi_bar)
    g = _weighted_scores(model, x, ys, scores, 2.0 / J)
    return (g, scores) if return_scores else g


def mm_gradient_economical(model, fs, x, refs, J, rng, return_scores=False):
    """Reuses all ``J`` samples (each term's own included) for the model average. Biased."""
    if J < 1:
        raise ValueError("economical estimator needs J >= 1")
    phi_bar = empirical_average(fs, x, refs)
    ys, feats = _draw(model, fs, x, J, rng)
    phi_hat = feats.mean(axis=0)
    scores = (feats - phi_bar) @ (phi_hat - phi_bar)
    g = _weighted_scores(model, x, ys, scores, 2.0 / J)
    return (g, scores) if return_scores else g


def estimate_instance_gradient(model, fs, x, refs, config: EstimatorConfig, rng, cap: int = DEFAULT_ENUM_CAP):
    """Dispatch to the estimator named by ``config.strategy``."""
    s = config.strategy
    if s == "jackknife":
        return mm_gradient_jackknife(model, fs, x, refs, config.J, rng)
    if s == "simplistic":
        return mm_gradient_simplistic(model, fs, x, refs, config.J, config.K, rng)
    if s == "economical":
        return mm_gradient_economical(model, fs, x, refs, config.J, rng)
    if s == "exact":
        return instance_gradient_exact(model, fs, x, refs, cap)
    raise ConfigError(f"unknown strategy {s!r}")


def samples_per_instance(config: EstimatorConfig) -> int:
    if config.strategy == "exact":
        return 0
    if config.strategy == "simplistic":
        return config.J + config.K
    return config.J


# -- baselines ----------------------------------------------------------------

def ce_gradient(model, pairs) -> np.ndarray:
    """Mean of ``grad log p(y|x)`` over observed ``(x, y)`` pairs."""
    if len(pairs) == 0:
        raise ValueError("empty batch")
    g = np.zeros(model.num_params)
    for x, y in pairs:
        g += grad_log_prob(model, x, y)
    return g / len(pairs)


def rl_pg_gradient(model, reward: RewardFunction, x, J, rng) -> np.ndarray:
    """REINFORCE estimate ``(1/J) sum_j R(y_j) grad log p(y_j|x)``."""
    if J < 1:
        raise ValueError("J must be >= 1")
    g = np.zeros(model.num_params)
    for _ in range(J):
        y = sample(model, x, rng)
        r = float(reward(x, y))
        if r != 0.0:
            g += r * grad_log_prob(model, x, y)
    return g / J


def rl_pg_expectation(model, reward: RewardFunction, x, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """Exact ``E_y[R(y) grad log p(y|x)]`` by enumeration."""
    seqs, probs = support_table(model, x, cap)
    grads = support_score_grads(model, x, cap)
    r = np.array([float(reward(x, y)) for y in seqs])
    return (probs * r) @ grads
