import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_model, saturated_model, vocabs
from mmseq.data import SyntheticTaskSpec, batch_stream, generate_synthetic
from mmseq.errors import ConfigError
from mmseq.estimators import ce_gradient, mm_loss_exact, support_table
from mmseq.features import ConstantFeature, FeatureSet, LengthRatioFeature, TargetLengthFeature
from mmseq.seqmodel import TabularModel, apply_update, log_prob
from mmseq.training import (MetricsRecord, TrainConfig, dev_ce_loss, dev_mm_loss, dev_moments, exact_match_rate,
                            interpolate, train)


def small_task(kind="length_control", size=60, seed=1):
    spec = SyntheticTaskSpec(kind=kind, src_vocab=3, tgt_vocab=3, max_src_len=3, max_tgt_len=5, size=size, seed=seed)
    return generate_synthetic(spec)


def small_config(**kw):
    base = dict(warmup_steps=10, max_steps=20, batch_size=4, eval_every=5, dev_samples=4, J=3, learning_rate=0.1)
    base.update(kw)
    return TrainConfig(**base)


FS = FeatureSet([LengthRatioFeature(1.0)])


def fresh_model(corpus, max_len=5):
    return TabularModel.zeros(corpus.vocab_src, corpus.vocab_tgt, max_len=max_len)


# -- config and interpolation ----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(mode="both"), dict(lam=-0.1), dict(max_steps=0), dict(batch_size=0), dict(J=1),
    dict(strategy="nope"), dict(eval_every=0), dict(dev_samples=0),
    dict(mode="alternation", ce_steps=0, mm_steps=0), dict(learning_rate=float("nan")),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_defaults():
    c = TrainConfig()
    assert (c.J, c.lam, c.strategy, c.beta, c.mode) == (5, 0.5, "jackknife", 1.0, "interpolation")
    assert (c.ce_steps, c.mm_steps, c.warmup_steps, c.dev_samples) == (100, 100, 1000, 32)


def test_interpolate_examples():
    ce, mm = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_array_equal(interpolate(ce, mm, 0.0), ce)
    np.testing.assert_array_equal(interpolate(ce, np.zeros(2), 1.0), ce)
    np.testing.assert_array_equal(interpolate(ce, mm, 0.5), [1.0, 1.0])
    with pytest.raises(ValueError):
        interpolate(ce, np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        interpolate(ce, mm, -1.0)


# -- dev loss ----------------------------------------------------------------------------

def test_dev_loss_zero_for_deterministic_reference_model():
    src, tgt = vocabs(2, 3)
    x, y = (1, 2), (3, 1)
    model = saturated_model(src, tgt, x, y, gap=1e6)
    fs = FeatureSet([LengthRatioFeature(1.0), TargetLengthFeature()])
    for S in (1, 7):
        assert dev_mm_loss(model, fs, [(x, (y,))], S, seed=3) == 0.0
    assert exact_match_rate(model, [(x, (y,))]) == 1.0


def test_dev_loss_constant_feature():
    model = random_model(0)
    assert dev_mm_loss(model, FeatureSet([ConstantFeature(3.0)]), [((1,), ((2,),))], 5, 0) == 0.0


def test_dev_loss_errors():
    with pytest.raises(ValueError):
        dev_mm_loss(random_model(0), FS, [], 4, 0)
    with pytest.raises(ValueError):
        dev_mm_loss(random_model(0), FS, [((1,), ((2,),))], 0, 0)


def test_dev_loss_fixed_seed_is_deterministic():
    model = random_model(2)
    ex = [((1,), ((2,),)), ((2, 1), ((1, 1),))]
    assert dev_mm_loss(model, FS, ex, 8, 5) == dev_mm_loss(model, FS, ex, 8, 5)


def _plugin_prediction(model, fs, examples, S):
    exact = mm_loss_exact(model, fs, examples)
    trace = 0.0
    for x, _ in examples:
        seqs, probs = support_table(model, x)
        feats = np.stack([fs(x, y) for y in seqs])
        mu = probs @ feats
        trace += float(probs @ ((feats - mu) ** 2).sum(axis=1))
    return exact + trace / len(examples) / S


@pytest.mark.parametrize("S", [1, 4])
def test_plugin_bias_matches_covariance_prediction(S):
    model = random_model(9)
    fs = FeatureSet([LengthRatioFeature(1.0), TargetLengthFeature()], scales=[1.0, 0.5])
    examples = [((1, 2), ((1,),)), ((2,), ((3, 3),))]
    vals = np.array([dev_mm_loss(model, fs, examples, S, seed) for seed in range(6000)])
    predicted = _plugin_prediction(model, fs, examples, S)
    assert abs(vals.mean() - predicted) <= 4 * vals.std(ddof=1) / np.sqrt(len(vals))
    assert predicted > mm_loss_exact(model, fs, examples)


def test_plugin_estimate_converges_with_more_samples():
    model = random_model(10)
    examples = [((1, 2), ((1, 2),))]
    exact = mm_loss_exact(model, FS, examples)
    errs = []
    for S in (8, 64, 512):
        vals = np.array([dev_mm_loss(model, FS, examples, S, seed) for seed in range(200)])
        errs.append(abs(vals.mean() - exact))
        predicted = _plugin_prediction(model, FS, examples, S)
        assert abs(vals.mean() - predicted) <= 4 * vals.std(ddof=1) / np.sqrt(len(vals))
    assert errs[-1] < errs[0]


def test_dev_moments_gap_matches_loss_for_single_feature():
    model = random_model(3)
    ex = [((1,), ((2, 2),))]
    loss, gap = dev_moments(model, FS, ex, 16, 0)
    assert loss == pytest.approx(float(gap @ gap))


def test_dev_ce_loss_per_reference():
    model = random_model(4)
    ex = [((1,), ((2,), (3, 1))), ((2,), ((),))]
    expected = -np.mean([log_prob(model, (1,), (2,)), log_prob(model, (1,), (3, 1)), log_prob(model, (2,), ())])
    assert dev_ce_loss(model, ex) == pytest.approx(expected, rel=1e-14)


# -- the training loop --------------------------------------------------------------------

def test_lambda_zero_is_bit_identical_to_pure_ce():
    tr, dev = small_task(seed=1), small_task(size=10, seed=2)
    cfg = small_config(lam=0.0)
    res = train(cfg, fresh_model(tr), FS, tr, dev)
    assert res.mm_samples == 0
    # independent CE loop on the same batch stream
    batch_ss, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    stream = batch_stream(tr.examples, cfg.batch_size, np.random.default_rng(batch_ss))
    model = fresh_model(tr)
    for _ in range(cfg.warmup_steps + cfg.max_steps):
        batch = next(stream)
        model = apply_update(model, ce_gradient(model, [(x, r) for x, refs in batch for r in refs]),
                             cfg.learning_rate)
    assert res.model.params.tobytes() == model.params.tobytes()


def test_mm_steps_zero_alternation_is_pure_ce():
    tr, dev = small_task(seed=1), small_task(size=10, seed=2)
    a = train(small_config(mode="alternation", ce_steps=3, mm_steps=0), fresh_model(tr), FS, tr, dev)
    b = train(small_config(lam=0.0), fresh_model(tr), FS, tr, dev)
    assert a.mm_samples == 0
    assert a.model.params.tobytes() == b.model.params.tobytes()


def test_reproducible_runs():
    tr, dev = small_task(seed=1), small_task(size=10, seed=2)
    cfg = small_config(lam=0.5, strategy="jackknife")
    a = train(cfg, fresh_model(tr), FS, tr, dev)
    b = train(cfg, fresh_model(tr), FS, tr, dev)
    assert a.model.params.tobytes() == b.model.params.tobytes()
    assert [r.to_dict() for r in a.metrics] == [r.to_dict() for r in b.metrics]
    c = train(TrainConfig(**{**cfg.__dict__, "seed": 1}), fresh_model(tr), FS, tr, dev)
    assert c.model.params.tobytes() != a.model.params.tobytes()


def test_alternation_schedule_and_sample_counter():
    tr, dev = small_task(seed=1), small_task(size=10, seed=2)
    cfg = small_config(mode="alternation", ce_steps=2, mm_steps=1, warmup_steps=0, max_steps=6, eval_every=1,
                       strategy="simplistic", J=2, K=3, batch_size=4)
    res = train(cfg, fresh_model(tr), FS, tr, dev)
    mm = [r for r in res.metrics if r.phase == "mm"]
    assert [r.update for r in mm] == ["start", "ce", "ce", "mm", "ce", "ce", "mm"]
    assert [r.mm_samples for r in mm] == [0, 0, 0, 20, 20, 20, 40]
    assert [r.step for r in mm] == list(range(7))


def test_metrics_invariants_and_best_checkpoint():
    tr, dev = small_task(seed=1), small_task(size=10, seed=2)
    res = train(small_config(lam=1.0, eval_every=3), fresh_model(tr), FS, tr, dev)
    steps = [r.step for r in res.metrics]
    assert steps == sorted(steps)
    assert all(r.mm_loss_dev >= 0 for r in res.metrics)
    mm = [r for r in res.metrics if r.phase == "mm"]
    assert mm[0].update == "start" and mm[0] is res.phase_start
    assert mm[-1].step == 30  # the final step is always evaluated
    assert res.best.mm_loss_dev == min(r.mm_loss_dev for r in mm)
    first_best = next(r for r in mm if r.mm_loss_dev == res.best.mm_loss_dev)
    assert res.best.step == first_best.step
    assert dev_mm_loss(res.best.model, FS, dev.examples, 4, 0) == res.best.mm_loss_dev
    assert all(r.phase == "warmup" for r in res.metrics if r.step < 10)


def test_best_value_non_increasing_over_evaluations():
    tr, dev = small_task(seed=1), small_task(size=10, seed=2)
    seen = []

    def on_eval(rec, model):
        if rec.phase == "mm":
            seen.append(rec.mm_loss_dev)

    train(small_config(eval_every=2), fresh_model(tr), FS, tr, dev, on_eval=on_eval)
    running = np.minimum.accumulate(seen)
    assert np.all(np.diff(running) <= 0)


def test_metrics_record_excludes_wall_time_by_default():
    rec = MetricsRecord(1, "mm", "interpolation", 1.0, 0.5, [0.1], 0.0, 5, wall_time=2.5)
    assert "wall_time" not in rec.to_dict()
    assert rec.to_dict(with_time=True)["wall_time"] == 2.5


@pytest.mark.parametrize("seed", range(10))
def test_pure_exact_mm_descends_single_instance(seed):
    model = random_model(seed, n_src=2, n_tgt=3, max_len=3)
    fs = FeatureSet([LengthRatioFeature(1.0), TargetLengthFeature()])
    corpus = [((1, 2), ((1,),))]
    losses = []

    def on_eval(rec, m):
        losses.append(mm_loss_exact(m, fs, corpus))

    cfg = TrainConfig(mode="alternation", ce_steps=0, mm_steps=1, strategy="exact", warmup_steps=0, max_steps=15,
                      batch_size=1, learning_rate=1e-2, eval_every=1, dev_samples=1, seed=seed)
    train(cfg, model, fs, corpus, corpus, on_eval=on_eval)
    assert np.all(np.diff(losses) <= 1e-15)


class FailsOn:
    dim = 1

    def __init__(self, bad_x):
        self.bad_x = bad_x

    def __call__(self, x, y):
        if x == self.bad_x:
            raise ValueError("boom")
        return [float(len(y))]


def test_estimator_errors_carry_step_context():
    model = random_model(0)
    train_ex = [((2,), ((1,),))]
    dev_ex = [((1,), ((1,),))]
    cfg = TrainConfig(warmup_steps=2, max_steps=3, batch_size=1, eval_every=1, dev_samples=1, J=2)
    with pytest.raises(RuntimeError, match="step 3"):
        train(cfg, model, FeatureSet([FailsOn((2,))]), train_ex, dev_ex)


def test_empty_corpora_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(), random_model(0), FS, [], [((1,), ((1,),))])


@given(st.integers(0, 50))
def test_mm_training_lowers_exact_loss_on_tiny_task(seed):
    """A handful of exact MM steps reduce the exact loss of a single-instance task."""
    model = random_model(seed)
    fs = FeatureSet([TargetLengthFeature()])
    corpus = [((1,), ((1,),))]
    cfg = TrainConfig(mode="alternation", ce_steps=0, mm_steps=1, strategy="exact", warmup_steps=0, max_steps=5,
                      batch_size=1, learning_rate=1e-2, eval_every=5, dev_samples=1, seed=seed)
    res = train(cfg, model, fs, corpus, corpus)
    before, after = mm_loss_exact(model, fs, corpus), mm_loss_exact(res.model, fs, corpus)
    assert after <= before
