import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mmseq.seqmodel import TabularModel, Vocabulary

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SATURATION = 30.0


def vocabs(n_src=2, n_tgt=3):
    src = Vocabulary.build([f"s{i}" for i in range(1, n_src + 1)])
    tgt = Vocabulary.build([chr(ord("a") + i) for i in range(n_tgt)])
    return src, tgt


def saturated_model(src, tgt, x, y, max_len=3, gap=SATURATION, context_order=1):
    """Model that puts (almost) all mass on ``y`` given ``x``: +gap on each visited row's emitted token."""
    model = TabularModel.zeros(src, tgt, context_order=context_order, max_len=max_len)
    logits = model.logits.reshape(-1, model.n_next).copy()
    for row, tok in model.steps(x, y):
        assert np.count_nonzero(logits[row]) == 0 or logits[row, tok] == gap, "conflicting rows"
        logits[row, tok] = gap
    return model.with_params(logits.reshape(-1))


def random_model(seed, n_src=2, n_tgt=3, max_len=3, scale=1.0, context_order=1):
    src, tgt = vocabs(n_src, n_tgt)
    return TabularModel.random(src, tgt, np.random.default_rng(seed), scale=scale,
                               context_order=context_order, max_len=max_len)


@st.composite
def model_and_pair(draw, max_len=3):
    """A random small model with a valid source and target."""
    seed = draw(st.integers(0, 2**32 - 1))
    n_tgt = draw(st.integers(1, 3))
    order = draw(st.integers(0, 2))
    model = random_model(seed, 2, n_tgt, max_len=max_len, context_order=order)
    x = tuple(draw(st.lists(st.sampled_from(model.vocab_src.content_ids), min_size=0, max_size=3)))
    y = tuple(draw(st.lists(st.sampled_from(model.vocab_tgt.content_ids), min_size=0, max_size=max_len)))
    return model, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
