import numpy as np
import pytest
from hypothesis import strategies as st

from apodistill.core import ContextId, Vocab
from apodistill.teachers import TabularPolicy


def make_vocab(n_content: int) -> Vocab:
    return Vocab.build([f"w{i}" for i in range(n_content)])


def make_policy(n_content=3, n_contexts=2, order=2, seed=0, scale=1.0, temperature=1.0):
    vocab = make_vocab(n_content)
    contexts = [ContextId((i,)) for i in range(n_contexts)]
    return TabularPolicy.random(vocab, contexts, order, np.random.default_rng(seed), scale, temperature)


@pytest.fixture
def vocab():
    return make_vocab(3)


@pytest.fixture
def policy():
    return make_policy()


def simplex(size: int):
    """Hypothesis strategy for strictly positive probability vectors."""
    return st.lists(st.floats(0.01, 1.0), min_size=size, max_size=size).map(lambda w: np.array(w) / sum(w))


# acceptance lines are collected here and printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
