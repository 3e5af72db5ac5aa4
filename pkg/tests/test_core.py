import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax as sp_log_softmax
from scipy.special import softmax as sp_softmax
from scipy.stats import entropy

from apodistill.core import (
    Categorical,
    ContextId,
    CotStream,
    MultiStreamState,
    TrajectoryState,
    Vocab,
    joint_state_log_prob,
    kl_divergence,
    log_softmax,
    sequence_log_prob,
    softmax,
    total_variation,
)
from apodistill.errors import AbsoluteContinuityViolation, PredictiveMismatch, ZeroProbabilityToken

from conftest import make_policy, simplex


def test_vocab_layout():
    v = Vocab.build(["a", "b"])
    assert v.symbols == ("a", "b", "<sep>", "<eos>")
    assert (v.sep_id, v.eos_id, v.size) == (2, 3, 4)
    assert Vocab.from_dict(v.to_dict()) == v


@pytest.mark.parametrize("symbols", [("a",), ("a", "a", "<sep>", "<eos>"), ("a", "b")])
def test_vocab_rejects_bad_symbols(symbols):
    with pytest.raises(ValueError):
        Vocab(symbols)


def test_context_id_needs_tokens():
    with pytest.raises(ValueError):
        ContextId(())
    assert ContextId((1, 2)).render() == [1, 2]


@pytest.mark.parametrize("probs", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []])
def test_categorical_validation(probs):
    with pytest.raises(ValueError):
        Categorical(probs)


def test_categorical_is_read_only():
    c = Categorical([0.25, 0.75])
    with pytest.raises(ValueError):
        c.probs[0] = 1.0


def test_argmax_lowest_index_on_ties():
    assert Categorical([0.2, 0.4, 0.4]).argmax() == 1
    assert Categorical.uniform(5).argmax() == 0


def test_log_prob_zero_raises():
    c = Categorical([1.0, 0.0])
    assert c.log_prob(0) == 0.0
    with pytest.raises(ZeroProbabilityToken):
        c.log_prob(1)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(0.1, 5.0))
def test_softmax_matches_scipy(logits, temp):
    x = np.array(logits) / temp
    np.testing.assert_allclose(softmax(x), sp_softmax(x), rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(log_softmax(x), sp_log_softmax(x), rtol=1e-12, atol=1e-12)
    assert Categorical.from_logits(logits, temp).allclose(Categorical(sp_softmax(x)), 1e-12)


@given(simplex(4), simplex(4))
def test_kl_matches_scipy_and_is_nonnegative(p, q):
    kl = kl_divergence(Categorical(p), Categorical(q))
    assert kl == pytest.approx(entropy(p, q), rel=1e-10, abs=1e-14)
    assert kl >= 0.0


@given(simplex(5))
def test_kl_self_is_zero(p):
    assert kl_divergence(Categorical(p), Categorical(p)) == 0.0


def test_kl_zero_mass_conventions():
    p = Categorical([0.5, 0.5, 0.0])
    q = Categorical([0.25, 0.25, 0.5])
    assert kl_divergence(p, q) == pytest.approx(math.log(2))
    with pytest.raises(AbsoluteContinuityViolation):
        kl_divergence(q, p)


def test_total_variation():
    assert total_variation([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert total_variation(Categorical([0.5, 0.5]), Categorical([0.8, 0.2])) == pytest.approx(0.3)


@pytest.mark.parametrize("order", [0, 1, 2])
def test_sequence_probabilities_normalize(order):
    # sum over every length-L sequence of pi(seq) must be 1 (chain rule)
    pol = make_policy(n_content=2, order=order, seed=order)
    ctx = pol.contexts[1]
    V = pol.vocab.size
    for L in (1, 2, 3):
        total = sum(math.exp(sequence_log_prob(pol, ctx, seq)) for seq in itertools.product(range(V), repeat=L))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_sequence_log_prob_is_product_of_rows():
    pol = make_policy(seed=3)
    ctx, seq = pol.contexts[0], (0, 2, 1, 4)
    direct = 1.0
    for j, t in enumerate(seq):
        direct *= sp_softmax(pol.logits[0, pol.row_index(seq[:j])])[t]
    assert sequence_log_prob(pol, ctx, seq) == pytest.approx(math.log(direct), rel=1e-12)


def test_sequence_log_prob_zero_and_range():
    pol = make_policy(seed=1)
    logits = np.array(pol.logits)
    logits[0, :, 1] = -np.inf
    dead = pol.with_logits(logits)
    with pytest.raises(ZeroProbabilityToken):
        sequence_log_prob(dead, pol.contexts[0], [0, 1])
    with pytest.raises(ValueError):
        sequence_log_prob(pol, pol.contexts[0], [99])
    with pytest.raises(ValueError):
        sequence_log_prob(pol, pol.contexts[0], [])


def test_joint_state_log_prob_factorizes():
    pols = [make_policy(seed=s) for s in range(3)]
    ctx = pols[0].contexts[0]
    prefixes = [(0, 1), (), (2,)]
    state = MultiStreamState(tuple(TrajectoryState(p, pol.predictive(ctx, p)) for p, pol in zip(prefixes, pols)))
    expected = sequence_log_prob(pols[0], ctx, prefixes[0]) + 0.0 + sequence_log_prob(pols[2], ctx, prefixes[2])
    assert joint_state_log_prob(state, pols, ctx) == pytest.approx(expected, rel=1e-12)


def test_joint_state_log_prob_predictive_mismatch():
    pols = [make_policy(seed=s) for s in range(2)]
    ctx = pols[0].contexts[0]
    wrong = TrajectoryState((0,), pols[1].predictive(ctx, (0,)))
    state = MultiStreamState((wrong, TrajectoryState((), pols[1].predictive(ctx, ()))))
    with pytest.raises(PredictiveMismatch):
        joint_state_log_prob(state, pols, ctx)


def test_cot_stream_invariants():
    pol = make_policy(seed=2)
    ctx = pol.contexts[0]
    toks = (0, 1)
    states = tuple(TrajectoryState(toks[:j], pol.predictive(ctx, toks[:j])) for j in range(2))
    assert len(CotStream(ctx, states, toks)) == 2
    with pytest.raises(ValueError):
        CotStream(ctx, states[::-1])
    with pytest.raises(ValueError):
        CotStream(ctx, states, (1, 1))
    dead = TrajectoryState((), Categorical([1.0, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        CotStream(ctx, (dead, TrajectoryState((3,), dead.predictive)))


def test_multistream_requires_shared_vocab():
    a = TrajectoryState((), Categorical([0.5, 0.5]))
    b = TrajectoryState((), Categorical([0.2, 0.3, 0.5]))
    with pytest.raises(ValueError):
        MultiStreamState((a, b))
    with pytest.raises(ValueError):
        MultiStreamState(())


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_sequence_log_prob_nonpositive(seed):
    pol = make_policy(seed=seed % 1000)
    rng = np.random.default_rng(seed)
    seq = rng.integers(0, pol.vocab.size, size=rng.integers(1, 6))
    assert sequence_log_prob(pol, pol.contexts[0], seq) <= 0.0
