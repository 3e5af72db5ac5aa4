import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import entropy

from apodistill.core import ContextId
from apodistill.drift import (
    StreamWindow,
    _TeacherPanel,
    detect_drift,
    group_by_teacher,
    jeffreys,
    permutation_threshold,
    stream_divergence,
    unmatched_mass,
)
from apodistill.errors import InsufficientHistory, NoSharedContexts
from apodistill.io import TrajectoryRecord
from apodistill.teachers import DriftEvent, DriftSchedule, TeacherEnsemble, generate_corpus

from conftest import make_policy, simplex


def rec(i, ctx, tokens, teacher="T0", step=0):
    return TrajectoryRecord(f"r{i}", ContextId((ctx,)), teacher, tuple(tokens), corpus_step=step)


def divergence_oracle(a_recs, b_recs, V, lam=0.5):
    """Plain-loop mean Jeffreys divergence over shared contexts."""

    def counts(recs):
        out = {}
        for r in recs:
            c = out.setdefault(r.context, [0.0] * V)
            for t in r.tokens:
                c[t] += 1
        return out

    ca, cb = counts(a_recs), counts(b_recs)
    vals = []
    for ctx in set(ca) & set(cb):
        pa = [(x + lam) / (sum(ca[ctx]) + lam * V) for x in ca[ctx]]
        pb = [(x + lam) / (sum(cb[ctx]) + lam * V) for x in cb[ctx]]
        vals.append(entropy(pa, pb) + entropy(pb, pa))
    return float(np.mean(vals))


@given(simplex(4), simplex(4))
def test_jeffreys_is_symmetric_kl(p, q):
    assert jeffreys(p, q) == pytest.approx(entropy(p, q) + entropy(q, p), rel=1e-9, abs=1e-14)
    assert jeffreys(p, q) == pytest.approx(jeffreys(q, p), rel=1e-12, abs=1e-15)


def test_window_summary_is_smoothed():
    w = StreamWindow("T0", [rec(0, 0, [0, 0, 1])], vocab_size=3)
    np.testing.assert_allclose(w.summary[ContextId((0,))].probs, [2.5 / 4.5, 1.5 / 4.5, 0.5 / 4.5])
    with pytest.raises(ValueError):
        StreamWindow("T0", [], 3)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_stream_divergence_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    V = 4

    def draw(n, off):
        return [rec(off + i, int(rng.integers(3)), rng.integers(0, V, size=rng.integers(1, 5))) for i in range(n)]

    a, b = draw(15, 0), draw(15, 100)
    wa, wb = StreamWindow("T0", a, V), StreamWindow("T0", b, V)
    shared = set(wa.counts) & set(wb.counts)
    if not shared:
        with pytest.raises(NoSharedContexts):
            stream_divergence(wa, wb)
        return
    assert stream_divergence(wa, wb) == pytest.approx(divergence_oracle(a, b, V), rel=1e-10)


def test_no_shared_contexts_and_unmatched_mass():
    a = StreamWindow("T0", [rec(0, 0, [1, 1])], 3)
    b = StreamWindow("T0", [rec(1, 1, [2])], 3)
    with pytest.raises(NoSharedContexts):
        stream_divergence(a, b)
    c = StreamWindow("T0", [rec(2, 0, [0]), rec(3, 1, [1, 2])], 3)
    assert unmatched_mass(a, c) == pytest.approx(2 / 5)


@settings(max_examples=300)
@given(
    st.lists(st.floats(0, 10, allow_nan=False), min_size=100, max_size=300),
    st.floats(0, 10, allow_nan=False),
    st.sampled_from([0.01, 0.05, 0.1, 0.2]),
)
def test_threshold_agrees_with_p_value(null, stat, alpha):
    null = np.array(null)
    p = (1 + np.sum(null >= stat)) / (1 + null.size)
    assert (stat > permutation_threshold(null, alpha)) == (p <= alpha)


def test_panel_statistics_match_window_route():
    # the vectorized permutation route must equal the direct window split
    rng = np.random.default_rng(0)
    V, W = 5, 30
    recs = [rec(i, int(rng.integers(4)), rng.integers(0, V, size=rng.integers(1, 6))) for i in range(2 * W)]
    panel = _TeacherPanel(recs, W, V, 0.5)
    masks = np.zeros((6, 2 * W), dtype=bool)
    masks[0, :W] = True
    for k in range(1, 6):
        masks[k, rng.permutation(2 * W)[:W]] = True
    stats = panel.statistics(masks)
    for m, s in zip(masks, stats):
        a = StreamWindow("T0", [r for r, x in zip(recs, m) if x], V)
        b = StreamWindow("T0", [r for r, x in zip(recs, m) if not x], V)
        assert s == pytest.approx(stream_divergence(a, b), rel=1e-10)


def _ensemble(drift_teacher=None, step=100, scale=3.0):
    pols = tuple(make_policy(n_content=4, n_contexts=3, order=1, seed=s) for s in range(3))
    events = ()
    if drift_teacher is not None:
        d = np.random.default_rng(7).normal(size=pols[0].logits.shape) * scale
        events = (DriftEvent(step, drift_teacher, d),)
    return TeacherEnsemble(pols, DriftSchedule(events), seed=1)


def test_detect_drift_flags_and_attributes():
    ens = _ensemble(drift_teacher=1)
    ctxs = [ens.teachers[0].contexts[i % 3] for i in range(200)]
    hist = group_by_teacher(generate_corpus(ens, ctxs, 1, 6))
    report = detect_drift(hist, 200, 100, ens.vocab.size, permutations=200)
    assert report.flagged_teachers == ["T1"]
    assert report.joint.flagged
    flat = report.flat()
    assert flat["T1_flagged"] == 1 and flat["step"] == 200


def test_detect_drift_stationary_is_quiet_and_deterministic():
    ens = _ensemble()
    ctxs = [ens.teachers[0].contexts[i % 3] for i in range(200)]
    hist = group_by_teacher(generate_corpus(ens, ctxs, 1, 6))
    a = detect_drift(hist, 200, 100, ens.vocab.size, permutations=200, seed=3)
    b = detect_drift(hist, 200, 100, ens.vocab.size, permutations=200, seed=3)
    assert a == b
    assert all(0 < r.p_value <= 1 for r in a.per_teacher)


def test_detect_drift_uses_only_records_before_step():
    ens = _ensemble(drift_teacher=0, step=150)
    ctxs = [ens.teachers[0].contexts[i % 3] for i in range(300)]
    hist = group_by_teacher(generate_corpus(ens, ctxs, 1, 6))
    before = detect_drift(hist, 150, 75, ens.vocab.size, permutations=200)
    assert not before.per_teacher[0].flagged


def test_detect_drift_errors():
    hist = {"T0": [rec(i, 0, [1], step=i) for i in range(10)]}
    with pytest.raises(InsufficientHistory):
        detect_drift(hist, 10, 6, 3)
    with pytest.raises(InsufficientHistory):
        detect_drift({}, 10, 2, 3)
    with pytest.raises(ValueError):
        detect_drift(hist, 10, 2, 3, alpha=1.5)
    with pytest.raises(ValueError):
        detect_drift(hist, 10, 2, 3, permutations=10)
    with pytest.raises(ValueError):
        detect_drift(hist, 10, 2, 3, correction="holm")
