"""Windowed two-sample drift test over teacher trajectory streams.

For each teacher the last ``2W`` records before ``step`` are split into an
older window and a newer window.  The statistic is the mean Jeffreys
(symmetric KL) divergence between the windows' smoothed per-context token
distributions; thresholds come from a permutation test.  The joint
statistic is the sum of per-teacher statistics, the log-domain image of the
product factorization over independent teachers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Categorical, ContextId
from .errors import InsufficientHistory, NoSharedContexts
from .io import TrajectoryRecord

SMOOTHING = 0.5


@dataclass(frozen=True)
class StreamWindow:
    teacher_id: str
    records: tuple[TrajectoryRecord, ...]
    vocab_size: int
    smoothing: float = SMOOTHING
    counts: Mapping[ContextId, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ValueError("window must contain at least one record")
        counts: dict[ContextId, np.ndarray] = {}
        for r in self.records:
            c = counts.setdefault(r.context, np.zeros(self.vocab_size))
            np.add.at(c, np.asarray(r.tokens), 1.0)
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return len(self.records)

    @property
    def summary(self) -> dict[ContextId, Categorical]:
        return {c: Categorical(_smooth(n, self.smoothing)) for c, n in self.counts.items()}


def _smooth(counts: np.ndarray, lam: float) -> np.ndarray:
    return (counts + lam) / (counts.sum(axis=-1, keepdims=True) + lam * counts.shape[-1])


def jeffreys(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Symmetric KL along the last axis; inputs must be strictly positive."""
    return np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)


def stream_divergence(a: StreamWindow, b: StreamWindow) -> float:
    if a.teacher_id != b.teacher_id:
        raise ValueError("windows belong to different teachers")
    if a.vocab_size != b.vocab_size:
        raise ValueError("windows use different vocabularies")
    shared = sorted(set(a.counts) & set(b.counts))
    if not shared:
        raise NoSharedContexts(f"teacher {a.teacher_id}: windows share no contexts")
    pa = _smooth(np.stack([a.counts[c] for c in shared]), a.smoothing)
    pb = _smooth(np.stack([b.counts[c] for c in shared]), b.smoothing)
    return float(np.mean(jeffreys(pa, pb)))


def unmatched_mass(a: StreamWindow, b: StreamWindow) -> float:
    """Share of tokens in contexts seen by only one of the two windows."""
    shared = set(a.counts) & set(b.counts)
    total = sum(float(n.sum()) for w in (a, b) for n in w.counts.values())
    lost = sum(float(n.sum()) for w in (a, b) for c, n in w.counts.items() if c not in shared)
    return lost / total if total else 0.0


@dataclass(frozen=True)
class WindowTest:
    teacher_id: str
    statistic: float
    threshold: float
    flagged: bool
    p_value: float
    unmatched_mass: float = 0.0


@dataclass(frozen=True)
class DriftReport:
    step: int
    per_teacher: tuple[WindowTest, ...]
    joint: WindowTest

    def flat(self) -> dict:
        row = {
            "step": self.step,
            "joint_statistic": self.joint.statistic,
            "joint_threshold": self.joint.threshold,
            "joint_flagged": int(self.joint.flagged),
            "joint_p_value": self.joint.p_value,
        }
        for r in self.per_teacher:
            row[f"{r.teacher_id}_statistic"] = r.statistic
            row[f"{r.teacher_id}_threshold"] = r.threshold
            row[f"{r.teacher_id}_flagged"] = int(r.flagged)
            row[f"{r.teacher_id}_p_value"] = r.p_value
            row[f"{r.teacher_id}_unmatched_mass"] = r.unmatched_mass
        return row

    @property
    def flagged_teachers(self) -> list[str]:
        return [r.teacher_id for r in self.per_teacher if r.flagged]


def permutation_threshold(null_stats: np.ndarray, alpha: float) -> float:
    """Critical value such that ``stat > threshold`` iff the permutation
    p-value (1 + #{null >= stat}) / (1 + P) is at most ``alpha``."""
    P = null_stats.size
    m = math.floor(alpha * (P + 1) + 1e-12) - 1
    if m < 0:
        return math.inf
    ordered = np.sort(null_stats)[::-1]
    return float(ordered[min(m, P - 1)])


def _p_value(stat: float, null_stats: np.ndarray) -> float:
    return (1.0 + float(np.sum(null_stats >= stat))) / (1.0 + null_stats.size)


class _TeacherPanel:
    """2W records of one teacher as a (records x contexts*V) count matrix."""

    def __init__(self, records: Sequence[TrajectoryRecord], window: int, vocab_size: int, smoothing: float):
        self.W, self.V, self.lam = window, vocab_size, smoothing
        ctxs = sorted({r.context for r in records})
        cidx = {c: i for i, c in enumerate(ctxs)}
        self.C = len(ctxs)
        E = np.zeros((len(records), self.C * vocab_size))
        for i, r in enumerate(records):
            base = cidx[r.context] * vocab_size
            np.add.at(E[i], base + np.asarray(r.tokens), 1.0)
        self.E = E
        self.total = E.sum(axis=0)

    def statistics(self, masks: np.ndarray) -> np.ndarray:
        """Statistic for each row of ``masks`` (True = older window)."""
        ca = (masks.astype(float) @ self.E).reshape(-1, self.C, self.V)
        cb = self.total.reshape(1, self.C, self.V) - ca
        na, nb = ca.sum(axis=2), cb.sum(axis=2)
        shared = (na > 0) & (nb > 0)
        pa = (ca + self.lam) / (na[..., None] + self.lam * self.V)
        pb = (cb + self.lam) / (nb[..., None] + self.lam * self.V)
        j = jeffreys(pa, pb) * shared
        n_shared = shared.sum(axis=1)
        return np.where(n_shared > 0, j.sum(axis=1) / np.maximum(n_shared, 1), 0.0)


def detect_drift(
    history: Mapping[str, Sequence[TrajectoryRecord]],
    step: int,
    window: int,
    vocab_size: int,
    alpha: float = 0.05,
    permutations: int = 1000,
    seed: int = 0,
    smoothing: float = SMOOTHING,
    correction: str = "bonferroni",
) -> DriftReport:
    """Per-teacher and joint drift test at ``step``.

    ``history`` maps teacher id to that teacher's records.  Per-teacher flags
    use level ``alpha / N`` under the default Bonferroni correction (so the
    chance of wrongly flagging any stationary teacher stays below ``alpha``);
    ``correction="none"`` tests each teacher at ``alpha``.  The joint flag
    always uses ``alpha``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if permutations < 100:
        raise ValueError("need at least 100 permutations")
    if window < 1:
        raise ValueError("window must be >= 1")
    if correction not in ("bonferroni", "none"):
        raise ValueError(f"unknown correction {correction!r}")
    teacher_ids = list(history)
    if not teacher_ids:
        raise InsufficientHistory("no teachers in history")
    level = alpha / len(teacher_ids) if correction == "bonferroni" else alpha

    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    n = 2 * window
    ranks = np.argsort(rng.random((permutations, n)), axis=1)
    masks = ranks < window

    per_teacher, null_sum, obs_sum = [], np.zeros(permutations), 0.0
    for tid in teacher_ids:
        recs = sorted((r for r in history[tid] if r.corpus_step < step), key=lambda r: r.corpus_step)
        if len(recs) < n:
            raise InsufficientHistory(f"teacher {tid}: {len(recs)} records before step {step}, need {n}")
        recs = recs[-n:]
        a = StreamWindow(tid, recs[:window], vocab_size, smoothing)
        b = StreamWindow(tid, recs[window:], vocab_size, smoothing)
        stat = stream_divergence(a, b)
        panel = _TeacherPanel(recs, window, vocab_size, smoothing)
        null = panel.statistics(masks)
        thr = permutation_threshold(null, level)
        per_teacher.append(WindowTest(tid, stat, thr, stat > thr, _p_value(stat, null), unmatched_mass(a, b)))
        null_sum += null
        obs_sum += stat
    jthr = permutation_threshold(null_sum, alpha)
    joint = WindowTest("joint", obs_sum, jthr, obs_sum > jthr, _p_value(obs_sum, null_sum))
    return DriftReport(step, tuple(per_teacher), joint)


def group_by_teacher(records: Sequence[TrajectoryRecord]) -> dict[str, list[TrajectoryRecord]]:
    out: dict[str, list[TrajectoryRecord]] = {}
    for r in records:
        out.setdefault(r.teacher_id, []).append(r)
    return out
