"""Supervised pre-distillation toward the teachers' KL barycenter, and
self-distillation conditioned on concatenated teacher trajectories.

The barycenter of forward-KL divergences sum_u w_u KL(p_u || q) is the
weighted arithmetic mean of the p_u, so the SPD target at every alignment
point has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core import PROB_FLOOR, Categorical, ContextId, kl_divergence, log_softmax, softmax
from .errors import ContextOverflow, EmptyAlignmentSet, UnknownContext
from .io import TrajectoryRecord
from .teachers import TabularPolicy, TeacherEnsemble, sample_batch

DEFAULT_CONTEXT_CAP = 64


@dataclass(frozen=True)
class PredictiveSet:
    per_teacher: tuple[Categorical, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_teacher", tuple(self.per_teacher))
        if not self.per_teacher:
            raise ValueError("need at least one teacher predictive")
        if len({len(p) for p in self.per_teacher}) != 1:
            raise ValueError("predictives must share one vocabulary")

    def __len__(self):
        return len(self.per_teacher)


@dataclass(frozen=True, eq=False)
class StudentPolicy(TabularPolicy):
    """Trainable tabular policy; ``reference=True`` marks a frozen pi_st copy."""

    reference: bool = False

    @classmethod
    def init(cls, vocab, contexts, order: int = 2, temperature: float = 1.0) -> "StudentPolicy":
        V = vocab.size
        return cls(vocab, tuple(contexts), np.zeros((len(contexts), V**order, V)), order, temperature)

    def snapshot(self) -> "StudentPolicy":
        return replace(self, logits=self.logits.copy(), reference=True)

    def with_logits(self, logits) -> "StudentPolicy":
        if self.reference:
            raise TypeError("reference policies are immutable")
        return replace(self, logits=logits)


def barycenter(zset: PredictiveSet, weights: Sequence[float] | None = None) -> Categorical:
    P = np.stack([p.probs for p in zset.per_teacher])
    if weights is None:
        w = np.full(len(zset), 1.0 / len(zset))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(zset),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be N non-negative reals summing to 1")
    q = w @ P
    return Categorical(q / q.sum())


def barycenter_objective(zset: PredictiveSet, q: Categorical, weights=None) -> float:
    w = np.full(len(zset), 1.0 / len(zset)) if weights is None else np.asarray(weights, dtype=float)
    return float(sum(wu * kl_divergence(p, q) for wu, p in zip(w, zset.per_teacher)))


# alignment points


@dataclass(frozen=True)
class AlignmentPoint:
    context: ContextId
    prefix: tuple[int, ...]
    zset: PredictiveSet


TeacherSource = TeacherEnsemble | Sequence[TabularPolicy]


def _teachers_at(teachers: TeacherSource) -> Callable[[int], list[TabularPolicy]]:
    if isinstance(teachers, TeacherEnsemble):
        cache: dict = {}

        def at(step: int):
            key = tuple(teachers.schedule.state_key(u, step) for u in range(len(teachers)))
            if key not in cache:
                cache[key] = teachers.at(step)
            return cache[key]

        return at
    fixed = list(teachers)
    return lambda step: fixed


def alignment_points(corpus: Sequence[TrajectoryRecord], teachers: TeacherSource) -> list[AlignmentPoint]:
    """(context, prefix) pairs harvested from every record, with all teachers'
    predictives at that prefix (teachers taken at the record's corpus step)."""
    at = _teachers_at(teachers)
    points = []
    for r in corpus:
        pols = at(r.corpus_step)
        try:
            cis = [p.context_index(r.context) for p in pols]
        except UnknownContext:
            continue
        for j in range(len(r.tokens)):
            prefix = r.tokens[:j]
            zs = PredictiveSet(tuple(Categorical(p.table[ci, p.row_index(prefix)]) for p, ci in zip(pols, cis)))
            points.append(AlignmentPoint(r.context, prefix, zs))
    return points


class SpdObjective:
    """Mean over alignment points of KL(barycenter || student row).

    Points are aggregated per student row: the loss only needs each row's
    visit count and summed target, so evaluation is O(table size).
    """

    def __init__(self, student: TabularPolicy, counts: np.ndarray, targets: np.ndarray, entropy_term: float, n: int):
        self.shape = student.logits.shape
        self.temperature = student.temperature
        self.counts = counts  # (C, R)
        self.targets = targets  # (C, R, V) summed barycenters
        self.entropy_term = entropy_term  # sum over points of sum b log b
        self.n = n

    @classmethod
    def from_points(cls, student: TabularPolicy, points: Sequence, weights=None) -> "SpdObjective":
        counts = np.zeros(student.logits.shape[:2])
        targets = np.zeros(student.logits.shape)
        neg_ent = 0.0
        n = 0
        for pt in points:
            if isinstance(pt, AlignmentPoint):
                ctx, prefix, zset = pt.context, pt.prefix, pt.zset
            else:
                ctx, prefix, zset = pt
            b = barycenter(zset, weights).probs
            ci, ri = student.context_index(ctx), student.row_index(prefix)
            counts[ci, ri] += 1
            targets[ci, ri] += b
            nz = b > PROB_FLOOR
            neg_ent += float(np.sum(b[nz] * np.log(b[nz])))
            n += 1
        if n == 0:
            raise EmptyAlignmentSet("no alignment points")
        return cls(student, counts, targets, neg_ent, n)

    @classmethod
    def from_corpus(cls, student: TabularPolicy, corpus: Sequence[TrajectoryRecord], teachers: TeacherSource) -> "SpdObjective":
        """Same objective as ``from_points(student, alignment_points(corpus,
        teachers))`` with uniform weights, built from index arrays instead
        of per-point distribution objects."""
        at = _teachers_at(teachers)
        batches: dict[int, tuple[list, list]] = {}
        for r in corpus:
            if r.context not in student._ctx_index:
                continue
            pols = at(r.corpus_step)
            if any(r.context not in p._ctx_index for p in pols):
                continue
            batches.setdefault(id(pols), (pols, []))[1].append(r)
        counts = np.zeros(student.logits.shape[:2])
        targets = np.zeros(student.logits.shape)
        neg_ent, n = 0.0, 0
        for pols, recs in batches.values():
            s_ci, s_ri = _walk(student, recs)
            bary = np.zeros((s_ci.size, student.vocab.size))
            for p in pols:
                ci, ri = _walk(p, recs)
                bary += p.table[ci, ri]
            bary /= len(pols)
            np.add.at(counts, (s_ci, s_ri), 1.0)
            np.add.at(targets, (s_ci, s_ri), bary)
            safe = np.where(bary > PROB_FLOOR, bary, 1.0)
            neg_ent += float(np.sum(bary * np.log(safe)))
            n += s_ci.size
        if n == 0:
            raise EmptyAlignmentSet("no alignment points shared by student and teachers")
        return cls(student, counts, targets, neg_ent, n)

    def loss(self, logits: np.ndarray) -> float:
        logq = log_softmax(logits / self.temperature)
        cross = float(np.sum(self.targets * logq))
        return max(0.0, (self.entropy_term - cross) / self.n)

    def grad(self, logits: np.ndarray) -> np.ndarray:
        q = softmax(logits / self.temperature)
        return (self.counts[..., None] * q - self.targets) / (self.n * self.temperature)


def _walk(policy: TabularPolicy, records: Sequence[TrajectoryRecord]) -> tuple[np.ndarray, np.ndarray]:
    """(context index, row index) of every prefix of every record."""
    V, k = policy.vocab.size, policy.order
    mod = V ** max(k - 1, 0)
    start = 0
    for t in policy.start_history:
        start = start * V + t
    cis, ris = [], []
    for r in records:
        ci = policy.context_index(r.context)
        row = start
        for t in r.tokens:
            cis.append(ci)
            ris.append(row)
            if k:
                row = (row % mod) * V + t
    return np.array(cis, dtype=np.int64), np.array(ris, dtype=np.int64)


def spd_loss(student: TabularPolicy, batch: Sequence) -> float:
    """Mean of KL(barycenter(Z) || q_student(context, prefix)) over the batch.

    Batch items are ``(context, prefix, PredictiveSet)`` triples or
    :class:`AlignmentPoint`.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    for pt in batch:
        ctx, prefix, zset = (pt.context, pt.prefix, pt.zset) if isinstance(pt, AlignmentPoint) else pt
        total += kl_divergence(barycenter(zset), student.predictive(ctx, prefix))
    return total / len(batch)


def spd_grad(student: TabularPolicy, batch: Sequence) -> np.ndarray:
    obj = SpdObjective.from_points(student, batch)
    return obj.grad(student.logits)


class SequenceCEObjective(SpdObjective):
    """Cross-entropy on the realized teacher tokens (comparison mode)."""

    @classmethod
    def from_corpus(cls, student: TabularPolicy, corpus: Sequence[TrajectoryRecord]) -> "SequenceCEObjective":
        counts = np.zeros(student.logits.shape[:2])
        targets = np.zeros(student.logits.shape)
        n = 0
        for r in corpus:
            try:
                ci = student.context_index(r.context)
            except UnknownContext:
                continue
            for j, t in enumerate(r.tokens):
                ri = student.row_index(r.tokens[:j])
                counts[ci, ri] += 1
                targets[ci, ri, t] += 1
                n += 1
        if n == 0:
            raise EmptyAlignmentSet("no usable tokens in corpus")
        return cls(student, counts, targets, 0.0, n)

    def loss(self, logits):
        return float(-np.sum(self.targets * log_softmax(logits / self.temperature)) / self.n)


def descend(
    objective: SpdObjective,
    logits: np.ndarray,
    steps: int,
    lr: float,
    momentum: float = 0.0,
    precondition: bool = True,
    callback: Callable[[int, float], None] | None = None,
) -> np.ndarray:
    """Full-batch gradient descent; with ``precondition`` each row's gradient
    is divided by that row's share of the alignment points."""
    theta = np.array(logits, dtype=float)
    scale = 1.0
    if precondition:
        share = objective.counts / objective.n
        scale = np.where(share > 0, 1.0 / np.maximum(share, 1e-300), 0.0)[..., None]
    velocity = np.zeros_like(theta)
    for i in range(steps):
        g = objective.grad(theta) * scale
        velocity = momentum * velocity - lr * g
        theta = theta + velocity
        if callback is not None:
            callback(i, objective.loss(theta))
    return theta


def train_spd(
    student: StudentPolicy,
    corpus: Sequence[TrajectoryRecord],
    teachers: TeacherSource,
    epochs: int,
    lr: float = 0.1,
    seed: int = 0,
    momentum: float = 0.0,
    mode: str = "barycenter",
    subsample: float = 1.0,
    precondition: bool = True,
    history: list | None = None,
) -> tuple[StudentPolicy, StudentPolicy]:
    """Train the student and return ``(trained, frozen reference copy)``.

    ``subsample`` keeps a uniform random fraction of the corpus (drawn with
    ``seed``).  ``mode="sequence_ce"`` fits the realized teacher tokens
    instead of the barycenter.
    """
    if not corpus:
        raise EmptyAlignmentSet("corpus is empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return student, student.snapshot()
    corpus = list(corpus)
    if subsample < 1.0:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(corpus), size=max(1, round(subsample * len(corpus))), replace=False))
        corpus = [corpus[i] for i in keep]
    if mode == "barycenter":
        objective: SpdObjective = SpdObjective.from_corpus(student, corpus, teachers)
    elif mode == "sequence_ce":
        objective = SequenceCEObjective.from_corpus(student, corpus)
    else:
        raise ValueError(f"unknown SPD mode {mode!r}")
    if history is not None:
        history.append(objective.loss(student.logits))
    cb = (lambda i, loss: history.append(loss)) if history is not None else None
    theta = descend(objective, student.logits, epochs, lr, momentum, precondition, cb)
    trained = student.with_logits(theta)
    return trained, trained.snapshot()


# self-distillation


def encode_conditioning(vocab, context: ContextId, trajectories: Sequence[Sequence[int]], cap: int = DEFAULT_CONTEXT_CAP):
    """SEP-joined teacher trajectories (ascending teacher order), each followed
    by SEP, left-truncated so context plus history fits in ``cap`` tokens."""
    if not trajectories:
        raise ValueError("need at least one teacher trajectory")
    room = cap - len(context)
    if room < 1:
        raise ContextOverflow(f"context of {len(context)} tokens leaves no room under cap {cap}")
    sep = vocab.sep_id
    history: list[int] = []
    for t in trajectories:
        history.extend(int(x) for x in t)
        history.append(sep)
    return tuple(history[-room:])


def self_distill(
    reference: TabularPolicy,
    context: ContextId,
    teacher_trajectories: Sequence[Sequence[int]],
    max_len: int,
    seed: int,
    cap: int = DEFAULT_CONTEXT_CAP,
    greedy: bool = False,
) -> tuple[int, ...]:
    """Sample t+ from the reference conditioned on the encoded trajectories."""
    history = encode_conditioning(reference.vocab, context, teacher_trajectories, cap)
    ci = reference.context_index(context)
    rng = np.random.default_rng(seed)
    (tokens,), _ = sample_batch(reference, np.array([ci]), max_len, rng, history=history, greedy=greedy)
    return tokens
