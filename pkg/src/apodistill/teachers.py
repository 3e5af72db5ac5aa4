"""Synthetic drifting teachers: order-k tabular softmax policies.

A policy keeps one logit row per ``(context, last k tokens)``.  A fresh
trajectory's history is the boundary marker (..., EOS, SEP), i.e. the same
tail that a SEP-joined sequence of EOS-terminated trajectories ends with.
For k <= 2 this makes a policy's first-step row identical to its row after
such a conditioning sequence.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .core import PROB_FLOOR, Categorical, ContextId, CotStream, TrajectoryState, Vocab, log_softmax, softmax
from .errors import UnknownContext, UnknownTeacherIndex
from .io import TrajectoryRecord


def boundary(vocab: Vocab, order: int) -> tuple[int, ...]:
    """History tokens preceding the first step of a fresh trajectory."""
    if order == 0:
        return ()
    tail = (vocab.eos_id, vocab.sep_id)
    if order <= 2:
        return tail[-order:]
    return (vocab.sep_id,) * (order - 2) + tail


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    vocab: Vocab
    contexts: tuple[ContextId, ...]
    logits: np.ndarray
    order: int = 2
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(self.contexts))
        logits = np.array(self.logits, dtype=float)
        V = self.vocab.size
        expected = (len(self.contexts), V**self.order, V)
        if logits.shape != expected:
            raise ValueError(f"logit table has shape {logits.shape}, expected {expected}")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if np.any(np.isnan(logits)) or np.any(logits == np.inf):
            raise ValueError("logits must not contain NaN or +inf")
        if len(set(self.contexts)) != len(self.contexts):
            raise ValueError("duplicate contexts")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @classmethod
    def uniform(cls, vocab: Vocab, contexts: Sequence[ContextId], order: int = 2, temperature: float = 1.0):
        V = vocab.size
        return cls(vocab, tuple(contexts), np.zeros((len(contexts), V**order, V)), order, temperature)

    @classmethod
    def random(cls, vocab, contexts, order=2, rng=None, scale=1.0, temperature=1.0):
        rng = np.random.default_rng(rng)
        V = vocab.size
        logits = rng.normal(0.0, scale, size=(len(contexts), V**order, V))
        return cls(vocab, tuple(contexts), logits, order, temperature)

    def with_logits(self, logits) -> "TabularPolicy":
        return replace(self, logits=logits)

    # lookup

    @cached_property
    def _ctx_index(self) -> dict[ContextId, int]:
        return {c: i for i, c in enumerate(self.contexts)}

    @cached_property
    def table(self) -> np.ndarray:
        """Row probabilities, shape (contexts, V**k, V)."""
        p = softmax(self.logits / self.temperature)
        p.setflags(write=False)
        return p

    @cached_property
    def log_table(self) -> np.ndarray:
        lp = log_softmax(self.logits / self.temperature)
        lp.setflags(write=False)
        return lp

    @cached_property
    def start_history(self) -> tuple[int, ...]:
        return boundary(self.vocab, self.order)

    def context_index(self, context: ContextId) -> int:
        try:
            return self._ctx_index[context]
        except KeyError:
            raise UnknownContext(f"context {context.tokens} unknown to policy") from None

    def row_index(self, prefix: Sequence[int] = (), history: Sequence[int] = ()) -> int:
        k = self.order
        if k == 0:
            return 0
        seq = tuple(history) + tuple(prefix)
        if len(seq) < k:
            seq = self.start_history + seq
        key = seq[-k:]
        V = self.vocab.size
        idx = 0
        for t in key:
            idx = idx * V + int(t)
        return idx

    def probs(self, context: ContextId, prefix: Sequence[int] = (), history: Sequence[int] = ()) -> np.ndarray:
        return self.table[self.context_index(context), self.row_index(prefix, history)]

    def predictive(self, context: ContextId, prefix: Sequence[int] = (), history: Sequence[int] = ()) -> Categorical:
        return Categorical(self.probs(context, prefix, history))


def _pad_history(policy: TabularPolicy, history: Sequence[int]) -> tuple[int, ...]:
    k = policy.order
    h = tuple(int(t) for t in history)
    if len(h) < k:
        h = (policy.start_history + h)[-k:] if k else ()
    return h[-k:] if k else ()


def sample_batch(
    policy: TabularPolicy,
    context_idx: np.ndarray,
    max_len: int,
    rng: np.random.Generator,
    history: Sequence[int] = (),
    greedy: bool = False,
) -> tuple[list[tuple[int, ...]], list[tuple[float, ...]]]:
    """Sample one trajectory per entry of ``context_idx`` in lockstep.

    Trajectories stop after emitting EOS or at ``max_len`` tokens.  Returns
    token tuples and the matching per-step log-probabilities.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = np.asarray(context_idx, dtype=np.int64)
    B = ctx.size
    V, k = policy.vocab.size, policy.order
    eos = policy.vocab.eos_id
    h0 = _pad_history(policy, history)
    row = np.zeros(B, dtype=np.int64)
    for t in h0:
        row = row * V + t
    mod = V ** max(k - 1, 0)
    table, log_table = policy.table, policy.log_table
    tokens = np.full((B, max_len), -1, dtype=np.int64)
    logps = np.zeros((B, max_len))
    alive = np.ones(B, dtype=bool)
    for j in range(max_len):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        p = table[ctx[idx], row[idx]]
        if greedy:
            tok = np.argmax(p, axis=1)
        else:
            cum = np.cumsum(p, axis=1)
            cum[:, -1] = 1.0
            u = rng.random(idx.size)
            tok = (cum <= u[:, None]).sum(axis=1)
            # guard against rounding onto a zero-probability token
            bad = p[np.arange(idx.size), tok] <= PROB_FLOOR
            if np.any(bad):
                tok[bad] = np.argmax(p[bad] > PROB_FLOOR, axis=1)
        tokens[idx, j] = tok
        logps[idx, j] = log_table[ctx[idx], row[idx], tok]
        if k > 0:
            row[idx] = (row[idx] % mod) * V + tok if k > 1 else tok
        alive[idx[tok == eos]] = False
    out_t, out_l = [], []
    for b in range(B):
        n = int((tokens[b] >= 0).sum())
        out_t.append(tuple(int(x) for x in tokens[b, :n]))
        out_l.append(tuple(float(x) for x in logps[b, :n]))
    return out_t, out_l


def sample_trajectory(
    teacher: TabularPolicy,
    context: ContextId,
    max_len: int,
    seed: int,
    history: Sequence[int] = (),
) -> CotStream:
    rng = np.random.default_rng(seed)
    ci = teacher.context_index(context)
    (tokens,), _ = sample_batch(teacher, np.array([ci]), max_len, rng, history)
    states = [TrajectoryState(tokens[:j], teacher.predictive(context, tokens[:j], history)) for j in range(len(tokens))]
    return CotStream(context=context, states=tuple(states), tokens=tokens)


# drift


@dataclass(frozen=True, eq=False)
class DriftEvent:
    """Logit perturbation of one teacher.

    ``mode='add'`` adds ``delta`` to the logit table; ``mode='replace'``
    overwrites the rows selected by ``mask`` with ``delta``.  ``span=0`` is a
    sudden event; ``span>0`` interpolates linearly over ``span`` steps.
    """

    step: int
    teacher: int
    delta: np.ndarray
    mode: str = "add"
    span: int = 0
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("add", "replace"):
            raise ValueError(f"unknown drift mode {self.mode!r}")
        if self.span < 0:
            raise ValueError("span must be non-negative")
        if self.step < 0:
            raise ValueError("event step must be non-negative")
        d = np.array(self.delta, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)
        if self.mask is not None:
            m = np.array(self.mask, dtype=bool)
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    @property
    def kind(self) -> str:
        return "gradual" if self.span > 0 else "sudden"

    def fraction(self, step: int) -> float:
        if step < self.step:
            return 0.0
        if self.span == 0:
            return 1.0
        return min(1.0, (step - self.step) / self.span)

    def apply(self, logits: np.ndarray, frac: float) -> np.ndarray:
        if frac == 0.0:
            return logits
        if self.mode == "add":
            return logits + frac * self.delta
        out = logits.copy()
        mask = self.mask if self.mask is not None else np.ones(logits.shape[:2], dtype=bool)
        out[mask] = logits[mask] + frac * (self.delta[mask] - logits[mask])
        return out


@dataclass(frozen=True)
class DriftSchedule:
    events: tuple[DriftEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        steps = [e.step for e in self.events]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("drift event steps must be strictly increasing")

    def for_teacher(self, u: int) -> tuple[DriftEvent, ...]:
        return tuple(e for e in self.events if e.teacher == u)

    def state_key(self, u: int, step: int) -> tuple[float, ...]:
        return tuple(e.fraction(step) for e in self.for_teacher(u))


@dataclass(frozen=True)
class TeacherEnsemble:
    teachers: tuple[TabularPolicy, ...]
    schedule: DriftSchedule = field(default_factory=DriftSchedule)
    seed: int = 0
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "teachers", tuple(self.teachers))
        if len(self.teachers) < 1:
            raise ValueError("ensemble needs at least one teacher")
        vocabs = {t.vocab for t in self.teachers}
        if len(vocabs) != 1:
            raise ValueError("all teachers must share one vocabulary")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"T{u}" for u in range(len(self.teachers))))
        if len(self.names) != len(self.teachers):
            raise ValueError("one name per teacher")
        for e in self.schedule.events:
            if not 0 <= e.teacher < len(self.teachers):
                raise UnknownTeacherIndex(f"drift event targets teacher {e.teacher}, ensemble has {len(self.teachers)}")

    def __len__(self):
        return len(self.teachers)

    @property
    def vocab(self) -> Vocab:
        return self.teachers[0].vocab

    def teacher_at(self, u: int, step: int) -> TabularPolicy:
        events = self.schedule.for_teacher(u)
        base = self.teachers[u]
        fracs = [e.fraction(step) for e in events]
        if not any(fracs):
            return base
        logits = base.logits
        for e, f in zip(events, fracs):
            logits = e.apply(logits, f)
        return base.with_logits(logits)

    def at(self, step: int) -> list[TabularPolicy]:
        return [self.teacher_at(u, step) for u in range(len(self.teachers))]

    def subset(self, indices: Sequence[int]) -> "TeacherEnsemble":
        remap = {u: i for i, u in enumerate(indices)}
        events = tuple(replace(e, teacher=remap[e.teacher]) for e in self.schedule.events if e.teacher in remap)
        return TeacherEnsemble(
            tuple(self.teachers[u] for u in indices), DriftSchedule(events), self.seed, tuple(self.names[u] for u in indices)
        )


def apply_drift(ensemble: TeacherEnsemble, step: int) -> TeacherEnsemble:
    """Ensemble with every event at <= step baked into the teachers.

    Gradual events are applied pro rata; the returned schedule is empty.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    for e in ensemble.schedule.events:
        if not 0 <= e.teacher < len(ensemble.teachers):
            raise UnknownTeacherIndex(f"drift event targets teacher {e.teacher}")
    if not ensemble.schedule.events:
        return ensemble
    return TeacherEnsemble(tuple(ensemble.at(step)), DriftSchedule(), ensemble.seed, ensemble.names)


def generate_corpus(
    ensemble: TeacherEnsemble,
    contexts: Sequence[ContextId],
    per_context: int,
    max_len: int,
    seed: int | None = None,
    threads: int = 1,
) -> list[TrajectoryRecord]:
    """Sample ``per_context`` trajectories from every teacher for each entry of
    ``contexts``; the corpus step (and so the drift state) is the position in
    ``contexts``, which may repeat contexts.

    Records are ordered by (step, teacher, repeat).  Each teacher draws from
    its own seed stream, split into segments over which its drift state is
    constant, so the result is independent of ``threads``.
    """
    if per_context < 1:
        raise ValueError("per_context must be >= 1")
    seed = ensemble.seed if seed is None else seed
    contexts = list(contexts)
    n_steps = len(contexts)

    def run_teacher(u: int):
        teacher = ensemble.teachers[u]
        cidx = np.array([teacher.context_index(c) for c in contexts], dtype=np.int64)
        toks: list = [None] * (n_steps * per_context)
        lps: list = [None] * (n_steps * per_context)
        start = 0
        seg = 0
        while start < n_steps:
            key = ensemble.schedule.state_key(u, start)
            end = start + 1
            while end < n_steps and ensemble.schedule.state_key(u, end) == key:
                end += 1
            policy = ensemble.teacher_at(u, start)
            rng = np.random.default_rng(np.random.SeedSequence([seed, u, seg]))
            batch_ctx = np.repeat(cidx[start:end], per_context)
            t, lp = sample_batch(policy, batch_ctx, max_len, rng)
            toks[start * per_context : end * per_context] = t
            lps[start * per_context : end * per_context] = lp
            start, seg = end, seg + 1
        return toks, lps

    N = len(ensemble.teachers)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_teacher, range(N)))
    else:
        results = [run_teacher(u) for u in range(N)]

    records = []
    for i, ctx in enumerate(contexts):
        for u in range(N):
            toks, lps = results[u]
            for r in range(per_context):
                j = i * per_context + r
                records.append(
                    TrajectoryRecord(
                        id=f"s{i:06d}-{ensemble.names[u]}-r{r}",
                        context=ctx,
                        teacher_id=ensemble.names[u],
                        tokens=toks[j],
                        step_logprobs=lps[j],
                        corpus_step=i,
                    )
                )
    return records
