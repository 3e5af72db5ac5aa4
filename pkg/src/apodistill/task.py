"""Synthetic concept task with complementary drifting teachers.

Contexts are split into K concept groups (context i belongs to group i % K)
and each context has a gold answer token.  Teacher u is accurate on group
u % K; on every other group it moves ``off_group_tv`` of the gold mass onto a
distractor of its own, so its greedy answer there is wrong while the
teachers' average still favours gold.  After the answer a teacher emits
filler tokens in its own style, then EOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ContextId, Vocab
from .errors import VocabMismatch
from .io import atomic_write_text
from .teachers import DriftEvent, DriftSchedule, TabularPolicy, TeacherEnsemble


@dataclass(frozen=True)
class ConceptTask:
    vocab: Vocab
    contexts: tuple[ContextId, ...]
    groups: tuple[tuple[int, ...], ...]  # context indices per group
    gold: tuple[tuple[int, ...], ...]  # gold continuation per context
    n_answers: int

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, ci: int) -> int:
        for g, members in enumerate(self.groups):
            if ci in members:
                return g
        raise KeyError(ci)

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab.to_dict(),
            "n_answers": self.n_answers,
            "groups": [
                {
                    "name": f"g{g}",
                    "index": list(members),
                    "contexts": [self.contexts[i].render() for i in members],
                    "gold": [list(self.gold[i]) for i in members],
                }
                for g, members in enumerate(self.groups)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptTask":
        slots: dict[int, tuple] = {}
        groups = []
        for grp in d["groups"]:
            # without explicit indices, contexts are numbered in file order
            index = grp.get("index") or range(len(slots), len(slots) + len(grp["contexts"]))
            for i, c, g in zip(index, grp["contexts"], grp["gold"]):
                slots[int(i)] = (ContextId(tuple(c)), tuple(g))
            groups.append(tuple(int(i) for i in index))
        if sorted(slots) != list(range(len(slots))):
            raise ValueError("task context indices must be 0..n-1")
        contexts = tuple(slots[i][0] for i in range(len(slots)))
        gold = tuple(slots[i][1] for i in range(len(slots)))
        return cls(Vocab.from_dict(d["vocab"]), contexts, tuple(groups), gold, int(d["n_answers"]))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ConceptTask":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def task_vocab(n_answers: int, n_fillers: int) -> Vocab:
    return Vocab.build([f"a{i}" for i in range(n_answers)] + [f"f{i}" for i in range(n_fillers)])


def build_task(n_groups: int, n_contexts: int, n_answers: int, n_fillers: int, rng) -> ConceptTask:
    rng = np.random.default_rng(rng)
    vocab = task_vocab(n_answers, n_fillers)
    contexts = tuple(ContextId((i,)) for i in range(n_contexts))
    groups = tuple(tuple(i for i in range(n_contexts) if i % n_groups == g) for g in range(n_groups))
    gold = tuple((int(rng.integers(n_answers)),) for _ in range(n_contexts))
    return ConceptTask(vocab, contexts, groups, gold, n_answers)


def _row_kinds(vocab: Vocab, order: int, n_answers: int) -> np.ndarray:
    """Classify each history row by its last token: 0 answer-slot (after SEP),
    1 after an answer, 2 after a filler, 3 anything else."""
    V = vocab.size
    R = V**order
    last = np.arange(R) % V if order > 0 else np.full(1, vocab.sep_id)
    kinds = np.full(R, 3)
    kinds[last == vocab.sep_id] = 0
    kinds[last < n_answers] = 1
    kinds[(last >= n_answers) & (last < vocab.sep_id)] = 2
    return kinds


def _filler_row(V, fillers, u, eos, style_share, p_eos):
    """EOS with ``p_eos``; the rest over fillers, tilted toward teacher u's style."""
    row = np.zeros(V)
    if not fillers:
        row[eos] = 1.0
        return row
    row[fillers] = (1 - p_eos) * (1 - style_share) / len(fillers)
    row[fillers[u % len(fillers)]] += (1 - p_eos) * style_share
    row[eos] = p_eos
    return row


def build_ensemble(
    task: ConceptTask,
    n_teachers: int,
    rng,
    order: int = 2,
    temperatures: Sequence[float] = (1.0,),
    accuracy: float = 0.7,
    off_group_tv: float = 0.4,
    drift_kind: str = "sudden",
    drift_magnitude: float = 1.0,
    drift_span: int = 5,
    n_steps: int | None = None,
    style_share: float = 0.6,
    eos_after_answer: float = 0.05,
    eos_after_filler: float = 0.1,
) -> TeacherEnsemble:
    if n_teachers < 1:
        raise ValueError("need at least one teacher")
    if not 0 < accuracy <= 1 or not 0 <= off_group_tv <= accuracy:
        raise ValueError("need 0 <= off_group_tv <= accuracy <= 1")
    rng = np.random.default_rng(rng)
    vocab, A = task.vocab, task.n_answers
    V = vocab.size
    fillers = list(range(A, vocab.sep_id))
    F = len(fillers)
    eos = vocab.eos_id
    kinds = _row_kinds(vocab, order, A)
    C = len(task.contexts)
    temps = list(temperatures) * n_teachers if len(temperatures) == 1 else list(temperatures)
    if len(temps) != n_teachers:
        raise ValueError("one temperature per teacher (or a single shared value)")

    teachers = []
    for u in range(n_teachers):
        probs = np.zeros((C, V**order, V))
        home = u % task.n_groups
        for ci in range(C):
            gold = task.gold[ci][0]
            wrong = [a for a in range(A) if a != gold]
            ans = np.zeros(V)
            if wrong:
                ans[wrong] = (1 - accuracy) * rng.dirichlet(np.full(len(wrong), 5.0))
            ans[gold] = accuracy
            d = int(rng.choice(wrong)) if wrong else gold
            if task.group_of(ci) != home:
                ans[gold] -= off_group_tv
                ans[d] += off_group_tv
            probs[ci, kinds == 0] = ans
        after_answer = _filler_row(V, fillers, u, eos, style_share, eos_after_answer)
        after_filler = _filler_row(V, fillers, u, eos, style_share, eos_after_filler)
        other = np.zeros(V)
        other[eos] = 1.0
        probs[:, kinds == 1] = after_answer
        probs[:, kinds == 2] = after_filler
        probs[:, kinds == 3] = other
        logits = np.log(np.maximum(probs, 1e-6))
        teachers.append(TabularPolicy(vocab, task.contexts, logits, order, temps[u]))

    events = []
    if drift_kind != "none" and n_steps and n_steps >= 2:
        # one event per teacher, spread over the middle half of the corpus
        steps = np.linspace(n_steps * 0.25, n_steps * 0.75, n_teachers + 2)[1:-1].astype(int)
        steps = np.maximum.accumulate(np.maximum(steps, 1))
        for u in range(n_teachers):
            if u and steps[u] <= steps[u - 1]:
                steps[u] = steps[u - 1] + 1
        home_of = [u % task.n_groups for u in range(n_teachers)]
        order_u = rng.permutation(n_teachers)
        for slot, u in enumerate(order_u):
            delta = np.zeros((C, V**order, V))
            for ci in range(C):
                if task.group_of(ci) == home_of[u]:
                    continue
                gold = task.gold[ci][0]
                choices = [a for a in range(A) if a != gold]
                if choices:
                    delta[ci, kinds == 0, int(rng.choice(choices))] = drift_magnitude
            span = drift_span if drift_kind == "gradual" else 0
            events.append(DriftEvent(int(steps[slot]), int(u), delta, "add", span))
    return TeacherEnsemble(tuple(teachers), DriftSchedule(tuple(events)), int(rng.integers(2**31)))


def greedy_answer(policy: TabularPolicy, context: ContextId, length: int) -> tuple[int, ...]:
    out: list[int] = []
    for _ in range(length):
        out.append(int(np.argmax(policy.probs(context, out))))
    return tuple(out)


def evaluate(policy: TabularPolicy, task: ConceptTask) -> dict:
    """Greedy-decode accuracy per concept group plus the macro average."""
    if policy.vocab != task.vocab:
        raise VocabMismatch("checkpoint vocabulary differs from task vocabulary")
    accs = {}
    for g, members in enumerate(task.groups):
        hits = [greedy_answer(policy, task.contexts[i], len(task.gold[i])) == task.gold[i] for i in members]
        accs[f"acc_g{g}"] = float(np.mean(hits)) if hits else 0.0
    accs["macro_acc"] = float(np.mean([accs[f"acc_g{g}"] for g in range(task.n_groups)]))
    return accs
