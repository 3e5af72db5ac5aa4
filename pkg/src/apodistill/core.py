"""Domain types and probability arithmetic for autoregressive token streams.

A trajectory is a sequence of integer token indices into a :class:`Vocab`.
Policies map ``(context, prefix)`` to a next-token :class:`Categorical`; the
state of a stream at step ``j`` is the pair ``(prefix, predictive)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    AbsoluteContinuityViolation,
    PredictiveMismatch,
    ZeroProbabilityToken,
)

# probabilities at or below this are treated as exact zeros
PROB_FLOOR = 1e-300
NORM_TOL = 1e-9
PREDICTIVE_TOL = 1e-9


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]
    sep: str = "<sep>"
    eos: str = "<eos>"

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if len(self.symbols) < 2:
            raise ValueError("vocabulary needs at least 2 symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if self.sep == self.eos:
            raise ValueError("SEP and EOS must be distinct")
        for marker in (self.sep, self.eos):
            if marker not in self.symbols:
                raise ValueError(f"marker {marker!r} missing from symbols")

    @classmethod
    def build(cls, content: Sequence[str], sep="<sep>", eos="<eos>") -> "Vocab":
        """Content symbols first, then SEP, then EOS."""
        return cls(tuple(content) + (sep, eos), sep=sep, eos=eos)

    def __len__(self):
        return len(self.symbols)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    @property
    def sep_id(self) -> int:
        return self.symbols.index(self.sep)

    @property
    def eos_id(self) -> int:
        return self.symbols.index(self.eos)

    def check_tokens(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not (0 <= int(t) < len(self.symbols)):
                raise ValueError(f"token {t} outside vocabulary of size {len(self.symbols)}")

    def to_dict(self) -> dict:
        return {"symbols": list(self.symbols), "sep": self.sep, "eos": self.eos}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["symbols"]), sep=d["sep"], eos=d["eos"])


@dataclass(frozen=True, order=True)
class ContextId:
    """Discrete stand-in for the (image, prompt) conditioning pair."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise ValueError("ContextId needs at least one token")

    def __len__(self):
        return len(self.tokens)

    def render(self) -> list[int]:
        return list(self.tokens)


@dataclass(frozen=True, eq=False)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probs must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probs must be finite and non-negative")
        if abs(p.sum() - 1.0) > NORM_TOL:
            raise ValueError(f"probs sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_logits(cls, logits, temperature: float = 1.0) -> "Categorical":
        return cls(softmax(np.asarray(logits, dtype=float) / temperature))

    @classmethod
    def uniform(cls, size: int) -> "Categorical":
        return cls(np.full(size, 1.0 / size))

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        if not isinstance(other, Categorical):
            return NotImplemented
        return self.probs.shape == other.probs.shape and bool(np.all(self.probs == other.probs))

    def __hash__(self):
        return hash(self.probs.tobytes())

    def log_prob(self, token: int) -> float:
        p = self.probs[token]
        if p <= PROB_FLOOR:
            raise ZeroProbabilityToken(f"token {token} has zero probability")
        return math.log(p)

    def argmax(self) -> int:
        # np.argmax returns the first maximum: lowest index wins ties
        return int(np.argmax(self.probs))

    def allclose(self, other: "Categorical", tol: float = PREDICTIVE_TOL) -> bool:
        return self.probs.shape == other.probs.shape and float(np.max(np.abs(self.probs - other.probs))) <= tol


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def total_variation(p, q) -> float:
    p = p.probs if isinstance(p, Categorical) else np.asarray(p)
    q = q.probs if isinstance(q, Categorical) else np.asarray(q)
    return 0.5 * float(np.abs(p - q).sum())


@dataclass(frozen=True)
class TrajectoryState:
    prefix: tuple[int, ...]
    predictive: Categorical

    def __post_init__(self):
        object.__setattr__(self, "prefix", tuple(int(t) for t in self.prefix))
        if any(t < 0 or t >= len(self.predictive) for t in self.prefix):
            raise ValueError("prefix token outside vocabulary")


@dataclass(frozen=True)
class CotStream:
    """States s_0..s_i of one trajectory plus the realized tokens."""

    context: ContextId
    states: tuple[TrajectoryState, ...]
    tokens: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        for k in range(1, len(self.states)):
            prev, cur = self.states[k - 1], self.states[k]
            if len(cur.prefix) != len(prev.prefix) + 1 or cur.prefix[:-1] != prev.prefix:
                raise ValueError(f"state {k} does not extend state {k - 1} by one token")
            if prev.predictive.probs[cur.prefix[-1]] <= PROB_FLOOR:
                raise ValueError(f"state {k} appends a zero-probability token")
        if self.tokens:
            if len(self.tokens) != len(self.states):
                raise ValueError("tokens and states must have the same length")
            for k, s in enumerate(self.states):
                if s.prefix != self.tokens[:k]:
                    raise ValueError(f"state {k} prefix disagrees with tokens")
            last = self.states[-1]
            if last.predictive.probs[self.tokens[-1]] <= PROB_FLOOR:
                raise ValueError("final token has zero probability")

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True)
class MultiStreamState:
    per_teacher: tuple[TrajectoryState, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_teacher", tuple(self.per_teacher))
        if len(self.per_teacher) < 1:
            raise ValueError("need at least one teacher state")
        sizes = {len(s.predictive) for s in self.per_teacher}
        if len(sizes) != 1:
            raise ValueError("all teacher states must share one vocabulary")

    def __len__(self):
        return len(self.per_teacher)


class AutoregressivePolicy(Protocol):
    vocab: Vocab

    def probs(self, context: ContextId, prefix: Sequence[int], history: Sequence[int] = ()) -> np.ndarray:
        ...

    def predictive(self, context: ContextId, prefix: Sequence[int], history: Sequence[int] = ()) -> Categorical:
        ...


def sequence_log_prob(
    policy: AutoregressivePolicy,
    context: ContextId,
    tokens: Sequence[int],
    history: Sequence[int] = (),
) -> float:
    """log pi(tokens | context, history) as a sum of per-step log-probabilities.

    Raises ZeroProbabilityToken instead of returning -inf.
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("tokens must be non-empty")
    policy.vocab.check_tokens(tokens)
    total = 0.0
    for j, t in enumerate(tokens):
        p = policy.probs(context, tokens[:j], history)[t]
        if p <= PROB_FLOOR:
            raise ZeroProbabilityToken(f"step {j}: token {t} has zero probability")
        total += math.log(p)
    return total


def joint_state_log_prob(
    state: MultiStreamState,
    policies: Sequence[AutoregressivePolicy],
    context: ContextId,
) -> float:
    """Log joint probability of N independent teacher states.

    Each teacher contributes log P(prefix) plus the log of the predictive
    factor, which is 0 when the recorded predictive matches the policy's own
    and -inf otherwise (reported as PredictiveMismatch).
    """
    if len(policies) != len(state.per_teacher):
        raise ValueError("need exactly one policy per teacher state")
    total = 0.0
    for u, (s, pol) in enumerate(zip(state.per_teacher, policies)):
        if s.prefix:
            total += sequence_log_prob(pol, context, s.prefix)
        computed = pol.predictive(context, s.prefix)
        if not computed.allclose(s.predictive, PREDICTIVE_TOL):
            raise PredictiveMismatch(f"teacher {u}: recorded predictive differs from policy")
    return total


def kl_divergence(p: Categorical, q: Categorical) -> float:
    """Sum_x p(x) log(p(x)/q(x)), with 0 log(0/q) = 0."""
    pp, qq = p.probs, q.probs
    if pp.shape != qq.shape:
        raise ValueError("distributions over different vocabularies")
    support = pp > PROB_FLOOR
    if np.any(qq[support] <= PROB_FLOOR):
        raise AbsoluteContinuityViolation("q assigns zero mass where p is positive")
    ps, qs = pp[support], qq[support]
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(qs)))))
