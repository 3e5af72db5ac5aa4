"""Autonomous preference optimization over N weighted negative teachers.

For a tuple (context, t+, negatives t^1..t^N, weights w_u) with rewards
r(t) = beta * (log pi(t) - log pi_ref(t)) the preference probability is

    P = exp(r+) / (exp(r+) + sum_u w_u exp(r_u))

and the loss is the batch mean of -log P.  With N = 1 and w = 1 this is the
usual two-option DPO loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PROB_FLOOR, ContextId, log_softmax, sequence_log_prob, softmax
from .errors import DivergenceDetected, ZeroProbabilityToken
from .teachers import TabularPolicy


@dataclass(frozen=True)
class PreferenceTuple:
    context: ContextId
    positive: tuple[int, ...]
    negatives: tuple[tuple[int, ...], ...]
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(int(t) for t in self.positive))
        object.__setattr__(self, "negatives", tuple(tuple(int(t) for t in n) for n in self.negatives))
        if not self.weights:
            object.__setattr__(self, "weights", (1.0,) * len(self.negatives))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.negatives:
            raise ValueError("need at least one negative")
        if not self.positive or any(len(n) == 0 for n in self.negatives):
            raise ValueError("sequences must be non-empty")
        if len(self.weights) != len(self.negatives):
            raise ValueError("one weight per negative")
        if any(not math.isfinite(w) or w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ValueError("weights must be finite, non-negative, with positive sum")

    def with_weights(self, weights) -> "PreferenceTuple":
        return PreferenceTuple(self.context, self.positive, self.negatives, tuple(weights))


@dataclass(frozen=True)
class ApoConfig:
    beta: float = 0.1
    weights_mode: str = "uniform"  # uniform | supplied
    lr: float = 1.0
    steps: int = 200
    seed: int = 0
    length_normalize: bool = False  # not part of the original objective
    momentum: float = 0.0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.weights_mode not in ("uniform", "supplied"):
            raise ValueError(f"unknown weights mode {self.weights_mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def _scale(t: Sequence[int], beta: float, length_normalize: bool) -> float:
    return beta / len(t) if length_normalize else beta


def reward(policy, reference, context: ContextId, t: Sequence[int], beta: float, length_normalize: bool = False) -> float:
    return _scale(t, beta, length_normalize) * (
        sequence_log_prob(policy, context, t) - sequence_log_prob(reference, context, t)
    )


def _log_preference(r_pos: float, r_neg: Sequence[float], weights: Sequence[float]) -> float:
    terms = [r_pos] + [r + math.log(w) for r, w in zip(r_neg, weights) if w > 0]
    m = max(terms)
    lse = m + math.log(sum(math.exp(x - m) for x in terms))
    return r_pos - lse


def preference_probability(tup: PreferenceTuple, policy, reference, beta: float, length_normalize: bool = False) -> float:
    r_pos = reward(policy, reference, tup.context, tup.positive, beta, length_normalize)
    r_neg = [reward(policy, reference, tup.context, t, beta, length_normalize) for t in tup.negatives]
    return math.exp(_log_preference(r_pos, r_neg, tup.weights))


class CompiledBatch:
    """Flattened (context, row, token) steps of every sequence in a batch.

    Sequence 0 of tuple i is t+, followed by its negatives.  Reference
    log-probabilities are computed once since the reference is frozen.
    """

    def __init__(self, batch: Sequence[PreferenceTuple], policy: TabularPolicy, reference: TabularPolicy, beta: float, length_normalize: bool = False, weights_override=None):
        if not batch:
            raise ValueError("batch must be non-empty")
        self.beta = beta
        self.shape = policy.logits.shape
        self.temperature = policy.temperature
        seq_tuple, seq_is_pos, seq_logw, seq_scale = [], [], [], []
        step_seq, step_ctx, step_row, step_tok = [], [], [], []
        ref_ctx, ref_row = [], []
        for i, tup in enumerate(batch):
            ci = policy.context_index(tup.context)
            ci_ref = reference.context_index(tup.context)
            weights = tup.weights if weights_override is None else weights_override(tup)
            seqs = [(tup.positive, None)] + list(zip(tup.negatives, weights))
            for s, w in seqs:
                sid = len(seq_tuple)
                seq_tuple.append(i)
                seq_is_pos.append(w is None)
                seq_logw.append(0.0 if w is None else (math.log(w) if w > 0 else -math.inf))
                seq_scale.append(_scale(s, beta, length_normalize))
                for j, t in enumerate(s):
                    step_seq.append(sid)
                    step_ctx.append(ci)
                    step_row.append(policy.row_index(s[:j]))
                    step_tok.append(t)
                    ref_ctx.append(ci_ref)
                    ref_row.append(reference.row_index(s[:j]))
        self.n_tuples = len(batch)
        self.seq_tuple = np.array(seq_tuple)
        self.seq_is_pos = np.array(seq_is_pos)
        self.seq_logw = np.array(seq_logw)
        self.seq_scale = np.array(seq_scale)
        self.step_seq = np.array(step_seq)
        self.step_ctx = np.array(step_ctx)
        self.step_row = np.array(step_row)
        self.step_tok = np.array(step_tok)
        self.pos_index = np.nonzero(self.seq_is_pos)[0]
        # same arithmetic as the policy side, so pi = pi_ref gives r = 0 exactly
        self.ref_lp = self._sum_steps(
            reference.logits, reference.temperature, np.array(ref_ctx), np.array(ref_row), "reference"
        )

    def _sum_steps(self, logits, temperature, ctx, row, who) -> np.ndarray:
        step_lp = log_softmax(logits / temperature)[ctx, row, self.step_tok]
        if np.any(step_lp < math.log(PROB_FLOOR)):
            raise ZeroProbabilityToken(f"{who} assigns zero probability to a batch token")
        return np.bincount(self.step_seq, weights=step_lp, minlength=self.seq_tuple.size)

    def seq_logprobs(self, logits: np.ndarray) -> np.ndarray:
        return self._sum_steps(logits, self.temperature, self.step_ctx, self.step_row, "policy")

    def _shares(self, logits: np.ndarray):
        lp = self.seq_logprobs(logits)
        r = self.seq_scale * (lp - self.ref_lp)
        score = r + self.seq_logw  # log-weighted rewards; t+ has log w = 0
        tmax = np.full(self.n_tuples, -np.inf)
        np.maximum.at(tmax, self.seq_tuple, score)
        e = np.exp(score - tmax[self.seq_tuple])
        z = np.bincount(self.seq_tuple, weights=e, minlength=self.n_tuples)
        lse = tmax + np.log(z)
        share = e / z[self.seq_tuple]
        return r, lse, share

    def rewards(self, logits: np.ndarray) -> np.ndarray:
        lp = self.seq_logprobs(logits)
        return self.seq_scale * (lp - self.ref_lp)

    def log_preference(self, logits: np.ndarray) -> np.ndarray:
        r, lse, _ = self._shares(logits)
        return r[self.pos_index] - lse

    def loss(self, logits: np.ndarray) -> float:
        return float(-np.mean(self.log_preference(logits)))

    def grad(self, logits: np.ndarray) -> np.ndarray:
        _, _, share = self._shares(logits)
        # d(-log P)/d r_s: share_s - 1 for t+, share_s for a negative
        g_seq = (share - self.seq_is_pos) * self.seq_scale / self.n_tuples
        coef = g_seq[self.step_seq] / self.temperature
        C, R, V = self.shape
        flat_row = self.step_ctx * R + self.step_row
        g_tok = np.zeros(C * R * V)
        np.add.at(g_tok, flat_row * V + self.step_tok, coef)
        g_row = np.bincount(flat_row, weights=coef, minlength=C * R)
        p = softmax(logits / self.temperature).reshape(C * R, V)
        return (g_tok.reshape(C * R, V) - g_row[:, None] * p).reshape(C, R, V)


def apo_loss(batch: Sequence[PreferenceTuple], policy, reference, beta: float, length_normalize: bool = False) -> float:
    return CompiledBatch(batch, policy, reference, beta, length_normalize).loss(policy.logits)


def apo_loss_expanded(batch: Sequence[PreferenceTuple], policy, reference, beta: float) -> float:
    """Same loss written as ratios of raw sequence probabilities raised to beta."""
    total = 0.0
    for tup in batch:

        def prob(pol, t):
            return math.prod(float(pol.probs(tup.context, t[:j])[tok]) for j, tok in enumerate(t))

        ratio_pos = (prob(policy, tup.positive) / prob(reference, tup.positive)) ** beta
        denom = ratio_pos + sum(
            w * (prob(policy, t) / prob(reference, t)) ** beta for t, w in zip(tup.negatives, tup.weights)
        )
        total += -math.log(ratio_pos / denom)
    return total / len(batch)


def apo_grad(batch: Sequence[PreferenceTuple], policy, reference, beta: float, length_normalize: bool = False) -> np.ndarray:
    return CompiledBatch(batch, policy, reference, beta, length_normalize).grad(policy.logits)


def preference_accuracy(batch: Sequence[PreferenceTuple], policy, reference, beta: float, length_normalize: bool = False) -> float:
    """Fraction of tuples with P(t+ preferred) > 0.5."""
    logp = CompiledBatch(batch, policy, reference, beta, length_normalize).log_preference(policy.logits)
    return float(np.mean(logp > math.log(0.5)))


def train_apo(policy, reference, tuples: Sequence[PreferenceTuple], config: ApoConfig, losses: list | None = None):
    """Full-batch gradient descent on the APO loss; the reference is untouched.

    Raises DivergenceDetected when the loss exceeds ``divergence_factor``
    times its initial value.
    """
    if not tuples:
        raise ValueError("tuples must be non-empty")
    if not getattr(reference, "reference", True):
        raise ValueError("reference policy must be a frozen snapshot")
    override = (lambda t: (1.0,) * len(t.negatives)) if config.weights_mode == "uniform" else None
    compiled = CompiledBatch(tuples, policy, reference, config.beta, config.length_normalize, override)
    theta = np.array(policy.logits, dtype=float)
    curve = [compiled.loss(theta)]
    initial = curve[0]
    velocity = np.zeros_like(theta)
    for step in range(config.steps):
        velocity = config.momentum * velocity - config.lr * compiled.grad(theta)
        theta = theta + velocity
        loss = compiled.loss(theta)
        curve.append(loss)
        if not math.isfinite(loss) or loss > config.divergence_factor * initial:
            raise DivergenceDetected(
                f"APO loss {loss:.4g} at step {step + 1} exceeds {config.divergence_factor}x initial {initial:.4g}; lower lr",
                curve,
            )
    if losses is not None:
        losses.extend(curve)
    return policy.with_logits(theta) if config.steps else policy
