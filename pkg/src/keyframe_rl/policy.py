"""Toy query policy: a linear map from the hint vector to concept logits.

Queries are drawn without replacement from the softmax over concepts, the
same way frames are drawn from sampler scores, and the policy is updated
with the clipped group-relative surrogate (no KL term).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import MAX_QUERIES
from .sampler import draw_logprob, draw_logprob_grad, greedy_select, sample_without_replacement

FAULTS = ("duplicate", "out_of_vocab", "empty")


@dataclass
class PolicyParams:
    weights: np.ndarray  # (C, C)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        c = self.bias.shape[0]
        if self.weights.shape != (c, c):
            raise ValueError("weights must be C x C with C = len(bias)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("policy parameters must be finite")

    @property
    def vocab_size(self) -> int:
        return self.bias.shape[0]

    @property
    def arrays(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.bias.copy())

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.arrays, {"kind": "policy"})

    @classmethod
    def load(cls, path) -> "PolicyParams":
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise nn.CheckpointError(f"{path} is not a policy checkpoint")
        return cls(arrays["weights"], arrays["bias"])


def init_policy(vocab_size: int, gain: float = 1.0, confusion: float = 0.0, rng=None) -> PolicyParams:
    """``gain * I`` plus a fixed random confusion matrix with entry scale ``confusion``.

    The confusion term stands in for an untrained model's systematic habit of
    asking about the wrong things; it is what query training must undo.
    """
    rng = np.random.default_rng(rng)
    w = gain * np.eye(vocab_size)
    if confusion > 0:
        w = w + rng.normal(0.0, confusion, size=(vocab_size, vocab_size))
    return PolicyParams(w, np.zeros(vocab_size))


def policy_forward(params: PolicyParams, hint) -> np.ndarray:
    hint = np.asarray(hint, dtype=np.float64)
    if hint.shape != (params.vocab_size,):
        raise ValueError(f"hint length {hint.shape} does not match vocabulary {params.vocab_size}")
    return params.weights @ hint + params.bias


@dataclass
class QuerySet:
    concepts: list
    total_logprob: float
    well_formed: bool = True
    temperature: float = 1.0


def _check_nq(n_q, vocab):
    if not 1 <= n_q <= min(MAX_QUERIES, vocab):
        raise ValueError(f"n_q must be in [1, {min(MAX_QUERIES, vocab)}], got {n_q}")


def _apply_fault(concepts, vocab, fault):
    if fault is None:
        return concepts
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    if fault == "duplicate":
        return concepts + [concepts[0]] if len(concepts) < MAX_QUERIES else concepts[:-1] + [concepts[0]]
    if fault == "out_of_vocab":
        return concepts[:-1] + [vocab]
    return []


def is_well_formed(concepts, vocab: int) -> bool:
    return (
        1 <= len(concepts) <= MAX_QUERIES
        and len(set(concepts)) == len(concepts)
        and all(0 <= c < vocab for c in concepts)
    )


def sample_queries(logits, n_q: int, temperature: float = 1.0, rng=None, fault: str | None = None) -> QuerySet:
    """Draw ``n_q`` distinct concepts; ``fault`` corrupts the output for format-reward tests."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_nq(n_q, logits.size)
    draw = sample_without_replacement(logits, n_q, temperature, rng)
    concepts = _apply_fault(list(draw.indices), logits.size, fault)
    return QuerySet(concepts, draw.total_logprob, is_well_formed(concepts, logits.size), temperature)


def greedy_queries(logits, n_q: int) -> QuerySet:
    logits = np.asarray(logits, dtype=np.float64)
    _check_nq(n_q, logits.size)
    draw = greedy_select(logits, n_q)
    return QuerySet(list(draw.indices), draw.total_logprob, True, 1.0)


def query_logprob(params: PolicyParams, hint, query_set: QuerySet) -> float:
    return draw_logprob(policy_forward(params, hint), query_set.concepts, query_set.temperature)


def query_logprob_grad(params: PolicyParams, hint, query_set: QuerySet) -> tuple[float, dict]:
    """Log-probability of ``query_set`` under ``params`` and its gradient."""
    hint = np.asarray(hint, dtype=np.float64)
    logits = policy_forward(params, hint)
    lp = draw_logprob(logits, query_set.concepts, query_set.temperature)
    dz = draw_logprob_grad(logits, query_set.concepts, query_set.temperature)
    return lp, {"weights": np.outer(dz, hint), "bias": dz}


def clipped_surrogate(ratio, advantage, clip_eps):
    """Per-trajectory ``min(s A, clip(s, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


@dataclass
class Trajectory:
    """One rollout as the policy update needs it."""

    hint: np.ndarray
    query_set: QuerySet
    old_logprob: float
    advantage: float


def grpo_objective(params: PolicyParams, group, clip_eps: float = 0.2) -> tuple[float, dict]:
    """Mean clipped surrogate over ``group`` and its gradient with respect to ``params``.

    Malformed query sets have no probability under the policy and are
    skipped (they still count in the mean).
    """
    total = 0.0
    gw = np.zeros_like(params.weights)
    gb = np.zeros_like(params.bias)
    for tr in group:
        if tr.advantage == 0.0 or not tr.query_set.well_formed:
            continue
        lp, g = query_logprob_grad(params, tr.hint, tr.query_set)
        s = np.exp(lp - tr.old_logprob)
        unclipped = s * tr.advantage
        clipped = np.clip(s, 1.0 - clip_eps, 1.0 + clip_eps) * tr.advantage
        total += min(unclipped, clipped)
        # gradient flows only through the unclipped branch when it is the minimum
        if unclipped <= clipped:
            coef = tr.advantage * s
            gw += coef * g["weights"]
            gb += coef * g["bias"]
    n = len(group)
    return total / n, {"weights": gw / n, "bias": gb / n}


def grpo_update(params: PolicyParams, group, state: nn.AdamState, clip_eps: float = 0.2, group_size: int | None = None) -> dict:
    """One Adam ascent step on the clipped surrogate; returns the gradient used.

    All-zero advantages skip the step entirely so parameters stay bit-identical.
    """
    if group_size is not None and len(group) % group_size:
        raise ValueError(f"group of {len(group)} trajectories is not a multiple of G={group_size}")
    _, grad = grpo_objective(params, group, clip_eps)
    if all(tr.advantage == 0.0 for tr in group):
        return grad
    nn.adam_step(params.arrays, {k: -v for k, v in grad.items()}, state)
    return grad


__all__ = [
    "PolicyParams",
    "init_policy",
    "policy_forward",
    "QuerySet",
    "sample_queries",
    "greedy_queries",
    "query_logprob",
    "query_logprob_grad",
    "clipped_surrogate",
    "Trajectory",
    "grpo_objective",
    "grpo_update",
    "is_well_formed",
]
