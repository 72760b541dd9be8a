"""Training phases, baselines and evaluation on synthetic episodes."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as E
from . import nn
from . import sampler as U
from .config import METHODS, RunConfig
from .policy import PolicyParams, Trajectory, greedy_queries, grpo_update, init_policy, policy_forward, sample_queries
from .rewards import DifficultyAdvantageConfig, compute_rewards, difficulty_advantage, group_advantages

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "reward_mean", "acc_mean", "format_mean", "info_mean", "advantage_std")

# RNG stream tags
_INIT_SAMPLER, _INIT_POLICY, _PRETRAIN, _JOINT, _EVAL_IDS = 10, 11, 12, 13, 1_000_000


class DataError(ValueError):
    pass


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def similarity_for(ep: E.EpisodeSpec, queries, cfg: RunConfig) -> E.SimilarityMatrix:
    return E.synthesize_similarity(
        ep,
        queries,
        cfg.sim_noise,
        height_jitter=cfg.height_jitter,
        spike_rate=cfg.spike_rate,
        spike_height=cfg.spike_height,
        seed=cfg.seed,
    )


def initial_sampler(cfg: RunConfig) -> U.SamplerParams:
    return U.init_sampler(_rng(cfg.seed, _INIT_SAMPLER))


def initial_policy(cfg: RunConfig) -> PolicyParams:
    """The untrained ("frozen") query policy for ``cfg``."""
    return init_policy(cfg.vocab_size, cfg.policy_gain, cfg.policy_confusion, _rng(cfg.seed, _INIT_POLICY))


def eval_episode_ids(cfg: RunConfig) -> range:
    return range(_EVAL_IDS, _EVAL_IDS + cfg.n_eval_episodes)


def write_metrics(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], *(repr(float(r[c])) for c in METRIC_COLUMNS[1:])])


def _metric_row(step, rewards, advantages):
    return {
        "step": step,
        "reward_mean": float(np.mean([r.total for r in rewards])),
        "acc_mean": float(np.mean([r.acc for r in rewards])),
        "format_mean": float(np.mean([r.format for r in rewards])),
        "info_mean": float(np.mean([r.info for r in rewards])),
        "advantage_std": float(np.std(advantages)),
    }


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


# ------------------------------------------------------------------ pre-training


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    seconds: float = 0.0


def pretrain_sampler(episodes, cfg: RunConfig, sampler: U.SamplerParams | None = None, steps: int | None = None, callback=None):
    """REINFORCE pre-training of the sampler with the difficulty-aware advantage.

    Similarity matrices come from each episode's ground-truth concepts, so the
    query policy plays no part. ``steps`` caps the number of updates (the
    default is ``pretrain_epochs`` passes over the data in mini-batches).
    ``callback(step, sampler)`` runs after every step.
    Returns ``(sampler, TrainResult)``.
    """
    t0 = time.perf_counter()
    if not episodes:
        raise DataError("pre-training needs at least one episode")
    for ep in episodes:
        if ep.pass_rate is None:
            raise DataError(f"episode {ep.episode_id} has no pass rate; run `gen` first")
        if ep.excluded:
            raise DataError(f"episode {ep.episode_id} has pass rate 1 and must be filtered out")
    sampler = sampler if sampler is not None else initial_sampler(cfg)
    state = nn.AdamState(lr=cfg.lr_sampler)
    oracle = cfg.oracle_config()
    dcfg = DifficultyAdvantageConfig(zero_pass_bonus=cfg.zero_pass_bonus)
    top_p = cfg.top_p if cfg.top_p < 1 else None

    mats = [similarity_for(ep, ep.relevant_concepts, cfg) for ep in episodes]
    x = np.stack([U.pad_queries(S) for S in mats])
    result = TrainResult()
    step = 0
    epoch = 0
    while True:
        for idx in _batches(len(episodes), cfg.batch_size, _rng(cfg.seed, _PRETRAIN, epoch)):
            if steps is not None and step >= steps:
                break
            scores, cache = U.forward_batch(sampler, x[idx])
            draws, advs, rewards = [], [], []
            for b, i in enumerate(idx):
                ep = episodes[i]
                rng = _rng(cfg.seed, _PRETRAIN, step, b)
                draw = U.sample_without_replacement(scores[b], cfg.k_frames, cfg.temperature, rng, top_p)
                correct = E.answer_oracle(ep, draw.indices, oracle, rng=E.oracle_stream(oracle, ep.episode_id, _PRETRAIN, step, b))
                draws.append(draw)
                advs.append(difficulty_advantage(ep.pass_rate, correct, dcfg))
                rewards.append(compute_rewards(correct, True, mats[i], cfg.tau_info))
            if any(a != 0.0 for a in advs):
                grads = U.reinforce_backward(sampler, cache, scores, draws, np.asarray(advs) / len(idx), top_p)
                U.adam_update(sampler, grads, state)
            result.metrics.append(_metric_row(step, rewards, advs))
            if callback is not None:
                callback(step, sampler)
            step += 1
        epoch += 1
        if steps is not None:
            if step >= steps:
                break
        elif epoch >= cfg.pretrain_epochs:
            break
    result.seconds = time.perf_counter() - t0
    log.info("pre-training: %d steps in %.1fs", step, result.seconds)
    return sampler, result


# ------------------------------------------------------------------ joint training


def _rollout_group(ep, policy, n_q, cfg, rng):
    logits = policy_forward(policy, ep.hint)
    out = []
    for _ in range(cfg.group_size):
        qs = sample_queries(logits, n_q, cfg.temperature, rng)
        out.append((qs, similarity_for(ep, qs.concepts, cfg)))
    return out


def joint_train(
    episodes,
    cfg: RunConfig,
    sampler: U.SamplerParams | None = None,
    policy: PolicyParams | None = None,
    steps: int | None = None,
    callback=None,
):
    """Joint GRPO (query policy) + REINFORCE (sampler) training.

    Each step takes ``batch_size`` questions, rolls out ``group_size``
    trajectories per question from a snapshot of both models, updates the
    policy on the clipped surrogate with group-relative advantages of the
    total reward, and updates the sampler on the same rollouts with the
    accuracy reward. ``callback(step, policy, sampler)`` runs after every
    step. Returns ``(policy, sampler, TrainResult)``.
    """
    t0 = time.perf_counter()
    if not episodes:
        raise DataError("joint training needs at least one episode")
    sampler = sampler if sampler is not None else initial_sampler(cfg)
    policy = policy if policy is not None else initial_policy(cfg)
    s_state = nn.AdamState(lr=cfg.lr_sampler)
    p_state = nn.AdamState(lr=cfg.lr_policy)
    oracle = cfg.oracle_config()
    top_p = cfg.top_p if cfg.top_p < 1 else None
    G = cfg.group_size
    result = TrainResult()
    step = 0
    total_steps = steps if steps is not None else cfg.joint_epochs * -(-len(episodes) // cfg.batch_size)
    epoch = 0
    while step < total_steps:
        for idx in _batches(len(episodes), cfg.batch_size, _rng(cfg.seed, _JOINT, epoch)):
            if step >= total_steps:
                break
            rollouts = []
            for i in idx:
                ep = episodes[i]
                rng = _rng(cfg.seed, _JOINT, step, ep.episode_id)
                n_q = int(rng.choice(cfg.train_query_counts))
                rollouts.append((ep, _rollout_group(ep, policy, n_q, cfg, rng)))
            x = np.stack([U.pad_queries(S) for _, grp in rollouts for _, S in grp])
            scores, cache = U.forward_batch(sampler, x)

            draws, trajectories, rewards, sampler_adv, pol_adv = [], [], [], [], []
            row = 0
            for ep, grp in rollouts:
                group_rewards = []
                for g, (qs, S) in enumerate(grp):
                    rng = _rng(cfg.seed, _JOINT, step, ep.episode_id, g)
                    draw = U.sample_without_replacement(scores[row], cfg.k_frames, cfg.temperature, rng, top_p)
                    correct = E.answer_oracle(ep, draw.indices, oracle, rng=E.oracle_stream(oracle, ep.episode_id, _JOINT, step, g))
                    r = compute_rewards(correct, qs.well_formed, S, cfg.tau_info)
                    draws.append(draw)
                    group_rewards.append(r)
                    row += 1
                adv = group_advantages([r.total for r in group_rewards])
                if cfg.sampler_advantage == "group":
                    sampler_adv.extend(group_advantages([r.acc for r in group_rewards]))
                else:
                    sampler_adv.extend(r.acc for r in group_rewards)
                for (qs, _), a in zip(grp, adv):
                    trajectories.append(Trajectory(ep.hint, qs, qs.total_logprob, float(a)))
                pol_adv.extend(adv)
                rewards.extend(group_rewards)

            grpo_update(policy, trajectories, p_state, cfg.clip_eps, group_size=G)
            sampler_adv = np.asarray(sampler_adv, dtype=np.float64)
            if np.any(sampler_adv != 0.0):
                grads = U.reinforce_backward(sampler, cache, scores, draws, sampler_adv / len(draws), top_p)
                U.adam_update(sampler, grads, s_state)
            result.metrics.append(_metric_row(step, rewards, pol_adv))
            if callback is not None:
                callback(step, policy, sampler)
            step += 1
        epoch += 1
    result.seconds = time.perf_counter() - t0
    log.info("joint training: %d steps in %.1fs", step, result.seconds)
    return policy, sampler, result


def steps_to_reach(metrics, threshold: float, window: int = 1):
    """First step whose trailing ``window``-step mean reward reaches ``threshold`` (None if never)."""
    r = np.array([m["reward_mean"] for m in metrics])
    for t in range(len(r)):
        if t + 1 >= window and r[t + 1 - window : t + 1].mean() >= threshold:
            return t
    return None


# ------------------------------------------------------------------ frame selection


def uniform_indices(n_frames: int, k: int) -> list:
    return [i * n_frames // k for i in range(k)]


def pooled_topk(S: E.SimilarityMatrix, k: int, weighted: bool = False) -> list:
    """Top-k frames of the query-pooled similarity (mean, or row-max weighted mean)."""
    v = S.values
    if weighted:
        w = v.max(axis=1)
        pooled = (w[:, None] * v).sum(axis=0) / w.sum()
    else:
        pooled = v.mean(axis=0)
    return [int(i) for i in np.argsort(-pooled, kind="stable")[:k]]


@dataclass
class Models:
    frozen_policy: PolicyParams | None = None
    pretrained_sampler: U.SamplerParams | None = None
    joint_policy: PolicyParams | None = None
    joint_sampler: U.SamplerParams | None = None


def _require(obj, what):
    if obj is None:
        raise DataError(f"missing checkpoint: {what}")
    return obj


def select_frames(method: str, ep: E.EpisodeSpec, cfg: RunConfig, models: Models):
    """Return ``(frame indices, similarity matrix or None)`` for one method."""
    k = cfg.k_frames
    if method == "uniform":
        return uniform_indices(ep.n_frames, k), None
    if method in ("topk_avg", "topk_weighted", "learned_frozen"):
        policy = _require(models.frozen_policy, "frozen policy")
    elif method == "learned_joint":
        policy = _require(models.joint_policy, "joint policy")
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    qs = greedy_queries(policy_forward(policy, ep.hint), cfg.eval_queries)
    S = similarity_for(ep, qs.concepts, cfg)
    if method == "topk_avg":
        return pooled_topk(S, k), S
    if method == "topk_weighted":
        return pooled_topk(S, k, weighted=True), S
    net = _require(models.pretrained_sampler if method == "learned_frozen" else models.joint_sampler, f"{method} sampler")
    scores, _ = U.sampler_forward(net, S)
    return U.greedy_select(scores, k).indices, S


def _select_learned_batch(method, episodes, cfg, models):
    # batched variant of select_frames for the sampler-backed methods
    policy = models.frozen_policy if method == "learned_frozen" else models.joint_policy
    net = models.pretrained_sampler if method == "learned_frozen" else models.joint_sampler
    _require(policy, f"{method} policy")
    _require(net, f"{method} sampler")
    mats = [similarity_for(ep, greedy_queries(policy_forward(policy, ep.hint), cfg.eval_queries).concepts, cfg) for ep in episodes]
    out = []
    for lo in range(0, len(episodes), 128):
        scores, _ = U.forward_batch(net, np.stack([U.pad_queries(S) for S in mats[lo : lo + 128]]))
        out.extend(U.greedy_select(s, cfg.k_frames).indices for s in scores)
    return list(zip(out, mats))


@dataclass
class MethodResult:
    accuracy: float
    coverage: float
    info_mean: float | None
    correct: list  # per-episode outcomes, for paired comparisons

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "coverage": self.coverage, "info_mean": self.info_mean}


@dataclass
class EvalReport:
    methods: dict
    k_frames: int
    n_episodes: int
    seed: int
    eval_seed: int
    seconds: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "format": "keyframe-rl eval report v1",
            "k_frames": self.k_frames,
            "n_episodes": self.n_episodes,
            "seed": self.seed,
            "eval_seed": self.eval_seed,
            "methods": {m: r.summary() for m, r in self.methods.items()},
        }
        if timing:
            d["wall_clock_seconds"] = self.seconds
        return d

    def write(self, path, timing: bool = False) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(timing), fh, indent=2)
            fh.write("\n")

    def accuracy(self, method: str) -> float:
        return self.methods[method].accuracy


def run_baseline(method: str, episodes, cfg: RunConfig, models: Models | None = None) -> MethodResult:
    """Score one method on ``episodes`` with the shared per-episode oracle stream."""
    models = models or Models()
    oracle = cfg.oracle_config(cfg.eval_seed)
    if method in ("learned_frozen", "learned_joint"):
        picks = _select_learned_batch(method, episodes, cfg, models)
    else:
        picks = [select_frames(method, ep, cfg, models) for ep in episodes]
    correct, cover, info = [], [], []
    for ep, (idx, S) in zip(episodes, picks):
        if len(set(idx)) != cfg.k_frames:
            raise RuntimeError(f"{method} selected {len(set(idx))} distinct frames, expected {cfg.k_frames}")
        correct.append(E.answer_oracle(ep, idx, oracle))
        cover.append(E.coverage_fraction(ep, idx))
        if S is not None:
            info.append(compute_rewards(False, True, S, cfg.tau_info).info)
    return MethodResult(
        accuracy=float(np.mean(correct)),
        coverage=float(np.mean(cover)),
        info_mean=float(np.mean(info)) if info else None,
        correct=correct,
    )


def evaluate(episodes, cfg: RunConfig, models: Models | None = None, methods=None) -> EvalReport:
    if not episodes:
        raise DataError("evaluation set is empty")
    methods = list(methods or cfg.method_list)
    results, seconds = {}, {}
    for m in methods:
        t0 = time.perf_counter()
        results[m] = run_baseline(m, episodes, cfg, models)
        seconds[m] = time.perf_counter() - t0
    return EvalReport(results, cfg.k_frames, len(episodes), cfg.seed, cfg.eval_seed, seconds)


def paired_comparison(report: EvalReport, a: str, b: str) -> dict:
    """Per-episode wins/losses of method ``a`` over ``b`` on shared oracle draws."""
    ca = np.array(report.methods[a].correct)
    cb = np.array(report.methods[b].correct)
    return {
        "a": a,
        "b": b,
        "diff": float(ca.mean() - cb.mean()),
        "wins": int(np.sum(ca & ~cb)),
        "losses": int(np.sum(~ca & cb)),
    }


# ------------------------------------------------------------------ end to end


def build_datasets(cfg: RunConfig):
    """Generate training and held-out episodes with pass rates; returns ``(all, hard, eval)``."""
    ecfg = cfg.env_config()
    oracle = cfg.oracle_config()
    train = E.generate_dataset(ecfg, cfg.n_episodes)
    E.label_pass_rates(train, cfg.k_frames, cfg.pass_trials, oracle)
    held = [E.generate_episode(ecfg, i) for i in eval_episode_ids(cfg)]
    E.label_pass_rates(held, cfg.k_frames, cfg.pass_trials, oracle)
    return train, E.hard_subset(train), held


def run_pipeline(cfg: RunConfig):
    """gen -> pretrain -> joint train -> evaluate, in memory. Returns a dict of artifacts."""
    train, hard, held = build_datasets(cfg)
    usable = [ep for ep in train if not ep.excluded]
    pre, pre_res = pretrain_sampler(usable, cfg)
    joint_data = hard if cfg.train_split == "hard" else usable
    pol, joint, joint_res = joint_train(joint_data, cfg, sampler=pre.copy(), policy=initial_policy(cfg))
    models = Models(initial_policy(cfg), pre, pol, joint)
    report = evaluate(held, cfg, models)
    return {
        "train": train,
        "hard": hard,
        "eval": held,
        "models": models,
        "pretrain": pre_res,
        "joint": joint_res,
        "report": report,
    }
