"""Synthetic long-video QA episodes.

An episode is a frame axis with a few planted events (non-overlapping
windows tagged with a concept id), a noisy hint vector over concepts
standing in for the question text, and a multiple-choice answer. Queries
are concept ids; a query's similarity row is elevated over the windows of
matching events. Answer correctness is a coin flip whose bias grows
linearly with the fraction of events covered by the selected frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

S_MIN = 0.001
S_MAX = 1.0
BASELINE = 0.1
PLATEAU = 0.9
MAX_QUERIES = 4

# stream tags keep RNG streams for different purposes disjoint
_EPISODE, _SIMILARITY, _ORACLE, _PASS, _GENERIC = 0, 1, 2, 3, 4


class FormatError(ValueError):
    """Raised for malformed matrix or episode files."""


@dataclass(frozen=True)
class Event:
    concept_id: int
    start: int
    end: int  # exclusive

    @property
    def width(self) -> int:
        return self.end - self.start


@dataclass
class EpisodeSpec:
    episode_id: int
    n_frames: int
    hop_count: int
    events: list
    vocab_size: int
    hint: np.ndarray
    correct_option: int
    pass_rate: float | None = None
    group_id: int = 0

    def __post_init__(self):
        self.hint = np.asarray(self.hint, dtype=np.float64)
        self.events = [e if isinstance(e, Event) else Event(**e) for e in self.events]
        if self.n_frames < 16:
            raise ValueError("n_frames must be >= 16")
        if self.hop_count != len(self.events):
            raise ValueError("hop_count must equal the number of events")
        if self.hint.shape != (self.vocab_size,) or not np.all(np.isfinite(self.hint)):
            raise ValueError("hint must be a finite vector of length vocab_size")
        last = 0
        for e in sorted(self.events, key=lambda e: e.start):
            if not (0 <= e.start < e.end <= self.n_frames):
                raise ValueError(f"event window {e} outside [0, {self.n_frames})")
            if e.start < last:
                raise ValueError("event windows overlap")
            if not 0 <= e.concept_id < self.vocab_size:
                raise ValueError("event concept id outside vocabulary")
            last = e.end

    @property
    def relevant_concepts(self) -> list:
        return [e.concept_id for e in self.events]

    @property
    def excluded(self) -> bool:
        """All-pass questions carry no learning signal and are dropped."""
        return self.pass_rate is not None and self.pass_rate >= 1.0

    def key_mask(self) -> np.ndarray:
        m = np.zeros(self.n_frames, dtype=bool)
        for e in self.events:
            m[e.start : e.end] = True
        return m

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "group_id": self.group_id,
            "n_frames": self.n_frames,
            "hop_count": self.hop_count,
            "events": [asdict(e) for e in self.events],
            "vocab_size": self.vocab_size,
            "hint": [float(h) for h in self.hint],
            "correct_option": self.correct_option,
            "pass_rate": self.pass_rate,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EpisodeSpec":
        return cls(**rec)


@dataclass
class EnvConfig:
    seed: int = 0
    n_frames: int = 128
    vocab_size: int = 16
    hop_probs: tuple = (0.3, 0.4, 0.3)  # P(h=1), P(h=2), P(h=3)
    event_width: tuple = (2, 6)  # inclusive range
    hint_noise: float = 0.35
    sim_noise: float = 0.15
    height_jitter: float = 0.3
    spike_rate: float = 0.06
    spike_height: float = 0.4
    questions_per_video: int = 4

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be >= 8")
        if self.n_frames < 16:
            raise ValueError("n_frames must be >= 16")
        if len(self.hop_probs) != 3 or abs(sum(self.hop_probs) - 1.0) > 1e-9 or min(self.hop_probs) < 0:
            raise ValueError("hop_probs must be three probabilities for h = 1, 2, 3")
        lo, hi = self.event_width
        if not 1 <= lo <= hi:
            raise ValueError("event_width must satisfy 1 <= lo <= hi")


@dataclass
class OracleConfig:
    p_hit: float = 0.9
    chance_floor: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if not self.chance_floor < self.p_hit <= 1.0:
            raise ValueError("need chance_floor < p_hit <= 1")


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (n_queries, n_frames)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("similarity values must be a 2D grid")
        if not 1 <= self.values.shape[0] <= MAX_QUERIES:
            raise ValueError(f"n_queries must be in [1, {MAX_QUERIES}]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("similarity matrix contains non-finite entries")
        if self.values.min() < S_MIN or self.values.max() > S_MAX:
            raise ValueError(f"similarity entries must lie in [{S_MIN}, {S_MAX}]")

    @property
    def n_queries(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_cosine(cls, cosine) -> "SimilarityMatrix":
        """Map raw cosine similarities in [-1, 1] into the positive working range."""
        return cls(np.clip((np.asarray(cosine, dtype=np.float64) + 1.0) / 2.0, S_MIN, S_MAX))


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _place_events(rng, n_frames, widths):
    # random composition of the free frames into len(widths)+1 gaps
    free = n_frames - sum(widths)
    cuts = np.sort(rng.integers(0, free + 1, size=len(widths)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    starts, pos = [], 0
    for gap, w in zip(gaps, widths):
        pos += int(gap)
        starts.append(pos)
        pos += w
    return starts


def generate_episode(config: EnvConfig, episode_id: int) -> EpisodeSpec:
    lo, hi = config.event_width
    max_hop = max(h + 1 for h, p in enumerate(config.hop_probs) if p > 0)
    if max_hop * hi > config.n_frames:
        raise ValueError(f"{max_hop} events of width up to {hi} cannot fit in {config.n_frames} frames")
    rng = _stream(config.seed, _EPISODE, episode_id)
    hop = int(rng.choice(3, p=config.hop_probs)) + 1
    widths = [int(w) for w in rng.integers(lo, hi + 1, size=hop)]
    starts = _place_events(rng, config.n_frames, widths)
    concepts = rng.choice(config.vocab_size, size=hop, replace=False)
    events = [Event(int(c), s, s + w) for c, s, w in zip(concepts, starts, widths)]
    hint = rng.normal(0.0, config.hint_noise, size=config.vocab_size)
    hint[concepts] += 1.0
    return EpisodeSpec(
        episode_id=episode_id,
        n_frames=config.n_frames,
        hop_count=hop,
        events=events,
        vocab_size=config.vocab_size,
        hint=hint,
        correct_option=int(rng.integers(4)),
        group_id=episode_id // config.questions_per_video,
    )


def generate_dataset(config: EnvConfig, n_episodes: int, first_id: int = 0) -> list:
    return [generate_episode(config, i) for i in range(first_id, first_id + n_episodes)]


def synthesize_similarity(
    episode: EpisodeSpec,
    queries: Sequence[int],
    noise: float = 0.0,
    *,
    height_jitter: float = 0.0,
    spike_rate: float = 0.0,
    spike_height: float = PLATEAU,
    seed: int | Sequence[int] = 0,
) -> SimilarityMatrix:
    """Build the query-by-frame similarity grid for ``queries``.

    Each row sits at ``BASELINE`` off-window and ``PLATEAU`` on the windows of
    events whose concept matches the query. ``height_jitter`` lowers a matched
    row's plateau by a uniform fraction in ``[0, height_jitter)``;
    ``spike_rate`` marks "generic" frames that score ``spike_height`` against
    every query (the same frames for all rows);
    ``noise`` is the std of multiplicative log-normal noise on every entry. The result is clamped to
    ``[S_MIN, S_MAX]``.
    """
    queries = [int(q) for q in queries]
    if not 1 <= len(queries) <= MAX_QUERIES:
        raise ValueError(f"need between 1 and {MAX_QUERIES} queries, got {len(queries)}")
    seed = [seed] if np.isscalar(seed) else list(seed)
    n = episode.n_frames
    rows = np.full((len(queries), n), BASELINE)
    generic = np.zeros(n, dtype=bool)
    if spike_rate > 0:
        generic = _stream(*seed, _GENERIC, episode.episode_id).random(n) < spike_rate
    for j, q in enumerate(queries):
        # a row depends only on (episode, concept), like an embedding lookup would
        rng = _stream(*seed, _SIMILARITY, episode.episode_id, q)
        height = PLATEAU
        if height_jitter > 0:
            height = BASELINE + (PLATEAU - BASELINE) * (1.0 - height_jitter * rng.random())
        for e in episode.events:
            if e.concept_id == q:
                rows[j, e.start : e.end] = height
        rows[j, generic] = np.maximum(rows[j, generic], spike_height)
        if noise > 0:
            rows[j] *= np.exp(rng.normal(0.0, noise, size=n))
    return SimilarityMatrix(np.clip(rows, S_MIN, S_MAX))


def coverage_fraction(episode: EpisodeSpec, selected: Iterable[int]) -> float:
    sel = np.asarray(list(selected), dtype=np.int64)
    hit = sum(bool(np.any((sel >= e.start) & (sel < e.end))) for e in episode.events)
    return hit / episode.hop_count


def correct_probability(episode: EpisodeSpec, selected, config: OracleConfig) -> float:
    f = coverage_fraction(episode, selected)
    return config.chance_floor + f * (config.p_hit - config.chance_floor)


def oracle_stream(config: OracleConfig, episode_id: int, *key) -> np.random.Generator:
    """The dedicated RNG stream for one oracle call, keyed by the caller."""
    return _stream(config.rng_seed, _ORACLE, episode_id, *key)


def answer_oracle(episode: EpisodeSpec, selected_frames, config: OracleConfig, rng=None) -> bool:
    """Simulate the answerer on the selected frames.

    With ``rng=None`` the stream is derived from ``(config.rng_seed,
    episode_id)`` so that every caller scoring the same episode consumes the
    same uniform draw; coverage then only moves the threshold.
    """
    sel = [int(i) for i in selected_frames]
    if len(set(sel)) != len(sel):
        raise ValueError("selected frames must be distinct")
    if any(not 0 <= i < episode.n_frames for i in sel):
        raise ValueError("selected frame outside the episode")
    if rng is None:
        rng = oracle_stream(config, episode.episode_id)
    return bool(rng.random() < correct_probability(episode, sel, config))


def uniform_random_frames(rng, n_frames: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(n_frames, size=k, replace=False))


def estimate_pass_rate(episode: EpisodeSpec, k: int, trials: int = 8, config: OracleConfig | None = None) -> float:
    """Fraction of ``trials`` uniform random k-frame draws the oracle answers correctly."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    config = config or OracleConfig()
    rng = _stream(config.rng_seed, _PASS, episode.episode_id)
    correct = 0
    for _ in range(trials):
        frames = uniform_random_frames(rng, episode.n_frames, k)
        correct += answer_oracle(episode, frames, config, rng=rng)
    return correct / trials


def label_pass_rates(episodes, k: int, trials: int = 8, config: OracleConfig | None = None) -> None:
    for ep in episodes:
        ep.pass_rate = estimate_pass_rate(ep, k, trials, config)


def hard_subset(episodes) -> list:
    """Lowest-pass-rate episode per video group (first one on ties)."""
    best = {}
    for ep in episodes:
        cur = best.get(ep.group_id)
        if cur is None or ep.pass_rate < cur.pass_rate:
            best[ep.group_id] = ep
    return [best[g] for g in sorted(best)]


# ---------------------------------------------------------------- file formats


def write_matrix(path, matrix: SimilarityMatrix) -> None:
    lines = ["SIMMAT 1", f"{matrix.n_queries} {matrix.n_frames}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in matrix.values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_matrix(path) -> SimilarityMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "SIMMAT 1":
        raise FormatError("missing 'SIMMAT 1' header")
    try:
        n_q, n_f = (int(t) for t in lines[1].split())
    except (IndexError, ValueError) as exc:
        raise FormatError("malformed dimension line") from exc
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != n_q:
        raise FormatError(f"dimension mismatch: header says {n_q} rows, found {len(rows)}")
    values = []
    for r, ln in enumerate(rows):
        toks = ln.split()
        if len(toks) != n_f:
            raise FormatError(f"dimension mismatch: row {r} has {len(toks)} entries, expected {n_f}")
        try:
            row = [float(t) for t in toks]
        except ValueError as exc:
            raise FormatError(f"row {r}: unparseable entry") from exc
        if not all(math.isfinite(v) for v in row):
            raise FormatError(f"row {r}: non-finite entry")
        values.append(row)
    try:
        return SimilarityMatrix(np.array(values))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_episodes(path, episodes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record()) + "\n")


def read_episodes(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EpisodeSpec.from_record(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{n}: {exc}") from exc
    return out
