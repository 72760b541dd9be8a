"""1D U-Net key-frame sampler and sequential sampling without replacement.

The network reads a similarity matrix with queries as input channels and
emits one logit per frame. Frames are then drawn one at a time from a
softmax over the frames not yet taken, so the recorded log-probability is
the exact probability of the ordered draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import MAX_QUERIES, SimilarityMatrix

ENC_CHANNELS = (32, 64, 128, 256)
ENC_DILATIONS = (1, 2, 4, 8)
DEC_CHANNELS = (256, 128, 64, 32)
LENGTH_MULTIPLE = 2 ** len(ENC_CHANNELS)
IN_CHANNELS = MAX_QUERIES


class StaleCacheError(RuntimeError):
    pass


@dataclass
class SamplerParams:
    """Named weight arrays of the U-Net. ``version`` bumps on every update."""

    arrays: dict
    version: int = 0

    def layer(self, name: str, dilation: int = 1) -> nn.ConvLayer:
        return nn.ConvLayer(self.arrays[f"{name}.w"], self.arrays[f"{name}.b"], dilation)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "SamplerParams":
        return SamplerParams({k: v.copy() for k, v in self.arrays.items()}, self.version)

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.arrays, {"kind": "sampler"})

    @classmethod
    def load(cls, path) -> "SamplerParams":
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "sampler":
            raise nn.CheckpointError(f"{path} is not a sampler checkpoint")
        expected = init_sampler(0).arrays
        if {k: v.shape for k, v in arrays.items()} != {k: v.shape for k, v in expected.items()}:
            raise nn.CheckpointError(f"{path}: layer shapes do not match the sampler architecture")
        return cls(arrays)


def init_sampler(rng=None, head_scale: float = 0.01) -> SamplerParams:
    """Fan-in scaled normal weights, zero biases, and a near-zero head.

    The small head keeps the initial score vector nearly constant so the
    untrained sampler draws close to uniformly.
    """
    rng = np.random.default_rng(rng)
    arrays = {}
    c_in = IN_CHANNELS
    for i, (c, d) in enumerate(zip(ENC_CHANNELS, ENC_DILATIONS)):
        layer = nn.init_conv(c_in, c, 3, d, rng)
        arrays[f"enc{i}.w"], arrays[f"enc{i}.b"] = layer.weights, layer.bias
        c_in = c
    for j, c in enumerate(DEC_CHANNELS):
        skip = ENC_CHANNELS[len(ENC_CHANNELS) - 1 - j]
        layer = nn.init_conv(c_in + skip, c, 3, 1, rng)
        arrays[f"dec{j}.w"], arrays[f"dec{j}.b"] = layer.weights, layer.bias
        c_in = c
    head = nn.init_conv(c_in, 1, 1, 1, rng, scale=head_scale)
    arrays["head.w"], arrays["head.b"] = head.weights, head.bias
    return SamplerParams(arrays)


def pad_queries(S: SimilarityMatrix | np.ndarray) -> np.ndarray:
    """Copy the query rows into a ``(4, N_f)`` block, zero-filling missing rows."""
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if values.shape[0] > IN_CHANNELS:
        raise ValueError(f"at most {IN_CHANNELS} queries are supported, got {values.shape[0]}")
    out = np.zeros((IN_CHANNELS, values.shape[1]))
    out[: values.shape[0]] = values
    return out


@dataclass
class ForwardCache:
    version: int
    n_frames: int
    conv_inputs: list = field(default_factory=list)
    pre_acts: list = field(default_factory=list)
    pool_args: list = field(default_factory=list)
    head_input: np.ndarray | None = None


def _padded_length(n: int) -> int:
    return -(-n // LENGTH_MULTIPLE) * LENGTH_MULTIPLE


def forward_batch(params: SamplerParams, x: np.ndarray):
    """Scores for a batch ``x`` of shape ``(B, 4, N_f)``; returns ``(scores (B, N_f), cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != IN_CHANNELS:
        raise ValueError(f"expected input of shape (B, {IN_CHANNELS}, N_f), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("sampler input contains non-finite values")
    n = x.shape[2]
    if n < LENGTH_MULTIPLE:
        raise ValueError(f"need at least {LENGTH_MULTIPLE} frames, got {n}")
    # sentinel columns (all-zero similarity) pad the length to a multiple of 16
    h = np.pad(x, ((0, 0), (0, 0), (0, _padded_length(n) - n)))
    cache = ForwardCache(params.version, n)
    skips = []
    for i, d in enumerate(ENC_DILATIONS):
        cache.conv_inputs.append(h)
        a = nn.conv1d_forward(params.layer(f"enc{i}", d), h)
        cache.pre_acts.append(a)
        r = nn.relu_forward(a)
        skips.append(r)
        h, arg = nn.downsample2(r)
        cache.pool_args.append(arg)
    for j in range(len(DEC_CHANNELS)):
        cat = np.concatenate([nn.upsample2(h), skips[-1 - j]], axis=1)
        cache.conv_inputs.append(cat)
        a = nn.conv1d_forward(params.layer(f"dec{j}"), cat)
        cache.pre_acts.append(a)
        h = nn.relu_forward(a)
    cache.head_input = h
    scores = nn.conv1d_forward(params.layer("head"), h)[:, 0, :n]
    return scores, cache


def sampler_forward(params: SamplerParams, S: SimilarityMatrix):
    """Per-frame logits for one similarity matrix; returns ``(scores, cache)``."""
    scores, cache = forward_batch(params, pad_queries(S)[None])
    return scores[0], cache


def backward_batch(params: SamplerParams, cache: ForwardCache, grad_scores: np.ndarray) -> dict:
    """Gradients of ``sum(grad_scores * scores)`` with respect to every weight array."""
    if cache.version != params.version:
        raise StaleCacheError("forward cache was computed with an older parameter version")
    grad_scores = np.asarray(grad_scores, dtype=np.float64)
    b, n = grad_scores.shape
    if n != cache.n_frames or b != cache.head_input.shape[0]:
        raise ValueError("grad_scores shape does not match the cached forward pass")
    grads = {}
    g = np.zeros((b, 1, cache.head_input.shape[2]))
    g[:, 0, :n] = grad_scores
    g, grads["head.w"], grads["head.b"] = nn.conv1d_backward(params.layer("head"), cache.head_input, g)

    n_enc = len(ENC_CHANNELS)
    skip_grads = [None] * n_enc
    for j in reversed(range(len(DEC_CHANNELS))):
        idx = n_enc + j
        g = nn.relu_backward(cache.pre_acts[idx], g)
        g, grads[f"dec{j}.w"], grads[f"dec{j}.b"] = nn.conv1d_backward(
            params.layer(f"dec{j}"), cache.conv_inputs[idx], g
        )
        up_ch = g.shape[1] - ENC_CHANNELS[n_enc - 1 - j]
        skip_grads[n_enc - 1 - j] = g[:, up_ch:]
        g = g[:, :up_ch]
        # the decoder ran j = 0..3 in order, so walking back hands g to decoder j-1
        g = nn.upsample2_backward(g)
    for i in reversed(range(n_enc)):
        g = nn.downsample2_backward(g, cache.pool_args[i]) + skip_grads[i]
        g = nn.relu_backward(cache.pre_acts[i], g)
        g, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = nn.conv1d_backward(
            params.layer(f"enc{i}", ENC_DILATIONS[i]), cache.conv_inputs[i], g
        )
    return grads


def activation_pattern(cache: ForwardCache) -> bytes:
    """ReLU on/off bits and pooling choices of a forward pass: the network's linear piece."""
    parts = [np.packbits(a > 0) for a in cache.pre_acts] + [np.packbits(a) for a in cache.pool_args]
    return b"".join(p.tobytes() for p in parts)


# ------------------------------------------------------------ frame drawing


@dataclass
class FrameDraw:
    indices: list
    step_logprobs: list
    total_logprob: float
    temperature: float = 1.0


def _log_softmax_masked(z: np.ndarray, available: np.ndarray) -> np.ndarray:
    zm = np.where(available, z, -np.inf)
    top = zm.max()
    return zm - (top + np.log(np.exp(zm - top).sum()))


def _nucleus(logp: np.ndarray, top_p: float) -> np.ndarray:
    # smallest set of highest-probability entries whose mass reaches top_p
    order = np.argsort(-logp, kind="stable")
    mass = np.cumsum(np.exp(logp[order]))
    keep = order[: int(np.searchsorted(mass, top_p) + 1)]
    mask = np.zeros(logp.shape, dtype=bool)
    mask[keep] = True
    return mask


def _step_distributions(scores, indices, temperature, top_p=None):
    """Yield ``(available_mask, log_probs)`` for each step of a given ordered draw."""
    z = np.asarray(scores, dtype=np.float64) / temperature
    available = np.ones(z.shape, dtype=bool)
    for idx in indices:
        logp = _log_softmax_masked(z, available)
        if top_p is not None and top_p < 1.0:
            support = _nucleus(logp, top_p) & available
            logp = _log_softmax_masked(z, support)
            yield support, logp
        else:
            yield available.copy(), logp
        available[idx] = False


def _check_draw_args(scores, k, temperature):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be a finite vector")
    if not 1 <= k <= scores.size:
        raise ValueError(f"k must be in [1, {scores.size}], got {k}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return scores


def sample_without_replacement(scores, k: int, temperature: float = 1.0, rng=None, top_p: float | None = None) -> FrameDraw:
    """Draw ``k`` distinct indices by repeated masked-softmax sampling."""
    scores = _check_draw_args(scores, k, temperature)
    rng = np.random.default_rng(rng)
    z = scores / temperature
    available = np.ones(scores.size, dtype=bool)
    indices, logps = [], []
    for _ in range(k):
        logp = _log_softmax_masked(z, available)
        if top_p is not None and top_p < 1.0:
            logp = _log_softmax_masked(z, _nucleus(logp, top_p) & available)
        p = np.exp(logp)
        idx = int(rng.choice(scores.size, p=p / p.sum()))
        indices.append(idx)
        logps.append(float(logp[idx]))
        available[idx] = False
    return FrameDraw(indices, logps, float(sum(logps)), temperature)


def sample_many(scores, k: int, n: int, temperature: float = 1.0, rng=None):
    """``n`` independent draws of :func:`sample_without_replacement` at once.

    Same sequential masked-softmax procedure, vectorised over draws. Returns
    ``(indices (n, k), total_logprob (n,))``.
    """
    scores = _check_draw_args(scores, k, temperature)
    rng = np.random.default_rng(rng)
    z = np.broadcast_to(scores / temperature, (n, scores.size))
    available = np.ones((n, scores.size), dtype=bool)
    rows = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    total = np.zeros(n)
    for step in range(k):
        zm = np.where(available, z, -np.inf)
        top = zm.max(axis=1, keepdims=True)
        logp = zm - (top + np.log(np.exp(zm - top).sum(axis=1, keepdims=True)))
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(n) * cdf[:, -1]
        idx = np.minimum((cdf <= u[:, None]).sum(axis=1), scores.size - 1)
        # never land on a masked entry through round-off
        bad = ~available[rows, idx]
        if np.any(bad):
            idx[bad] = np.argmax(np.where(available[bad], logp[bad], -np.inf), axis=1)
        out[:, step] = idx
        total += logp[rows, idx]
        available[rows, idx] = False
    return out, total


def draw_logprob(scores, indices, temperature: float = 1.0, top_p: float | None = None) -> float:
    """Log-probability of an ordered draw under sequential masked softmax."""
    return float(sum(logp[i] for (_, logp), i in zip(_step_distributions(scores, indices, temperature, top_p), indices)))


def greedy_select(scores, k: int, temperature: float = 1.0) -> FrameDraw:
    """Top-k by repeated argmax; ties go to the lower index."""
    scores = _check_draw_args(scores, k, temperature)
    indices = [int(i) for i in np.argsort(-scores, kind="stable")[:k]]
    logps = [float(logp[i]) for (_, logp), i in zip(_step_distributions(scores, indices, temperature), indices)]
    return FrameDraw(indices, logps, float(sum(logps)), temperature)


def draw_logprob_grad(scores, indices, temperature: float = 1.0, top_p: float | None = None) -> np.ndarray:
    """d(total log-probability)/d(scores) for a fixed ordered draw."""
    grad = np.zeros(np.asarray(scores).shape)
    for (support, logp), idx in zip(_step_distributions(scores, indices, temperature, top_p), indices):
        p = np.where(support, np.exp(logp), 0.0)
        grad -= p
        grad[idx] += 1.0
    return grad / temperature


def reinforce_backward(params: SamplerParams, cache: ForwardCache, scores, draws, advantages, top_p=None) -> dict:
    """Gradients of ``-sum_b advantage_b * log p(draw_b)`` for a cached batch forward.

    ``scores`` is the ``(B, N_f)`` output of :func:`forward_batch` (or a
    single vector with one draw). Divide by the batch size for a mean.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if isinstance(draws, FrameDraw):
        draws = [draws]
    advantages = np.atleast_1d(np.asarray(advantages, dtype=np.float64))
    if not len(draws) == len(advantages) == scores.shape[0]:
        raise ValueError("need one draw and one advantage per batch row")
    g = np.zeros_like(scores)
    for b, (draw, adv) in enumerate(zip(draws, advantages)):
        if adv != 0.0:
            g[b] = -adv * draw_logprob_grad(scores[b], draw.indices, draw.temperature, top_p)
    return backward_batch(params, cache, g)


def adam_update(params: SamplerParams, grads: dict, state: nn.AdamState) -> None:
    nn.adam_step(params.arrays, grads, state)
    params.version += 1
