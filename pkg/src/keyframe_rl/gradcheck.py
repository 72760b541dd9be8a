"""Finite-difference checks for every hand-written backward pass.

Each check builds a scalar objective ``sum(w * f(x))`` with a random
projection ``w`` so that every output coordinate carries gradient, then
compares the analytic gradient with central differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import nn
from . import sampler as U
from .policy import PolicyParams, Trajectory, grpo_objective, sample_queries

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    report: nn.GradCheckReport

    @property
    def max_rel_error(self) -> float:
        return self.report.max_rel_error

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.report.passed(tol)


@contextlib.contextmanager
def inject_bias_fault(scale: float = 1.5):
    """Test hook: scale every conv bias gradient by ``scale`` while active."""
    original = nn.conv1d_backward

    def faulty(layer, x, grad_out):
        gx, gw, gb = original(layer, x, grad_out)
        return gx, gw, gb * scale

    nn.conv1d_backward = faulty
    try:
        yield
    finally:
        nn.conv1d_backward = original


def check_conv(dilation: int, seed: int = 0, length: int = 12) -> CheckResult:
    rng = np.random.default_rng(seed)
    layer = nn.init_conv(3, 4, dilation=dilation, rng=rng)
    x = rng.normal(size=(2, 3, length))
    w = rng.normal(size=(2, 4, length))
    gx, gw, gb = nn.conv1d_backward(layer, x, w)
    params = {"weights": layer.weights, "bias": layer.bias, "input": x}

    def f():
        return float(np.sum(w * nn.conv1d_forward(layer, x)))

    rep = nn.grad_check(f, params, {"weights": gw, "bias": gb, "input": gx}, rng=seed)
    return CheckResult(f"conv1d(d={dilation})", rep)


def _unary_check(name, forward, backward, x, seed):
    rng = np.random.default_rng(seed + 1)
    w = rng.normal(size=np.shape(forward(x)))
    g = backward(x, w)

    def f():
        return float(np.sum(w * forward(x)))

    return CheckResult(name, nn.grad_check(f, {"input": x}, {"input": g}, rng=seed))


def check_relu(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    # keep inputs away from the kink so the step never crosses it
    x = rng.choice([-1.0, 1.0], size=(2, 3, 10)) * rng.uniform(0.1, 1.0, size=(2, 3, 10))
    return _unary_check("relu", nn.relu_forward, nn.relu_backward, x, seed)


def check_downsample(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 10))
    fwd = lambda v: nn.downsample2(v)[0]
    bwd = lambda v, g: nn.downsample2_backward(g, nn.downsample2(v)[1])
    return _unary_check("downsample2", fwd, bwd, x, seed)


def check_upsample(seed: int = 0) -> CheckResult:
    x = np.random.default_rng(seed).normal(size=(2, 3, 5))
    return _unary_check("upsample2", nn.upsample2, lambda v, g: nn.upsample2_backward(g), x, seed)


def _sampler_fixture(seed, n_frames):
    rng = np.random.default_rng(seed)
    params = U.init_sampler(rng, head_scale=1.0)
    x = rng.random((1, U.IN_CHANNELS, n_frames))
    return params, x, rng


def check_unet(seed: int = 0, n_frames: int = 16, max_coords: int = 24) -> list:
    """One result per layer of the full sampler network."""
    params, x, rng = _sampler_fixture(seed, n_frames)
    w = rng.normal(size=(1, n_frames))
    _, cache = U.forward_batch(params, x)
    grads = U.backward_batch(params, cache, w)

    last = {}

    def f():
        scores, last["cache"] = U.forward_batch(params, x)
        return float(np.sum(w * scores))

    rep = nn.grad_check(f, params.arrays, grads, max_coords=max_coords, rng=seed, signature=lambda: U.activation_pattern(last["cache"]))
    return _per_layer("unet", rep)


def check_reinforce(seed: int = 0, n_frames: int = 16, k: int = 3, max_coords: int = 16) -> list:
    """REINFORCE loss ``-sum_b A_b log p(draw_b)`` for fixed draws."""
    params, x, rng = _sampler_fixture(seed, n_frames)
    x = np.concatenate([x, rng.random((1, U.IN_CHANNELS, n_frames))])
    scores, cache = U.forward_batch(params, x)
    draws = [U.sample_without_replacement(s, k, rng=rng) for s in scores]
    adv = rng.normal(size=len(draws))
    grads = U.reinforce_backward(params, cache, scores, draws, adv)

    last = {}

    def f():
        sc, last["cache"] = U.forward_batch(params, x)
        return -float(sum(a * U.draw_logprob(s, d.indices) for a, s, d in zip(adv, sc, draws)))

    rep = nn.grad_check(f, params.arrays, grads, max_coords=max_coords, rng=seed, signature=lambda: U.activation_pattern(last["cache"]))
    return _per_layer("reinforce", rep)


def check_grpo(seed: int = 0, vocab: int = 6, group: int = 4) -> CheckResult:
    """Clipped surrogate at the snapshot point (ratio 1, clipping inactive)."""
    rng = np.random.default_rng(seed)
    params = PolicyParams(rng.normal(size=(vocab, vocab)), rng.normal(size=vocab))
    trajs = []
    for _ in range(group):
        hint = rng.normal(size=vocab)
        qs = sample_queries(params.weights @ hint + params.bias, int(rng.integers(1, 4)), rng=rng)
        trajs.append(Trajectory(hint, qs, qs.total_logprob, float(rng.normal())))
    _, grad = grpo_objective(params, trajs)

    def f():
        return grpo_objective(params, trajs)[0]

    return CheckResult("grpo", nn.grad_check(f, params.arrays, grad, rng=seed))


def _per_layer(prefix, rep):
    layers = {}
    for name, err in rep.per_param.items():
        layer = name.split(".")[0]
        layers[layer] = max(layers.get(layer, 0.0), err)
    return [
        CheckResult(f"{prefix}:{layer}", nn.GradCheckReport(err, {layer: err}, rep.n_checked, rep.n_skipped))
        for layer, err in layers.items()
    ]


def run_suite(seed: int = 0) -> list:
    """Every check; returns a flat list of :class:`CheckResult`."""
    out = [check_conv(d, seed) for d in U.ENC_DILATIONS]
    out += [check_relu(seed), check_downsample(seed), check_upsample(seed)]
    out += check_unet(seed)
    out += check_reinforce(seed)
    out.append(check_grpo(seed))
    return out
