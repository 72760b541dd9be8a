"""Small differentiable building blocks on numpy arrays.

Signals are float64 arrays shaped ``(channels, length)`` or, batched,
``(batch, channels, length)``. Every forward function has an explicit
backward counterpart; there is no autodiff graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ConvLayer",
    "init_conv",
    "conv1d_forward",
    "conv1d_backward",
    "downsample2",
    "downsample2_backward",
    "upsample2",
    "upsample2_backward",
    "relu_forward",
    "relu_backward",
    "AdamState",
    "adam_step",
    "GradCheckReport",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(ValueError):
    pass


@dataclass
class ConvLayer:
    """Dilated 1D convolution with 'same' zero padding."""

    weights: np.ndarray  # (out, in, kernel)
    bias: np.ndarray  # (out,)
    dilation: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError("weights must be (out, in, kernel)")
        if self.kernel_width % 2 != 1:
            raise ValueError("kernel width must be odd")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.bias.shape != (self.out_channels,):
            raise ValueError("bias length must equal out_channels")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[2]

    @property
    def pad(self) -> int:
        return self.dilation * (self.kernel_width - 1) // 2


def init_conv(in_channels, out_channels, kernel_width=3, dilation=1, rng=None, scale=1.0):
    """He-style init: zero-mean normal with variance 2/fan_in, zero bias."""
    rng = np.random.default_rng(rng)
    fan_in = in_channels * kernel_width
    w = rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel_width))
    return ConvLayer(w, np.zeros(out_channels), dilation)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (C, L) or (B, C, L) array, got shape {x.shape}")


def _columns(layer: ConvLayer, xb: np.ndarray) -> np.ndarray:
    # cols[b, i, k, t] = x_pad[b, i, t + k * dilation]
    p, d, length = layer.pad, layer.dilation, xb.shape[2]
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p)))
    return np.stack([xp[:, :, k * d : k * d + length] for k in range(layer.kernel_width)], axis=2)


def conv1d_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != layer.in_channels:
        raise ValueError(f"channel mismatch: layer expects {layer.in_channels}, got {xb.shape[1]}")
    cols = _columns(layer, xb)
    b, c, k, length = cols.shape
    w2 = layer.weights.reshape(layer.out_channels, c * k)
    out = np.matmul(w2, cols.reshape(b, c * k, length)) + layer.bias[None, :, None]
    return out[0] if squeeze else out


def conv1d_backward(layer: ConvLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weights, grad_bias)`` for :func:`conv1d_forward`."""
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    if xb.shape[1] != layer.in_channels:
        raise ValueError("channel mismatch")
    if gb.shape != (xb.shape[0], layer.out_channels, xb.shape[2]):
        raise ValueError(f"grad_out shape {gb.shape} inconsistent with input {xb.shape}")
    cols = _columns(layer, xb)
    b, c, k, length = cols.shape
    cols2 = cols.reshape(b, c * k, length)
    grad_w = np.tensordot(gb, cols2, axes=([0, 2], [0, 2])).reshape(layer.weights.shape)
    grad_b = gb.sum(axis=(0, 2))

    w2 = layer.weights.reshape(layer.out_channels, c * k)
    gcols = np.matmul(w2.T, gb).reshape(b, c, k, length)
    p, d = layer.pad, layer.dilation
    gpad = np.zeros((b, c, length + 2 * p))
    for j in range(k):
        gpad[:, :, j * d : j * d + length] += gcols[:, :, j, :]
    grad_x = gpad[:, :, p : p + length]
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def downsample2(x: np.ndarray):
    """Max over non-overlapping pairs. Returns ``(y, argmax)``; ties go to the left element."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ValueError(f"downsample2 needs an even length, got {x.shape[-1]}")
    pairs = x.reshape(*x.shape[:-1], x.shape[-1] // 2, 2)
    arg = (pairs[..., 1] > pairs[..., 0]).astype(np.int8)
    y = np.where(arg == 1, pairs[..., 1], pairs[..., 0])
    return y, arg


def downsample2_backward(grad_y: np.ndarray, arg: np.ndarray) -> np.ndarray:
    g = np.zeros((*grad_y.shape, 2))
    g[..., 0] = np.where(arg == 0, grad_y, 0.0)
    g[..., 1] = np.where(arg == 1, grad_y, 0.0)
    return g.reshape(*grad_y.shape[:-1], grad_y.shape[-1] * 2)


def upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(x, dtype=np.float64), 2, axis=-1)


def upsample2_backward(grad_y: np.ndarray) -> np.ndarray:
    if grad_y.shape[-1] % 2:
        raise ValueError("upsample2 gradient must have even length")
    return grad_y.reshape(*grad_y.shape[:-1], grad_y.shape[-1] // 2, 2).sum(axis=-1)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_y):
    # subgradient 0 at exactly 0
    return np.where(x > 0, grad_y, 0.0)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam descent step; mutates ``params`` and ``state`` in place."""
    if set(grads) != set(params):
        raise ValueError("params and grads must have the same keys")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {grads[name].shape} vs {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state for {name} has the wrong shape")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict  # name -> max relative error
    n_checked: int
    n_skipped: int = 0  # coordinates whose perturbation crossed a kink

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = 1e-4,
    max_coords: int = 1000,
    floor: float = 1e-6,
    rng=0,
    signature: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``f``.

    ``f`` is called with no arguments and must read ``params`` (which are
    perturbed in place and restored). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. Arrays with more than ``max_coords``
    entries are checked on a random subset of that size.

    For piecewise-linear models pass ``signature``, a callable returning the
    current activation pattern; coordinates whose two perturbations land on
    different linear pieces are skipped, since the derivative is not defined
    across the kink.
    """
    rng = np.random.default_rng(rng)
    per_param = {}
    n_checked = n_skipped = 0
    for name, arr in params.items():
        p = arr.reshape(-1)
        if p.size > max_coords:
            picks = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        else:
            picks = np.arange(p.size)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        worst = 0.0
        for j in picks:
            old = p[j]
            p[j] = old + step
            fp = f()
            sp = signature() if signature is not None else None
            p[j] = old - step
            fm = f()
            sm = signature() if signature is not None else None
            p[j] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {name}[{j}]")
            if sp != sm:
                n_skipped += 1
                continue
            num = (fp - fm) / (2.0 * step)
            a = a_flat[j]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            n_checked += 1
        per_param[name] = worst
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, n_checked, n_skipped)


_MAGIC = "KFRL-CKPT 1"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    """Write named float64 arrays: text header, then little-endian row-major payloads."""
    lines = [_MAGIC, f"meta {len(meta or {})}"]
    for k, v in (meta or {}).items():
        if any(ch.isspace() for ch in f"{k}{v}"):
            raise CheckpointError("meta keys and values must not contain whitespace")
        lines.append(f"{k} {v}")
    lines.append(f"arrays {len(arrays)}")
    for name, a in arrays.items():
        a = np.asarray(a)
        lines.append(" ".join([name, str(a.ndim), *map(str, a.shape)]))
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        lines = data[8 : 8 + hlen].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError(f"not a checkpoint (expected header {_MAGIC!r})")
    try:
        n_meta = int(lines[1].split()[1])
        meta = dict(line.split(" ", 1) for line in lines[2 : 2 + n_meta])
        n_arr = int(lines[2 + n_meta].split()[1])
        specs = lines[3 + n_meta : 3 + n_meta + n_arr]
    except (IndexError, ValueError) as exc:
        raise CheckpointError("malformed checkpoint header") from exc
    arrays = {}
    pos = 8 + hlen
    for spec in specs:
        name, ndim, *dims = spec.split()
        shape = tuple(int(d) for d in dims)
        if len(shape) != int(ndim):
            raise CheckpointError(f"bad shape descriptor for {name}")
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError("checkpoint payload truncated")
        arrays[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return arrays, meta
