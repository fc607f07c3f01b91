"""Dense networks with hand-written backward passes, AdamW and gradient checks.

Everything runs on batch-first float64 arrays. A network is a stack of
``Linear -> LayerNorm -> ReLU`` blocks followed by one or more linear heads
that all read the last hidden activation.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, TrainingError, UsageError

LN_EPS = 1e-5
HEAD_INIT_SCALE = 0.01


def as_float(x) -> np.ndarray:
    """float64 view of ``x``; wider float dtypes (used by gradient oracles) pass through."""
    x = np.asarray(x)
    if x.dtype == np.longdouble:
        return x
    return x.astype(np.float64, copy=False)


class Parameter:
    """A trainable array together with its gradient and AdamW moments."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _uniform(rng: np.random.Generator, fan_in: int, shape, scale: float = 1.0) -> np.ndarray:
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                 scale: float = 1.0, zero_bias: bool = False):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(f"{name}.weight", _uniform(rng, in_dim, (in_dim, out_dim), scale))
        bias = np.zeros(out_dim) if zero_bias else _uniform(rng, in_dim, (out_dim,), scale)
        self.bias = Parameter(f"{name}.bias", bias)

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.value + self.bias.value

    def backward(self, x: np.ndarray, dy: np.ndarray, accumulate: bool = True) -> np.ndarray:
        if accumulate:
            self.weight.grad += x.T @ dy
            self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.gain = Parameter(f"{name}.gain", np.ones(dim))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim))

    def params(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def forward(self, x: np.ndarray):
        return layer_norm(x, self.gain.value, self.bias.value)

    def backward(self, cache, dy: np.ndarray, accumulate: bool = True) -> np.ndarray:
        xhat, inv_std = cache
        if accumulate:
            self.gain.grad += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
            self.bias.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return layer_norm_backward(dy * self.gain.value, xhat, inv_std)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Normalize over the last axis. Returns ``(y, (xhat, inv_std))``."""
    x = as_float(x)
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise DimensionError(f"layer_norm: input width {x.shape[-1]} vs gain {gain.shape}, bias {bias.shape}")
    n = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / n
    var = np.square(xc).sum(axis=-1, keepdims=True) / n
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def layer_norm_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the LayerNorm input given the gradient w.r.t. ``xhat``."""
    n = xhat.shape[-1]
    return inv_std / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )


@dataclass
class ForwardCache:
    net: "MlpNetwork"
    version: int
    x: np.ndarray
    blocks: list = field(default_factory=list)  # (linear_in, ln_cache, relu_mask) per block
    last: np.ndarray | None = None


class MlpNetwork:
    """``hidden_layers`` blocks of Linear+LayerNorm+ReLU feeding ``len(head_dims)`` heads.

    With ``hidden_layers=0`` the heads read the raw input, which gives a plain
    affine map.
    """

    def __init__(self, in_dim: int, head_dims: Sequence[int], hidden_units: int = 256,
                 hidden_layers: int = 2, rng: np.random.Generator | None = None,
                 name: str = "mlp"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.in_dim = in_dim
        self.head_dims = tuple(int(d) for d in head_dims)
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.layers: list[tuple[Linear, LayerNorm]] = []
        width = in_dim
        for i in range(hidden_layers):
            lin = Linear(f"{name}.hidden{i}", width, hidden_units, rng)
            self.layers.append((lin, LayerNorm(f"{name}.norm{i}", hidden_units)))
            width = hidden_units
        self.heads = [
            Linear(f"{name}.head{j}", width, d, rng, scale=HEAD_INIT_SCALE, zero_bias=True)
            for j, d in enumerate(self.head_dims)
        ]
        self.version = 0

    def params(self) -> list[Parameter]:
        out = []
        for lin, ln in self.layers:
            out += lin.params() + ln.params()
        for head in self.heads:
            out += head.params()
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def bump(self) -> None:
        """Mark cached activations as stale after an in-place parameter change."""
        self.version += 1

    def forward(self, x: np.ndarray):
        x = as_float(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"{self.name}: expected input (batch, {self.in_dim}), got {x.shape}")
        cache = ForwardCache(self, self.version, x)
        h = x
        for lin, ln in self.layers:
            z = lin.forward(h)
            y, ln_cache = ln.forward(z)
            mask = y > 0.0
            cache.blocks.append((h, ln_cache, mask))
            h = y * mask
        cache.last = h
        return [head.forward(h) for head in self.heads], cache

    def backward(self, cache: ForwardCache, output_grads: Sequence[np.ndarray | None],
                 accumulate: bool = True) -> np.ndarray:
        if cache.net is not self or cache.version != self.version:
            raise UsageError(f"{self.name}: backward called with a stale or foreign cache")
        if len(output_grads) != len(self.heads):
            raise DimensionError(f"{self.name}: {len(self.heads)} heads but {len(output_grads)} grads")
        h = cache.last
        dh = np.zeros_like(h)
        for head, g in zip(self.heads, output_grads):
            if g is None:
                continue
            dh += head.backward(h, np.asarray(g, dtype=np.float64), accumulate)
        for (lin, ln), (h_in, ln_cache, mask) in zip(reversed(self.layers), reversed(cache.blocks)):
            dz = ln.backward(ln_cache, dh * mask, accumulate)
            dh = lin.backward(h_in, dz, accumulate)
        return dh

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def copy_from(self, other: "MlpNetwork") -> None:
        for p, q in zip(self.params(), other.params()):
            p.value[...] = q.value
        self.bump()

    def clone(self, name: str | None = None) -> "MlpNetwork":
        twin = MlpNetwork(self.in_dim, self.head_dims, self.hidden_units, self.hidden_layers,
                          np.random.default_rng(0), name or self.name)
        twin.copy_from(self)
        return twin


def mlp_forward(net: MlpNetwork, x: np.ndarray):
    return net.forward(x)


def mlp_backward(net: MlpNetwork, cache: ForwardCache, output_grads, accumulate: bool = True):
    return net.backward(cache, output_grads, accumulate)


@dataclass
class AdamW:
    """Decoupled weight decay Adam over a fixed parameter group."""

    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    owners: list = field(default_factory=list)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)
        for owner in self.owners:
            owner.bump()


def adamw_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update; gradients are zeroed afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name}")
    counts = {p.step_count for p in params}
    if len(counts) > 1:
        raise UsageError(f"inconsistent step counts in one parameter group: {sorted(counts)}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** t)
        v_hat = p.v / (1.0 - beta2 ** t)
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0.0


def positional_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of ``t`` over frequencies ``10000**(-2i/dim)``.

    Accepts a scalar (returns ``(dim,)``) or a 1-D array (returns ``(n, dim)``).
    """
    if dim % 2:
        raise ConfigError(f"embedding dimension must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(dim // 2) * 2.0 / dim)
    phase = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def numeric_grad_check(params: Sequence[Parameter], loss_fn: Callable[[], float],
                       analytic: Sequence[np.ndarray], eps: float = 1e-6,
                       max_entries: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values. When ``max_entries`` is set, a random subset of entries per
    parameter is probed.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ConfigError(f"finite-difference step {eps} outside [1e-8, 1e-4]")
    rng = np.random.default_rng(0) if rng is None else rng
    with extended_precision(params):
        return _max_rel_error(params, loss_fn, analytic, eps, max_entries, rng)


@contextmanager
def extended_precision(params: Sequence[Parameter]):
    """Temporarily hold parameter values in ``np.longdouble``.

    Central differences at eps=1e-6 lose ~10 digits to cancellation; doing the
    probe evaluations in extended precision keeps the oracle's own rounding
    noise well below the tolerances it is used to certify.
    """
    saved = [p.value for p in params]
    try:
        for p in params:
            p.value = p.value.astype(np.longdouble)
        yield
    finally:
        for p, v in zip(params, saved):
            p.value = v


def _max_rel_error(params, loss_fn, analytic, eps, max_entries, rng) -> float:
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        g_flat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            cd = (up - down) / (2.0 * eps)
            err = abs(g_flat[i] - cd) / (abs(g_flat[i]) + abs(cd) + 1e-12)
            worst = max(worst, float(err))
    return worst


def finite_diff_check(net: MlpNetwork, x: np.ndarray, loss, eps: float = 1e-6,
                      max_entries: int | None = None) -> float:
    """Compare ``mlp_backward`` against central differences for every parameter.

    ``loss(outputs)`` returns ``(value, grads_per_head)``.
    """
    net.zero_grad()
    outs, cache = net.forward(x)
    _, grads = loss(outs)
    net.backward(cache, grads)
    params = net.params()
    analytic = [p.grad.copy() for p in params]
    net.zero_grad()

    def recompute() -> float:
        return loss(net.forward(x)[0])[0]

    return numeric_grad_check(params, recompute, analytic, eps, max_entries)
