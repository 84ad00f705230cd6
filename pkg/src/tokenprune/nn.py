"""Dense float64 layers with hand-written backward passes.

Every layer works on arrays shaped ``(..., rows, features)`` so a batch of
equally padded states can go through one call.  Layers cache what their
backward pass needs during ``forward``; ``backward`` accumulates into
``Parameter.grad`` and returns the gradient w.r.t. the layer input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, DimensionError, StateError, TrainingError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Parameter:
    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, value, name=""):
        self.value = np.array(value, dtype=np.float64)
        if self.value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def freeze(self):
        self.frozen = True
        self.value.setflags(write=False)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def like(cls, param):
        return cls(np.zeros_like(param.value), np.zeros_like(param.value))


def adam_step(param, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``param.value`` in place; ``param.grad`` is left alone."""
    if param.frozen:
        raise StateError(f"parameter {param.name!r} is frozen")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient in parameter {param.name!r}")
    state.step_count += 1
    state.first_moment *= beta1
    state.first_moment += (1.0 - beta1) * g
    state.second_moment *= beta2
    state.second_moment += (1.0 - beta2) * g * g
    m_hat = state.first_moment / (1.0 - beta1**state.step_count)
    v_hat = state.second_moment / (1.0 - beta2**state.step_count)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.states = [AdamState.like(p) for p in self.params]

    def step(self):
        for p, s in zip(self.params, self.states):
            adam_step(p, s, self.lr, self.beta1, self.beta2, self.eps)


# -- elementwise functions ---------------------------------------------------


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(a, mask=None):
    """Row-wise softmax over the last axis; ``mask`` (broadcastable, bool) drops entries."""
    a = np.asarray(a, dtype=np.float64)
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


# -- modules -----------------------------------------------------------------


class Module:
    """Minimal container: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        unexpected = set(state) - set(named)
        if missing or unexpected:
            raise ConfigError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in named.items():
            if p.frozen:
                raise StateError(f"parameter {name!r} is frozen")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.value[...] = arr

    def freeze(self):
        for p in self.parameters():
            p.freeze()

    @property
    def frozen(self):
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _need(cache, layer):
    if cache is None:
        raise StateError(f"{layer}.backward called before forward")
    return cache


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = Parameter(uniform_init(rng, n_in, (n_in, n_out)), "weight")
        self.bias = Parameter(np.zeros((1, n_out)), "bias") if bias else None
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects {self.weight.shape[0]} features, got {x.shape[-1]}")
        self._x = x
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value[0]
        return y

    def backward(self, dy):
        x = _need(self._x, "Linear")
        n_in, n_out = self.weight.shape
        self.weight.grad += x.reshape(-1, n_in).T @ dy.reshape(-1, n_out)
        if self.bias is not None:
            self.bias.grad += dy.reshape(-1, n_out).sum(axis=0, keepdims=True)
        return dy @ self.weight.value.T


class LayerNorm(Module):
    def __init__(self, dim):
        if dim < 2:
            raise DimensionError("LayerNorm needs at least 2 features")
        self.gain = Parameter(np.ones((1, dim)), "gain")
        self.shift = Parameter(np.zeros((1, dim)), "shift")
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.gain.value[0] + self.shift.value[0]

    def backward(self, dy):
        xhat, inv_std = _need(self._cache, "LayerNorm")
        d = xhat.shape[-1]
        self.gain.grad += (dy * xhat).reshape(-1, d).sum(axis=0, keepdims=True)
        self.shift.grad += dy.reshape(-1, d).sum(axis=0, keepdims=True)
        dxhat = dy * self.gain.value[0]
        return (inv_std / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
        )


def layernorm_forward(x, gain, shift):
    """Functional LayerNorm over the last axis using ``Parameter`` gain/shift."""
    ln = LayerNorm(np.shape(x)[-1])
    ln.gain, ln.shift = gain, shift
    return ln.forward(np.asarray(x, dtype=np.float64))


class GELU(Module):
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return gelu(x)

    def backward(self, dy):
        return dy * gelu_grad(_need(self._x, "GELU"))


class ResidualMLP(Module):
    """``LayerNorm(f + W2 GELU(W1 f + b1) + b2)``, the block shared by both heads."""

    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(hidden, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, f):
        return self.norm.forward(f + self.fc2.forward(self.act.forward(self.fc1.forward(f))))

    def backward(self, dg):
        dy = self.norm.backward(dg)
        return dy + self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


@dataclass
class _AttnCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    heads: np.ndarray = field(repr=False)


class MultiHeadAttention(Module):
    """Self-attention with a residual connection and post-LayerNorm.

    ``forward(x, key_mask)``: ``x`` is ``(..., n, d)``; ``key_mask`` is a boolean
    ``(..., n)`` array marking rows that may be attended to (padding is False).
    """

    def __init__(self, dim, n_heads, rng):
        if n_heads < 1 or dim % n_heads:
            raise ConfigError(f"model width {dim} is not divisible by {n_heads} heads")
        self.dim, self.n_heads, self.d_k = dim, n_heads, dim // n_heads
        self.w_q = Parameter(uniform_init(rng, dim, (dim, dim)), "w_q")
        self.w_k = Parameter(uniform_init(rng, dim, (dim, dim)), "w_k")
        self.w_v = Parameter(uniform_init(rng, dim, (dim, dim)), "w_v")
        self.w_o = Parameter(uniform_init(rng, dim, (dim, dim)), "w_o")
        self.norm = LayerNorm(dim)
        self._cache = None

    def _split(self, a):
        *lead, n, _ = a.shape
        return np.swapaxes(a.reshape(*lead, n, self.n_heads, self.d_k), -2, -3)

    def _merge(self, a):
        a = np.swapaxes(a, -2, -3)
        *lead, n, _, _ = a.shape
        return a.reshape(*lead, n, self.dim)

    def forward(self, x, key_mask=None):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"attention expects width {self.dim}, got {x.shape[-1]}")
        q = self._split(x @ self.w_q.value)
        k = self._split(x @ self.w_k.value)
        v = self._split(x @ self.w_v.value)
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(self.d_k)
        mask = None if key_mask is None else key_mask[..., None, None, :]
        probs = softmax_rows(scores, mask)
        heads = self._merge(probs @ v)
        self._cache = _AttnCache(x, q, k, v, probs, heads)
        return self.norm.forward(x + heads @ self.w_o.value)

    def backward(self, dout):
        c = _need(self._cache, "MultiHeadAttention")
        d = self.dim
        dy = self.norm.backward(dout)
        self.w_o.grad += c.heads.reshape(-1, d).T @ dy.reshape(-1, d)
        dheads = self._split(dy @ self.w_o.value.T)
        dprobs = dheads @ np.swapaxes(c.v, -1, -2)
        dv = np.swapaxes(c.probs, -1, -2) @ dheads
        dscores = c.probs * (dprobs - np.sum(dprobs * c.probs, axis=-1, keepdims=True))
        dscores /= math.sqrt(self.d_k)
        dq = self._merge(dscores @ c.k)
        dk = self._merge(np.swapaxes(dscores, -1, -2) @ c.q)
        dv = self._merge(dv)
        x2 = c.x.reshape(-1, d)
        self.w_q.grad += x2.T @ dq.reshape(-1, d)
        self.w_k.grad += x2.T @ dk.reshape(-1, d)
        self.w_v.grad += x2.T @ dv.reshape(-1, d)
        return dy + dq @ self.w_q.value.T + dk @ self.w_k.value.T + dv @ self.w_v.value.T


def multi_head_attention(x, params, key_mask=None):
    return params.forward(np.asarray(x, dtype=np.float64), key_mask)
