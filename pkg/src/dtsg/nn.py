"""Parameterized layers built on the autodiff engine.

`Module` keeps an ordered registry of parameters and submodules so models
can be enumerated for optimization, checkpointing (every tensor gets a
dotted name), and finite-difference auditing.  Initialization is explicit:
every constructor takes a `numpy.random.Generator` so model builds are a
pure function of the seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A leaf tensor updated by the optimizer."""

    def __init__(self, data: np.ndarray):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)


class Module:
    """Base container with ordered parameter / submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state dict missing tensors: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True,
                 dtype=np.float64):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out, dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class MLP(Module):
    """Stack of Linear layers with an activation between them."""

    def __init__(self, rng, dims: list[int], activation: str = "relu",
                 dtype=np.float64):
        super().__init__()
        self.activation = activation
        self.layers = []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layer = Linear(rng, a, b, dtype=dtype)
            setattr(self, f"layer{k}", layer)
            self.layers.append(layer)

    def __call__(self, x: Tensor) -> Tensor:
        act = {"relu": ad.relu, "tanh": ad.tanh}[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype))
        self.shift = Parameter(np.zeros(dim, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift, self.eps)


class Embedding(Module):
    """Learned token table, uniform(-0.1, 0.1) initialized; rows may be
    overwritten from a pre-trained vector file."""

    def __init__(self, rng, vocab_size: int, dim: int, dtype=np.float64):
        super().__init__()
        self.table = Parameter(
            rng.uniform(-0.1, 0.1, size=(vocab_size, dim)).astype(dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.table, ids)


class LSTM(Module):
    """Single-layer LSTM; zero initial state, returns the full hidden
    sequence (B, T, H)."""

    def __init__(self, rng, d_in: int, hidden: int, dtype=np.float64):
        super().__init__()
        self.w_x = Parameter(xavier_uniform(rng, d_in, 4 * hidden, dtype=dtype))
        self.w_h = Parameter(xavier_uniform(rng, hidden, 4 * hidden, dtype=dtype))
        self.b = Parameter(np.zeros(4 * hidden, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.lstm(x, self.w_x, self.w_h, self.b)


class SelfAttentionBlock(Module):
    """Multi-head scaled dot-product self-attention with residual + layer
    norm, followed by a position-wise feed-forward sublayer with its own
    residual + layer norm.  Masked positions are excluded from the softmax
    and receive exactly zero attention weight.
    """

    def __init__(self, rng, dim: int, heads: int, ffn_dim: int,
                 dtype=np.float64):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, dtype=dtype)
        # a key bias shifts every softmax row uniformly: it can never affect
        # the output, so it is not allocated
        self.wk = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.wv = Linear(rng, dim, dim, dtype=dtype)
        self.wo = Linear(rng, dim, dim, dtype=dtype)
        self.ln_attn = LayerNorm(dim, dtype)
        self.ffn_in = Linear(rng, dim, ffn_dim, dtype=dtype)
        self.ffn_out = Linear(rng, ffn_dim, dim, dtype=dtype)
        self.ln_ffn = LayerNorm(dim, dtype)

    def attention_weights(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """The (B, H, L, L) attention matrix, for inspection and tests."""
        b, length, _ = x.shape
        q = self._split_heads(self.wq(x), b, length)
        k = self._split_heads(self.wk(x), b, length)
        scores = ad.matmul(q, transpose_last(k))
        scores = ad.mul(scores, 1.0 / math.sqrt(self.head_dim))
        return ad.masked_softmax(scores, mask[:, None, None, :], axis=-1)

    def _split_heads(self, t: Tensor, b: int, length: int) -> Tensor:
        t = ad.reshape(t, (b, length, self.heads, self.head_dim))
        return ad.transpose(t, (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        if not mask.any(axis=-1).all():
            raise ValueError("self-attention input has a fully masked sequence")
        b, length, _ = x.shape
        q = self._split_heads(self.wq(x), b, length)
        k = self._split_heads(self.wk(x), b, length)
        v = self._split_heads(self.wv(x), b, length)
        scores = ad.matmul(q, transpose_last(k))
        scores = ad.mul(scores, 1.0 / math.sqrt(self.head_dim))
        attn = ad.masked_softmax(scores, mask[:, None, None, :], axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.transpose(ctx, (0, 2, 1, 3))
        ctx = ad.reshape(ctx, (b, length, self.dim))
        y = self.ln_attn(ad.add(x, self.wo(ctx)))
        ff = self.ffn_out(ad.relu(self.ffn_in(y)))
        return self.ln_ffn(ad.add(y, ff))


def transpose_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(t, tuple(axes))


def sinusoidal_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def global_grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`.
    Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
