"""Parameter containers and the layers the model zoo is built from."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError
from . import tensor as F
from .tensor import Tensor


def philox(seed, *keys) -> np.random.Generator:
    """Counter-based generator; ``keys`` select independent streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng, shape, fan_in, dtype=np.float64) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), dtype)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for v in items:
                if isinstance(v, Module):
                    yield from v.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters {sorted(missing)[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float64):
        self.weight = uniform_fan_in(rng, (n_in, n_out), n_in, dtype)
        self.bias = uniform_fan_in(rng, (n_out,), n_in, dtype) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64, eps=1e-9):
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p, rng):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return F.dropout(x, self.p, self.rng, self.training)


class DepthwiseConv1d(Module):
    def __init__(self, channels, kernel_size, rng, dtype=np.float64):
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        self.weight = uniform_fan_in(rng, (channels, kernel_size), kernel_size, dtype)
        self.bias = parameter(np.zeros(channels), dtype)

    def forward(self, x):
        return F.depthwise_conv1d(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries from ``xq``, keys/values from ``xkv``.

    The last attention weights ``(B, H, Tq, Tk)`` are kept in ``attention``.
    """

    def __init__(self, dim, n_heads, rng, dropout=0.0, dropout_rng=None, dtype=np.float64):
        if dim % n_heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.drop = Dropout(dropout, dropout_rng)
        self.attention = None

    def _heads(self, x):
        B, T, E = x.shape
        return F.transpose(x.reshape(B, T, self.n_heads, E // self.n_heads), (0, 2, 1, 3))

    def forward(self, xq, xkv=None):
        xkv = xq if xkv is None else xkv
        B, Tq, E = xq.shape
        q, k, v = self._heads(self.q(xq)), self._heads(self.k(xkv)), self._heads(self.v(xkv))
        scores = F.matmul(q, F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(E // self.n_heads))
        attn = F.softmax(scores, axis=-1)
        self.attention = attn.data
        ctx = F.matmul(self.drop(attn), v)
        ctx = F.transpose(ctx, (0, 2, 1, 3)).reshape(B, Tq, E)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, dropout=0.0, dropout_rng=None, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)
        self.drop = Dropout(dropout, dropout_rng)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(Module):
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, dim, n_heads, ffn_dim, rng, dropout=0.0, dropout_rng=None, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dropout, dropout_rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dropout, dropout_rng, dtype)
        self.drop = Dropout(dropout, dropout_rng)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ffn(self.norm2(x)))
