"""Model zoo: multiscale stem + Transformer encoder + attention pooling, in
unimodal / early-fusion / cross-modal form, plus kNN and MLP baselines."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import ndcore as nd
from .errors import ConfigError, ShapeError
from .ndcore import tensor as F

FUSIONS = ("unimodal", "early", "cross_modal")


@dataclass
class ModelConfig:
    input_dim: int = 168
    secondary_dim: int = 0  # stream-B width, cross-modal only
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * embed_dim
    dropout: float = 0.2
    max_T: int = 90
    stem_kernels: tuple = (3, 5, 7)
    fusion: str = "unimodal"
    head_hidden: int = 32
    cross_attention: bool = True
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.stem_kernels = tuple(int(k) for k in self.stem_kernels)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.embed_dim
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if any(k % 2 == 0 for k in self.stem_kernels):
            raise ConfigError("stem kernel sizes must be odd")
        if self.fusion == "cross_modal" and self.secondary_dim < 1:
            raise ConfigError("cross-modal fusion needs secondary_dim >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_kernels"] = list(self.stem_kernels)
        return d


@dataclass
class WindowBatch:
    inputs: tuple  # (B, T, F) arrays, two of them for cross-modal
    labels: np.ndarray | None = None

    def __post_init__(self):
        T = {x.shape[1] for x in self.inputs}
        if len(T) != 1:
            raise ShapeError(f"streams in a batch differ in length: {sorted(T)}")


# ---------------------------------------------------------------- building blocks


class MultiscaleStem(nd.Module):
    """Parallel depthwise convolutions (one per kernel size), concatenated and
    projected to the embedding width by a pointwise linear map."""

    def __init__(self, n_in, embed_dim, kernels, rng, dtype):
        self.n_in = n_in
        self.convs = [nd.DepthwiseConv1d(n_in, k, rng, dtype) for k in kernels]
        self.proj = nd.Linear(n_in * len(kernels), embed_dim, rng, dtype=dtype)

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"stem expects {self.n_in} input channels, got {x.shape[-1]}")
        return self.proj(F.concat([conv(x) for conv in self.convs], axis=-1))


class TemporalEncoder(nd.Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        dt = cfg.np_dtype
        self.max_T = cfg.max_T
        self.pos = nd.parameter(rng.normal(0.0, 0.02, size=(cfg.max_T, cfg.embed_dim)), dt)
        self.layers = [
            nd.EncoderLayer(cfg.embed_dim, cfg.n_heads, cfg.ffn_dim, rng, cfg.dropout, drop_rng, dt)
            for _ in range(cfg.n_layers)
        ]

    def forward(self, z):
        T = z.shape[1]
        if T > self.max_T:
            raise ConfigError(f"sequence length {T} exceeds max_T {self.max_T}")
        z = z + self.pos[:T]
        for layer in self.layers:
            z = layer(z)
        return z

    def attention_maps(self) -> list[np.ndarray]:
        return [layer.attn.attention for layer in self.layers]


class AttentionPool(nd.Module):
    """``a_t = softmax_t(v . tanh(W z_t))``, ``h = sum_t a_t z_t``; weights kept in ``weights``."""

    def __init__(self, dim, rng, dtype):
        bound = 1.0 / math.sqrt(dim)
        self.W = nd.parameter(rng.uniform(-bound, bound, size=(dim, dim)), dtype)
        self.v = nd.parameter(rng.uniform(-bound, bound, size=(dim, 1)), dtype)
        self.weights = None

    def forward(self, z):
        scores = F.matmul(F.tanh(F.matmul(z, self.W)), self.v)  # (B, T, 1)
        a = F.softmax(scores, axis=1)
        self.weights = a.data[..., 0]
        return (a * z).sum(axis=1)


class ClassifierHead(nd.Module):
    def __init__(self, n_in, hidden, dropout, rng, drop_rng, dtype):
        self.fc1 = nd.Linear(n_in, hidden, rng, dtype=dtype)
        self.drop = nd.Dropout(dropout, drop_rng)
        self.fc2 = nd.Linear(hidden, 1, rng, dtype=dtype)

    def forward(self, h):
        return self.fc2(self.drop(F.relu(self.fc1(h)))).reshape(h.shape[0])


class CrossAttentionBlock(nd.Module):
    """``target + MHA(LN(target), LN(source))``; output-projection bias starts at zero."""

    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        dt = cfg.np_dtype
        self.norm_q = nd.LayerNorm(cfg.embed_dim, dt)
        self.norm_kv = nd.LayerNorm(cfg.embed_dim, dt)
        self.attn = nd.MultiHeadAttention(cfg.embed_dim, cfg.n_heads, rng, cfg.dropout, drop_rng, dt)
        self.attn.out.bias.data[:] = 0.0
        self.drop = nd.Dropout(cfg.dropout, drop_rng)

    def forward(self, target, source):
        return target + self.drop(self.attn(self.norm_q(target), self.norm_kv(source)))


# ---------------------------------------------------------------- models


class StressTransformer(nd.Module):
    """Stem -> encoder -> attention pooling -> head, one logit per window.

    Serves both the unimodal and the early-fusion setting (which only changes
    the input width).
    """

    def __init__(self, cfg: ModelConfig):
        if cfg.fusion == "cross_modal":
            raise ConfigError("use CrossModalTransformer for cross-modal fusion")
        self.config = cfg
        rng, drop_rng = nd.philox(cfg.seed, 0), nd.philox(cfg.seed, 1)
        dt = cfg.np_dtype
        self.stem = MultiscaleStem(cfg.input_dim, cfg.embed_dim, cfg.stem_kernels, rng, dt)
        self.encoder = TemporalEncoder(cfg, rng, drop_rng)
        self.pool = AttentionPool(cfg.embed_dim, rng, dt)
        self.head = ClassifierHead(cfg.embed_dim, cfg.head_hidden, cfg.dropout, rng, drop_rng, dt)

    def embed(self, x):
        return self.encoder(self.stem(_as_input(x, self.config)))

    def forward(self, x):
        return self.head(self.pool(self.embed(x)))


class CrossModalTransformer(nd.Module):
    """Two stem+encoder branches fused by bidirectional cross-attention.

    Stream A is the facial stream, stream B the secondary one.  Each fused
    stream is attention-pooled; the two pooled vectors are concatenated.
    """

    def __init__(self, cfg: ModelConfig):
        if cfg.fusion != "cross_modal":
            raise ConfigError("CrossModalTransformer needs fusion='cross_modal'")
        self.config = cfg
        rng, drop_rng = nd.philox(cfg.seed, 0), nd.philox(cfg.seed, 1)
        dt = cfg.np_dtype
        self.stem_a = MultiscaleStem(cfg.input_dim, cfg.embed_dim, cfg.stem_kernels, rng, dt)
        self.encoder_a = TemporalEncoder(cfg, rng, drop_rng)
        self.stem_b = MultiscaleStem(cfg.secondary_dim, cfg.embed_dim, cfg.stem_kernels, rng, dt)
        self.encoder_b = TemporalEncoder(cfg, rng, drop_rng)
        self.cross_a_from_b = CrossAttentionBlock(cfg, rng, drop_rng)
        self.cross_b_from_a = CrossAttentionBlock(cfg, rng, drop_rng)
        self.pool_a = AttentionPool(cfg.embed_dim, rng, dt)
        self.pool_b = AttentionPool(cfg.embed_dim, rng, dt)
        self.head = ClassifierHead(2 * cfg.embed_dim, cfg.head_hidden, cfg.dropout, rng, drop_rng, dt)

    def forward(self, xa, xb):
        xa, xb = _as_input(xa, self.config), _as_input(xb, self.config)
        if xa.shape[:2] != xb.shape[:2]:
            raise ShapeError(f"stream shapes {xa.shape} and {xb.shape} differ in batch or length")
        za = self.encoder_a(self.stem_a(xa))
        zb = self.encoder_b(self.stem_b(xb))
        if self.config.cross_attention:
            za, zb = self.cross_a_from_b(za, zb), self.cross_b_from_a(zb, za)
        h = F.concat([self.pool_a(za), self.pool_b(zb)], axis=-1)
        return self.head(h)


class MLPBaseline(nd.Module):
    """Fully-connected baseline on per-window summary features."""

    def __init__(self, n_in, hidden=(128, 64), dropout=0.2, seed=0, dtype="float64"):
        rng, drop_rng = nd.philox(seed, 0), nd.philox(seed, 1)
        dt = np.dtype(dtype)
        sizes = [n_in, *hidden]
        self.dtype = dt
        self.layers = [nd.Linear(a, b, rng, dtype=dt) for a, b in zip(sizes[:-1], sizes[1:])]
        self.drops = [nd.Dropout(dropout, drop_rng) for _ in hidden]
        self.out = nd.Linear(sizes[-1], 1, rng, dtype=dt)

    def forward(self, x):
        h = nd.as_tensor(np.asarray(x, dtype=self.dtype) if not isinstance(x, nd.Tensor) else x)
        for layer, drop in zip(self.layers, self.drops):
            h = drop(F.relu(layer(h)))
        return self.out(h).reshape(h.shape[0])


def build_model(cfg: ModelConfig) -> nd.Module:
    return CrossModalTransformer(cfg) if cfg.fusion == "cross_modal" else StressTransformer(cfg)


def _as_input(x, cfg: ModelConfig) -> nd.Tensor:
    if isinstance(x, nd.Tensor):
        return x
    x = np.asarray(x, dtype=cfg.np_dtype)
    if x.ndim == 2:
        x = x[None]
    return nd.Tensor(x)


def forward_unimodal(model: StressTransformer, batch: WindowBatch) -> np.ndarray:
    with nd.no_grad():
        return model(batch.inputs[0]).data


def forward_cross_modal(model: CrossModalTransformer, batch: WindowBatch) -> np.ndarray:
    with nd.no_grad():
        return model(*batch.inputs).data


# ---------------------------------------------------------------- kNN


def knn_scores(train_X, train_y, test_X, k: int = 5) -> np.ndarray:
    """Fraction of stress labels among the ``k`` nearest training points (Euclidean).

    Distance ties are broken by training order.
    """
    train_X = np.asarray(train_X, dtype=float)
    test_X = np.asarray(test_X, dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    if k < 1 or k > len(train_X):
        raise ConfigError(f"k={k} is not in [1, {len(train_X)}]")
    nearest = np.argsort(cdist(test_X, train_X), axis=1, kind="stable")[:, :k]
    return train_y[nearest].mean(axis=1)
