"""Transformer encoder-decoder with pre-norm residual blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Embedding, LayerNorm, Linear, Module, ModuleList
from .tensor import ContractError, DimensionError, Tensor, dropout, masked_fill, matmul, relu, softmax


@dataclass(frozen=True)
class TransformerConfig:
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    n_heads: int = 4
    d_m: int = 256
    d_ff: int = 1024
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("n_enc_layers", "n_dec_layers", "n_heads", "d_m", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.d_m % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_m={self.d_m}")


def positional_encoding(t: int, d_m: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(pos / 10000^(2i/d_m)), odd columns the matching cos."""
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(0, d_m, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_m)
    pe = np.zeros((t, d_m))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_m // 2])
    return pe


def causal_mask(t: int) -> np.ndarray:
    """(t, t) boolean mask, True where query i may attend to key j (j <= i)."""
    return np.tril(np.ones((t, t), dtype=bool))


def length_mask(lengths, t: int) -> np.ndarray:
    """(N, 1, t) boolean key mask, True on the valid positions."""
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None])[:, None, :]


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` broadcasts to the (..., t_q, t_k) logits; False entries get
    -inf before the softmax. A query row with no allowed key is an error.
    """
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise DimensionError(f"attention: query width {dk} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("attention: a query row has every key masked")
        logits = masked_fill(logits, ~mask, -np.inf)
    weights = softmax(logits, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d_m: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if d_m % n_heads:
            raise ValueError(f"n_heads={n_heads} does not divide d_m={d_m}")
        self.n_heads = n_heads
        self.d_k = d_m // n_heads
        self.q = Linear(d_m, d_m, rng)
        self.k = Linear(d_m, d_m, rng)
        self.v = Linear(d_m, d_m, rng)
        self.o = Linear(d_m, d_m, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        return x.reshape(n, t, self.n_heads, self.d_k).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None = None) -> Tensor:
        n, tq, d_m = query.shape
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 3:
                mask = mask[:, None]  # broadcast over heads
        out, w = attention(self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value)), mask, True)
        self.last_weights = w.data
        out = out.transpose(0, 2, 1, 3).reshape(n, tq, d_m)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, d_m: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Linear(d_m, d_ff, rng)
        self.w2 = Linear(d_ff, d_m, rng)

    def forward(self, x: Tensor, rate: float = 0.0, rng=None) -> Tensor:
        return self.w2(dropout(relu(self.w1(x)), rate, rng, self.training))


class EncoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_m)
        self.self_attn = MultiHeadAttention(cfg.d_m, cfg.n_heads, rng)
        self.norm2 = LayerNorm(cfg.d_m)
        self.ffn = FeedForward(cfg.d_m, cfg.d_ff, rng)
        self.rate = cfg.dropout_rate

    def forward(self, x: Tensor, mask=None, rng=None) -> Tensor:
        h = self.norm1(x)
        x = x + dropout(self.self_attn(h, h, h, mask), self.rate, rng, self.training)
        x = x + dropout(self.ffn(self.norm2(x), self.rate, rng), self.rate, rng, self.training)
        return x


class DecoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_m)
        self.self_attn = MultiHeadAttention(cfg.d_m, cfg.n_heads, rng)
        self.norm2 = LayerNorm(cfg.d_m)
        self.cross_attn = MultiHeadAttention(cfg.d_m, cfg.n_heads, rng)
        self.norm3 = LayerNorm(cfg.d_m)
        self.ffn = FeedForward(cfg.d_m, cfg.d_ff, rng)
        self.rate = cfg.dropout_rate

    def forward(self, y: Tensor, memory: Tensor, self_mask, memory_mask, rng=None) -> Tensor:
        h = self.norm1(y)
        y = y + dropout(self.self_attn(h, h, h, self_mask), self.rate, rng, self.training)
        y = y + dropout(self.cross_attn(self.norm2(y), memory, memory, memory_mask), self.rate, rng, self.training)
        y = y + dropout(self.ffn(self.norm3(y), self.rate, rng), self.rate, rng, self.training)
        return y


class Encoder(Module):
    """Adds positional encodings, runs the layer stack, applies a final layer norm."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, use_positional: bool = True):
        super().__init__()
        self.cfg = cfg
        self.layers = ModuleList(EncoderLayer(cfg, rng) for _ in range(cfg.n_enc_layers))
        self.norm = LayerNorm(cfg.d_m)
        self.use_positional = use_positional

    def forward(self, x: Tensor, lengths=None, rng=None) -> Tensor:
        n, t, d = x.shape
        if d != self.cfg.d_m:
            raise DimensionError(f"encoder expects width {self.cfg.d_m}, got {x.shape}")
        if self.use_positional:
            x = x + positional_encoding(t, d)
        x = dropout(x, self.cfg.dropout_rate, rng, self.training)
        mask = None if lengths is None else length_mask(lengths, t)
        for layer in self.layers:
            x = layer(x, mask, rng)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, cfg: TransformerConfig, vocab_size: int, rng: np.random.Generator, out_init_scale: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = Embedding(vocab_size, cfg.d_m, rng)
        self.layers = ModuleList(DecoderLayer(cfg, rng) for _ in range(cfg.n_dec_layers))
        self.norm = LayerNorm(cfg.d_m)
        self.out = Linear(cfg.d_m, vocab_size, rng, init_scale=out_init_scale)

    def forward(self, tokens: np.ndarray, memory: Tensor, memory_lengths=None, rng=None) -> Tensor:
        """Logits (N, L, vocab) for (N, L) token ids that start with sos."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        n, length = tokens.shape
        if length == 0:
            raise ValueError("decoder needs at least one input token")
        y = self.embed(tokens) * math.sqrt(self.cfg.d_m) + positional_encoding(length, self.cfg.d_m)
        y = dropout(y, self.cfg.dropout_rate, rng, self.training)
        self_mask = causal_mask(length)[None]
        mem_mask = None if memory_lengths is None else length_mask(memory_lengths, memory.shape[1])
        for layer in self.layers:
            y = layer(y, memory, self_mask, mem_mask, rng)
        return self.out(self.norm(y))
