"""Resizing the deep-stream features onto the shallow grid and fusing the two.

Feature correlation fusion (FCF) flattens each c x t x f map to c x d_m
with d_m = t * f, computes channel-to-channel interaction weights

    W = softmax_rows(f1(Xs) f2(Xd)^T / sqrt(d_m))          (c x c)

re-weights the shallow features with them, adds the projected deep
features, and concatenates the result with the untouched shallow map:

    Xw = W f3(Xs) + f2(Xd),        out = concat(Xw, Xs).

f1, f2, f3 are bias-free 1x1 convolutions. Leaving out the bias keeps
padded (all-zero) positions at zero, so the interaction weights of an
utterance do not depend on how far its batch was padded.
"""

from __future__ import annotations

import math

import numpy as np

from .nn import Module, Parameter, uniform
from .tensor import DimensionError, Tensor, concat, matmul, softmax

FCF = "fcf"
CONCAT = "concat"
ADD = "add"
FUSION_KINDS = (FCF, CONCAT, ADD)


def bilinear_weights(n_in: int, n_out: int, valid_in: int | None = None, valid_out: int | None = None) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, align_corners=False convention.

    Output index j samples the input at ``(j + 0.5) * valid_in / valid_out - 0.5``
    clamped to ``[0, valid_in - 1]``. Rows past ``valid_out`` are zero.
    """
    valid_in = n_in if valid_in is None else valid_in
    valid_out = n_out if valid_out is None else valid_out
    mat = np.zeros((n_out, n_in))
    if valid_in == valid_out:
        idx = np.arange(valid_out)
        mat[idx, idx] = 1.0
        return mat
    scale = valid_in / valid_out
    src = np.clip((np.arange(valid_out) + 0.5) * scale - 0.5, 0.0, valid_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, valid_in - 1)
    w1 = src - i0
    rows = np.arange(valid_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat


def bilinear_resize(x: Tensor, t_out: int, f_out: int, lengths_in=None, lengths_out=None) -> Tensor:
    """Resize (N, C, T, F) maps to (N, C, t_out, f_out).

    With per-utterance ``lengths_in``/``lengths_out`` each utterance's valid
    time span is mapped onto its own valid output span.
    """
    if t_out < 1 or f_out < 1:
        raise DimensionError(f"resize target must be positive, got {(t_out, f_out)}")
    n, _, t_in, f_in = x.shape
    if lengths_in is None and (t_in, f_in) == (t_out, f_out):
        return x
    if lengths_in is None:
        lengths_in = np.full(n, t_in)
        lengths_out = np.full(n, t_out)
    rt = np.stack([bilinear_weights(t_in, t_out, int(a), int(b)) for a, b in zip(lengths_in, lengths_out)])
    rf = bilinear_weights(f_in, f_out)
    y = matmul(Tensor(rt[:, None]), x)
    return matmul(y, Tensor(rf.T)) if f_in != f_out else y


class ChannelLinear(Module):
    """A 1x1 convolution without bias acting on (N, C, d) flattened maps."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(uniform(rng, (out_ch, in_ch), 1.0 / math.sqrt(in_ch)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2] != self.weight.shape[1]:
            raise DimensionError(f"1x1 conv expects {self.weight.shape[1]} channels, got {x.shape}")
        return matmul(self.weight, x)


def _flatten(x: Tensor) -> Tensor:
    n, c, t, f = x.shape
    return x.reshape(n, c, t * f)


def fcf_weights(a: Tensor, b: Tensor, d_m) -> Tensor:
    """Row-softmaxed interaction weights from flattened (N, c, d_m) projections."""
    scale = 1.0 / np.sqrt(np.asarray(d_m, dtype=np.float64)).reshape(-1, 1, 1)
    return softmax(matmul(a, b.swapaxes(-1, -2)) * scale, axis=-1)


class FeatureCorrelationFusion(Module):
    def __init__(self, channels: int, rng: np.random.Generator, deep_channels: int | None = None):
        super().__init__()
        deep_channels = channels if deep_channels is None else deep_channels
        self.f1 = ChannelLinear(channels, channels, rng)
        self.f2 = ChannelLinear(deep_channels, channels, rng)
        self.f3 = ChannelLinear(channels, channels, rng)
        self.channels = channels
        self.last_weights: np.ndarray | None = None

    def out_channels(self) -> int:
        return 2 * self.channels

    def forward(self, xs: Tensor, xd: Tensor, lengths=None) -> Tensor:
        if xs.shape[0] != xd.shape[0] or xs.shape[2:] != xd.shape[2:] or xs.shape[1] != self.channels:
            raise DimensionError(f"fcf: shallow {xs.shape} and deep {xd.shape} maps do not align")
        n, c, t, f = xs.shape
        d_m = np.full(n, t * f) if lengths is None else np.asarray(lengths) * f
        s = _flatten(xs)
        d2 = self.f2(_flatten(xd))
        w = fcf_weights(self.f1(s), d2, d_m)
        self.last_weights = w.data
        xw = matmul(w, self.f3(s)) + d2
        return concat([xw, s], axis=1).reshape(n, 2 * c, t, f)


def fuse_concat(xs: Tensor, xd: Tensor) -> Tensor:
    if xs.shape[0] != xd.shape[0] or xs.shape[2:] != xd.shape[2:]:
        raise DimensionError(f"concat fusion: shallow {xs.shape} and deep {xd.shape} maps do not align")
    return concat([xs, xd], axis=1)


def fuse_add(xs: Tensor, xd: Tensor) -> Tensor:
    if xs.shape != xd.shape:
        raise DimensionError(f"add fusion: shallow {xs.shape} and deep {xd.shape} differ")
    return xs + xd


class ConcatFusion(Module):
    def __init__(self, channels: int, deep_channels: int | None = None):
        super().__init__()
        self.channels = channels
        self.deep_channels = channels if deep_channels is None else deep_channels

    def out_channels(self) -> int:
        return self.channels + self.deep_channels

    def forward(self, xs, xd, lengths=None):
        return fuse_concat(xs, xd)


class AddFusion(Module):
    """Elementwise sum; a bias-free 1x1 projection aligns channel counts when they differ."""

    def __init__(self, channels: int, rng: np.random.Generator, deep_channels: int | None = None):
        super().__init__()
        self.channels = channels
        if deep_channels is not None and deep_channels != channels:
            self.proj = ChannelLinear(deep_channels, channels, rng)
        else:
            self.proj = None

    def out_channels(self) -> int:
        return self.channels

    def forward(self, xs, xd, lengths=None):
        if self.proj is not None:
            n, _, t, f = xd.shape
            xd = self.proj(_flatten(xd)).reshape(n, self.channels, t, f)
        return fuse_add(xs, xd)


def build_fusion(kind: str, channels: int, deep_channels: int, rng: np.random.Generator) -> Module:
    if kind == FCF:
        return FeatureCorrelationFusion(channels, rng, deep_channels)
    if kind == CONCAT:
        return ConcatFusion(channels, deep_channels)
    if kind == ADD:
        return AddFusion(channels, rng, deep_channels)
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
