"""Shallow and deep convolutional streams.

Both streams take a batch of spectrograms shaped (N, 1, T, D) together
with the valid frame count of each utterance. Every block zeroes its
output beyond the valid length, so a padded utterance produces exactly the
features it would produce on its own.

Default layouts follow the two-stream design table: the shallow stream is
three 3x3 convolutions with strides (2, 2, 1) and 128/256/256 channels; the
deep stream is a stride-2 stem convolution followed by six groups of
MobileNetV2-style inverted residual blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm2d, Conv2d, Module, ModuleList, conv_out_size
from .tensor import DimensionError, Tensor, relu

KERNEL = 3
PADDING = 1

CONV = "conv"
BOTTLENECK = "bottleneck"

# (operator, output channels, repeats, stride)
DEEP_ROWS: tuple[tuple[str, int, int, int], ...] = (
    (CONV, 32, 1, 2),
    (BOTTLENECK, 32, 1, 1),
    (BOTTLENECK, 32, 1, 1),
    (BOTTLENECK, 48, 3, 2),
    (BOTTLENECK, 64, 3, 2),
    (BOTTLENECK, 128, 2, 1),
    (BOTTLENECK, 256, 2, 1),
)
SHALLOW_ROWS: tuple[tuple[str, int, int, int], ...] = (
    (CONV, 128, 1, 2),
    (CONV, 256, 1, 2),
    (CONV, 256, 1, 1),
)


class InputTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    kernel: int = KERNEL
    padding: int = PADDING

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class BottleneckSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    expansion: int = 6
    repeats: int = 1

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass(frozen=True)
class StreamConfig:
    deep_rows: tuple[tuple[str, int, int, int], ...] = DEEP_ROWS
    shallow_rows: tuple[tuple[str, int, int, int], ...] = SHALLOW_ROWS
    n_deep_groups: int = 6
    expansion: int = 6
    in_ch: int = 1

    def __post_init__(self):
        n_groups = sum(1 for row in self.deep_rows if row[0] == BOTTLENECK)
        if not 1 <= self.n_deep_groups <= n_groups:
            raise ValueError(f"n_deep_groups must be in 1..{n_groups}, got {self.n_deep_groups}")
        for rows in (self.deep_rows, self.shallow_rows):
            for op, ch, rep, stride in rows:
                if op not in (CONV, BOTTLENECK) or ch < 1 or rep < 1 or stride not in (1, 2):
                    raise ValueError(f"invalid stream row {(op, ch, rep, stride)}")

    def active_deep_rows(self) -> list[tuple[str, int, int, int]]:
        """Deep rows with trailing bottleneck groups beyond ``n_deep_groups`` removed."""
        rows, kept = [], 0
        for row in self.deep_rows:
            if row[0] == BOTTLENECK:
                if kept == self.n_deep_groups:
                    break
                kept += 1
            rows.append(row)
        return rows

    @property
    def deep_out_channels(self) -> int:
        return self.active_deep_rows()[-1][1]

    @property
    def shallow_out_channels(self) -> int:
        return self.shallow_rows[-1][1]


def layer_strides(rows) -> list[int]:
    """The stride of every individual layer; only a group's first block carries its stride."""
    strides = []
    for _, _, repeats, stride in rows:
        strides.append(stride)
        strides.extend([1] * (repeats - 1))
    return strides


def output_length(n: int, strides) -> int:
    for s in strides:
        n = conv_out_size(n, KERNEL, s, PADDING)
    return n


def minimum_length(strides) -> int:
    """Smallest input extent for which every stride-2 layer sees at least two frames."""
    n = 1
    while True:
        ok, m = True, n
        for s in strides:
            if s == 2 and m < 2:
                ok = False
                break
            m = conv_out_size(m, KERNEL, s, PADDING)
        if ok:
            return n
        n += 1


def time_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """(N, 1, t, 1) float mask with ones on the valid frames."""
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[:, None, :, None]


class ConvBNReLU(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, activation: bool = True):
        super().__init__()
        self.spec = spec
        self.conv = Conv2d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, spec.padding, rng)
        self.bn = BatchNorm2d(spec.out_ch)
        self.activation = activation

    def forward(self, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        if x.shape[1] != self.spec.in_ch:
            raise DimensionError(f"conv block expects {self.spec.in_ch} channels, got {x.shape[1]}")
        y = self.conv(x)
        lengths = np.array([conv_out_size(int(n), self.spec.kernel, self.spec.stride, self.spec.padding) for n in lengths])
        y = self.bn(y, time_mask(lengths, y.shape[2]))
        return (relu(y) if self.activation else y), lengths


class Bottleneck(Module):
    """1x1 expand -> 3x3 depthwise (strided) -> 1x1 linear projection, residual when shapes allow."""

    def __init__(self, spec: BottleneckSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        hidden = spec.in_ch * spec.expansion
        self.expand = Conv2d(spec.in_ch, hidden, 1, 1, 0, rng)
        self.bn1 = BatchNorm2d(hidden)
        self.depthwise = Conv2d(hidden, hidden, KERNEL, spec.stride, PADDING, rng, groups=hidden)
        self.bn2 = BatchNorm2d(hidden)
        self.project = Conv2d(hidden, spec.out_ch, 1, 1, 0, rng)
        self.bn3 = BatchNorm2d(spec.out_ch)

    def forward(self, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        if x.shape[1] != self.spec.in_ch:
            raise DimensionError(f"bottleneck expects {self.spec.in_ch} channels, got {x.shape[1]}")
        mask = time_mask(lengths, x.shape[2])
        h = relu(self.bn1(self.expand(x), mask))
        h = self.depthwise(h)
        out_lengths = np.array([conv_out_size(int(n), KERNEL, self.spec.stride, PADDING) for n in lengths])
        mask = time_mask(out_lengths, h.shape[2])
        h = relu(self.bn2(h, mask))
        h = self.bn3(self.project(h), mask)
        if self.spec.residual:
            h = h + x
        return h, out_lengths


def _build_layers(rows, in_ch: int, expansion: int, rng: np.random.Generator) -> ModuleList:
    layers = ModuleList()
    ch = in_ch
    for op, out_ch, repeats, stride in rows:
        for r in range(repeats):
            s = stride if r == 0 else 1
            if op == CONV:
                layers.append(ConvBNReLU(ConvSpec(ch, out_ch, s), rng))
            else:
                layers.append(Bottleneck(BottleneckSpec(ch, out_ch, s, expansion), rng))
            ch = out_ch
    return layers


class _Stream(Module):
    rows: list

    def _check_input(self, x: Tensor, lengths: np.ndarray, name: str) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"{name} stream expects (N, {self.in_ch}, T, D), got {x.shape}")
        strides = layer_strides(self.rows)
        need = minimum_length(strides)
        if int(np.min(lengths)) < need or x.shape[3] < need:
            raise InputTooShortError(
                f"{name} stream needs at least {need} frames and {need} feature bins; "
                f"got min length {int(np.min(lengths))}, {x.shape[3]} bins"
            )

    def forward(self, x: Tensor, lengths=None) -> tuple[Tensor, np.ndarray]:
        if lengths is None:
            lengths = np.full(x.shape[0], x.shape[2])
        lengths = np.asarray(lengths, dtype=np.int64)
        self._check_input(x, lengths, self.name)
        x = x * time_mask(lengths, x.shape[2])
        for layer in self.layers:
            x, lengths = layer(x, lengths)
        return x, lengths

    def output_shape(self, t: int, d: int) -> tuple[int, int, int]:
        strides = layer_strides(self.rows)
        return self.out_ch, output_length(t, strides), output_length(d, strides)


class ShallowStream(_Stream):
    name = "shallow"

    def __init__(self, cfg: StreamConfig, rng: np.random.Generator):
        super().__init__()
        self.rows = list(cfg.shallow_rows)
        self.in_ch = cfg.in_ch
        self.out_ch = cfg.shallow_out_channels
        self.layers = _build_layers(self.rows, cfg.in_ch, cfg.expansion, rng)


class DeepStream(_Stream):
    name = "deep"

    def __init__(self, cfg: StreamConfig, rng: np.random.Generator):
        super().__init__()
        self.rows = cfg.active_deep_rows()
        self.in_ch = cfg.in_ch
        self.out_ch = cfg.deep_out_channels
        self.layers = _build_layers(self.rows, cfg.in_ch, cfg.expansion, rng)


def spectrogram_batch(frames: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """Zero-pad (T_i, D) matrices into a (N, 1, T_max, D) tensor plus lengths."""
    lengths = np.array([f.shape[0] for f in frames], dtype=np.int64)
    d = frames[0].shape[1]
    out = np.zeros((len(frames), 1, int(lengths.max()), d))
    for i, f in enumerate(frames):
        out[i, 0, : f.shape[0]] = f
    return Tensor(out), lengths


@dataclass
class FeatureMap:
    """A single utterance's c x t x f activation volume."""

    values: np.ndarray = field(repr=False)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def time(self) -> int:
        return self.values.shape[1]

    @property
    def freq(self) -> int:
        return self.values.shape[2]


def run_stream(stream: _Stream, frames: np.ndarray) -> FeatureMap:
    """Apply a stream (eval mode recommended) to one T x D spectrogram."""
    x, lengths = spectrogram_batch([np.asarray(frames)])
    y, _ = stream(x, lengths)
    return FeatureMap(y.data[0])
