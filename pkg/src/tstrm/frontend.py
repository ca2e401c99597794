"""Log-mel feature extraction and the paired high/low resolution spectrograms.

The high-resolution spectrogram holds log-mel filterbank energies (25 ms
Hann window, 10 ms shift), three pitch placeholder columns and, optionally,
delta and delta-delta copies. The low-resolution spectrogram is the
high-resolution one mean-pooled along time by ``resolution_ratio``; the
feature axis is left untouched.

Pitch tracking is not implemented. The three pitch columns are
``[log frame energy, 0, 0]`` so the column layout of a Kaldi-style
``fbank + pitch`` recipe is preserved.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 40
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_pitch: int = 3
    use_deltas: bool = True
    resolution_ratio: int = 4
    sample_rate_hz: int = 16000
    delta_width: int = 2

    def __post_init__(self):
        if self.resolution_ratio < 1:
            raise FrontendError(f"resolution_ratio must be >= 1, got {self.resolution_ratio}")
        if self.n_mels < 1:
            raise FrontendError(f"n_mels must be >= 1, got {self.n_mels}")

    @property
    def static_dim(self) -> int:
        return self.n_mels + self.n_pitch

    @property
    def feature_dim(self) -> int:
        return 3 * self.static_dim if self.use_deltas else self.static_dim

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.shift_ms / 1000.0))


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray  # (T, D)
    frame_shift_ms: float
    resolution_tag: str = "high"

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate_hz: int) -> np.ndarray:
    """The ``n_mels + 2`` filter corner frequencies in Hz, equally spaced in mel."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), linear in Hz between corners."""
    edges = mel_band_edges(n_mels, sample_rate_hz)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None, :] - lo) / (mid - lo)
    fall = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(rise, fall), 0.0, None)


def num_frames(n_samples: int, window: int, shift: int) -> int:
    return 1 + (n_samples - window) // shift


def frame_signal(samples: np.ndarray, window: int, shift: int) -> np.ndarray:
    t = num_frames(len(samples), window, shift)
    idx = np.arange(window)[None, :] + shift * np.arange(t)[:, None]
    return samples[idx]


def compute_deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along axis 0 with edge frames replicated."""
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], width, axis=0), x, np.repeat(x[-1:], width, axis=0)])
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(x)
    for n in range(1, width + 1):
        out += n * (padded[width + n : width + n + t] - padded[width - n : width - n + t])
    return out / denom


def stft_logmel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> Spectrogram:
    samples = np.asarray(w.samples, dtype=np.float64)
    if w.sample_rate_hz != cfg.sample_rate_hz:
        cfg = replace(cfg, sample_rate_hz=w.sample_rate_hz)
    win, shift = cfg.window_samples, cfg.shift_samples
    if samples.ndim != 1 or len(samples) < win:
        raise FrontendError(f"waveform of {len(samples)} samples is shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()
    frames = frame_signal(samples, win, shift) * np.hanning(win + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fbank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate_hz)
    logmel = np.log(np.maximum(power @ fbank.T, LOG_FLOOR))
    static = logmel
    if cfg.n_pitch:
        pitch = np.zeros((logmel.shape[0], cfg.n_pitch))
        pitch[:, 0] = np.log(np.maximum(power.sum(axis=1), LOG_FLOOR))
        static = np.concatenate([logmel, pitch], axis=1)
    feats = static
    if cfg.use_deltas:
        d1 = compute_deltas(static, cfg.delta_width)
        d2 = compute_deltas(d1, cfg.delta_width)
        feats = np.concatenate([static, d1, d2], axis=1)
    return Spectrogram(feats, cfg.shift_ms, "high")


def downsample_time(s: Spectrogram, ratio: int) -> Spectrogram:
    """Non-overlapping mean pooling along time; the last window may be partial."""
    if ratio < 1:
        raise FrontendError(f"ratio must be >= 1, got {ratio}")
    frames = np.asarray(s.frames, dtype=np.float64)
    if ratio == 1:
        return Spectrogram(frames.copy(), s.frame_shift_ms, "low")
    t = frames.shape[0]
    t_low = -(-t // ratio)
    starts = np.arange(t_low) * ratio
    sums = np.add.reduceat(frames, starts, axis=0)
    counts = np.minimum(starts + ratio, t) - starts
    return Spectrogram(sums / counts[:, None], s.frame_shift_ms * ratio, "low")


def dual_resolution(high: Spectrogram, ratio: int) -> tuple[Spectrogram, Spectrogram]:
    return high, downsample_time(high, ratio)


def read_wav(path: str | Path) -> Waveform:
    """Read mono 16-bit little-endian PCM WAV into [-1, 1] floats."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise FrontendError(
                    f"{path}: need mono 16-bit PCM, got {fh.getnchannels()} channel(s) of {8 * fh.getsampwidth()} bit"
                )
            raw = fh.readframes(fh.getnframes())
            rate = fh.getframerate()
    except (wave.Error, EOFError) as exc:
        raise FrontendError(f"{path}: {exc}") from None
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def expected_frame_count(duration_s: float, cfg: FrontendConfig = FrontendConfig()) -> int:
    n = int(round(duration_s * cfg.sample_rate_hz))
    return num_frames(n, cfg.window_samples, cfg.shift_samples)


def low_resolution_length(t: int, ratio: int) -> int:
    return math.ceil(t / ratio)
