"""The two-stream two-resolution recogniser.

High-resolution features feed the shallow stream; the same features pooled
in time by ``resolution_ratio`` feed the deep stream. The deep output is
bilinearly resized onto the shallow grid and fused, each time step of the
fused map (channels x freq) is projected to d_m, and a Transformer
encoder-decoder with an auxiliary CTC head on the encoder produces tokens.

``streams="shallow"`` skips fusion and feeds the shallow map directly;
``streams="deep"`` resizes the deep map onto the shallow grid and feeds it
alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import DeepStream, ShallowStream, layer_strides, output_length, spectrogram_batch
from .config import ModelConfig
from .frontend import Spectrogram, downsample_time
from .fusion import bilinear_resize, build_fusion
from .losses import LossBreakdown, Vocabulary, attention_ce_batch, ctc_loss_batch
from .nn import Linear, Module
from .tensor import DimensionError, Tensor, log_softmax, no_grad
from .transformer import Decoder, Encoder


@dataclass
class StreamOutputs:
    shallow: Tensor | None
    shallow_lengths: np.ndarray | None
    deep: Tensor | None
    deep_lengths: np.ndarray | None


@dataclass
class Batch:
    """Zero-padded high/low resolution inputs with valid lengths."""

    high: Tensor
    high_lengths: np.ndarray
    low: Tensor
    low_lengths: np.ndarray


def make_batch(frames: Sequence[np.ndarray], ratio: int) -> Batch:
    high, high_lengths = spectrogram_batch([np.asarray(f, dtype=np.float64) for f in frames])
    lows = [downsample_time(Spectrogram(np.asarray(f, dtype=np.float64), 10.0, "high"), ratio).frames for f in frames]
    low, low_lengths = spectrogram_batch(lows)
    return Batch(high, high_lengths, low, low_lengths)


def decoder_io(transcripts: Sequence[Sequence[int]], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``sos y``, targets ``y eos`` (both eos-padded), and target lengths."""
    lengths = np.array([len(y) + 1 for y in transcripts], dtype=np.int64)
    width = int(lengths.max())
    inp = np.full((len(transcripts), width), vocab.eos, dtype=np.int64)
    out = np.full((len(transcripts), width), vocab.eos, dtype=np.int64)
    for i, y in enumerate(transcripts):
        inp[i, 0] = vocab.sos
        inp[i, 1 : len(y) + 1] = y
        out[i, : len(y)] = y
    return inp, out, lengths


class TSTRM(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocabulary(cfg.n_tokens)
        scfg = cfg.stream_config()
        tcfg = cfg.transformer_config()
        self.shallow = ShallowStream(scfg, rng) if cfg.streams in ("both", "shallow") else None
        self.deep = DeepStream(scfg, rng) if cfg.streams in ("both", "deep") else None
        self.shallow_strides = layer_strides(scfg.shallow_rows)
        self.grid_freq = output_length(cfg.feature_dim, self.shallow_strides)
        if cfg.streams == "both":
            self.fusion = build_fusion(cfg.fusion, scfg.shallow_out_channels, scfg.deep_out_channels, rng)
            channels = self.fusion.out_channels()
        else:
            self.fusion = None
            channels = scfg.shallow_out_channels if cfg.streams == "shallow" else scfg.deep_out_channels
        self.fused_channels = channels
        self.proj = Linear(channels * self.grid_freq, cfg.d_m, rng)
        self.encoder = Encoder(tcfg, rng)
        self.ctc_head = Linear(cfg.d_m, self.vocab.ctc_size, rng, init_scale=cfg.head_init_scale)
        self.decoder = Decoder(tcfg, self.vocab.decoder_size, rng, out_init_scale=cfg.head_init_scale)

    # -- front half ---------------------------------------------------------------------

    def grid_lengths(self, high_lengths: np.ndarray) -> np.ndarray:
        return np.array([output_length(int(n), self.shallow_strides) for n in high_lengths], dtype=np.int64)

    def streams(self, batch: Batch) -> StreamOutputs:
        if batch.high.shape[3] != self.cfg.feature_dim:
            raise DimensionError(f"model expects {self.cfg.feature_dim} feature bins, got {batch.high.shape[3]}")
        xs = ls = xd = ld = None
        if self.shallow is not None:
            xs, ls = self.shallow(batch.high, batch.high_lengths)
        if self.deep is not None:
            xd, ld = self.deep(batch.low, batch.low_lengths)
        return StreamOutputs(xs, ls, xd, ld)

    def fused(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        """(N, C, t, f) map on the shallow grid and the valid grid lengths."""
        out = self.streams(batch)
        lengths = self.grid_lengths(batch.high_lengths)
        t = output_length(batch.high.shape[2], self.shallow_strides)
        if out.deep is not None:
            xd = bilinear_resize(out.deep, t, self.grid_freq, out.deep_lengths, lengths)
            if out.shallow is None:
                return xd, lengths
            return self.fusion(out.shallow, xd, lengths), lengths
        return out.shallow, lengths

    def encode(self, batch: Batch, rng=None) -> tuple[Tensor, np.ndarray]:
        x, lengths = self.fused(batch)
        n, c, t, f = x.shape
        seq = self.proj(x.transpose(0, 2, 1, 3).reshape(n, t, c * f))
        return self.encoder(seq, lengths, rng), lengths

    # -- heads and losses ----------------------------------------------------------------

    def ctc_logprobs(self, memory: Tensor) -> Tensor:
        return log_softmax(self.ctc_head(memory), axis=-1)

    def losses(self, batch: Batch, transcripts: Sequence[Sequence[int]], rng=None) -> tuple[Tensor, LossBreakdown]:
        """Batch-mean joint objective and its per-term breakdown."""
        for y in transcripts:
            self.vocab.check_transcript(y)
        memory, lengths = self.encode(batch, rng)
        ctc = ctc_loss_batch(self.ctc_logprobs(memory), transcripts, lengths)
        inp, out, out_lengths = decoder_io(transcripts, self.vocab)
        logits = self.decoder(inp, memory, lengths, rng)
        att = attention_ce_batch(logits, out, out_lengths, self.cfg.label_smoothing)
        lam = self.cfg.ctc_weight
        joint = (ctc * lam + att * (1.0 - lam)).mean()
        return joint, LossBreakdown(float(ctc.data.mean()), float(att.data.mean()), float(joint.data), lam)

    # -- decoding ------------------------------------------------------------------------

    def decoder_exclude(self) -> list[int]:
        """Decoder outputs that can never be emitted: the blank slot and sos."""
        return [self.vocab.blank, self.vocab.sos]

    def greedy_decode(self, batch: Batch, max_len: int) -> list[tuple[list[int], float]]:
        """Batched attention-only greedy decoding; returns (tokens, log-prob) per utterance."""
        with no_grad():
            memory, lengths = self.encode(batch)
            n = memory.shape[0]
            ids = np.full((n, 1), self.vocab.sos, dtype=np.int64)
            scores = np.zeros(n)
            done = np.zeros(n, dtype=bool)
            for _ in range(max_len):
                logits = self.decoder(ids, memory, lengths).data[:, -1].copy()
                logits[:, self.decoder_exclude()] = -np.inf
                lp = log_softmax(Tensor(logits), axis=-1).data
                best = lp.argmax(axis=-1)
                scores += np.where(done, 0.0, lp[np.arange(n), best])
                ids = np.concatenate([ids, np.where(done, self.vocab.eos, best)[:, None]], axis=1)
                done |= best == self.vocab.eos
                if done.all():
                    break
        results = []
        for i in range(n):
            toks = []
            for t in ids[i, 1:]:
                if t == self.vocab.eos:
                    break
                toks.append(int(t))
            results.append((toks, float(scores[i])))
        return results
