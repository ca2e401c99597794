"""CTC, label-smoothed attention cross-entropy, and their weighted combination.

Token id conventions (``Vocabulary``): 0 is the CTC blank, real tokens are
1..n_tokens, so CTC heads emit ``n_tokens + 1`` classes. The decoder adds
sos = n_tokens + 1 and eos = n_tokens + 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, log_softmax, mul, sum as tsum

BLANK = 0
NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The target cannot be aligned to the given number of frames."""


@dataclass(frozen=True)
class Vocabulary:
    n_tokens: int

    @property
    def blank(self) -> int:
        return BLANK

    @property
    def ctc_size(self) -> int:
        return self.n_tokens + 1

    @property
    def sos(self) -> int:
        return self.n_tokens + 1

    @property
    def eos(self) -> int:
        return self.n_tokens + 2

    @property
    def decoder_size(self) -> int:
        return self.n_tokens + 3

    def check_transcript(self, ids) -> None:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 1 or ids.max() > self.n_tokens):
            raise ValueError(f"token ids must lie in 1..{self.n_tokens}, got {ids.tolist()}")


@dataclass(frozen=True)
class LossBreakdown:
    ctc: float
    att: float
    joint: float
    lam: float


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """allow[s]: a path may jump from s-2 straight to s."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(lp: np.ndarray, target: np.ndarray, blank: int = BLANK):
    """Log-space alpha/beta recursions for one utterance.

    Returns (negative log likelihood, gradient w.r.t. ``lp``), where ``lp``
    is the (T, C) matrix of per-frame log-probabilities.
    """
    t_len = lp.shape[0]
    target = np.asarray(target, dtype=np.int64)
    if len(target) and (target == blank).any():
        raise ValueError("CTC targets must not contain the blank id")
    need = ctc_min_frames(target)
    if t_len < max(need, 1):
        raise CTCInfeasibleError(f"target of length {len(target)} needs {need} frames, only {t_len} available")
    ext = _extend(target, blank)
    s_len = len(ext)
    allow = _skip_allowed(ext, blank)
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        shift1 = np.concatenate(([NEG_INF], prev[:-1]))
        shift2 = np.where(allow, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
        alpha[t] = _lse3(prev, shift1, shift2) + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    allow_next = np.concatenate((allow[2:], [False, False]))  # jump s -> s+2
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.concatenate((nxt[1:], [NEG_INF]))
        shift2 = np.where(allow_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), NEG_INF)
        beta[t] = _lse3(nxt, shift1, shift2) + emit[t]

    ends = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    log_p = float(ends)
    with np.errstate(invalid="ignore"):
        occupancy = np.exp(alpha + beta - emit - log_p)  # posterior of passing (t, s)
    occupancy = np.nan_to_num(occupancy, nan=0.0)
    grad = np.zeros_like(lp)
    for s in range(s_len):
        grad[:, ext[s]] -= occupancy[:, s]
    return -log_p, grad


def ctc_loss(logprobs: Tensor, target: Sequence[int], blank: int = BLANK) -> Tensor:
    """-log P(target | frames) for a (T, C) matrix of log-softmax outputs."""
    nll, grad = ctc_forward_backward(logprobs.data, np.asarray(target, dtype=np.int64), blank)
    return Tensor._make(np.asarray(nll), (logprobs,), lambda g: (g * grad,), "ctc_loss")


def ctc_loss_batch(logprobs: Tensor, targets: Sequence[Sequence[int]], lengths, blank: int = BLANK) -> Tensor:
    """Per-utterance CTC losses, shape (N,), for (N, T, C) log-probabilities.

    Frames at or beyond ``lengths[i]`` are ignored.
    """
    n = logprobs.shape[0]
    nll = np.zeros(n)
    grad = np.zeros_like(logprobs.data)
    for i in range(n):
        t_i = int(lengths[i])
        nll[i], grad[i, :t_i] = ctc_forward_backward(logprobs.data[i, :t_i], np.asarray(targets[i], dtype=np.int64), blank)

    def backward(g):
        return (g[:, None, None] * grad,)

    return Tensor._make(nll, (logprobs,), backward, "ctc_loss")


def smoothed_targets(target: np.ndarray, k: int, smoothing: float) -> np.ndarray:
    """Rows put 1 - smoothing on the true class and smoothing / (k - 1) elsewhere."""
    target = np.asarray(target, dtype=np.int64)
    off = smoothing / (k - 1) if k > 1 else 0.0
    q = np.full(target.shape + (k,), off)
    np.put_along_axis(q, target[..., None], 1.0 - smoothing, axis=-1)
    return q


def attention_ce(logits: Tensor, target_out: Sequence[int], smoothing: float = 0.1) -> Tensor:
    """Mean over positions of label-smoothed cross-entropy for (L, K) logits."""
    target = np.asarray(target_out, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(target):
        raise ValueError(f"logits {logits.shape} do not match a target of length {len(target)}")
    q = smoothed_targets(target, logits.shape[-1], smoothing)
    per_pos = -tsum(mul(log_softmax(logits, axis=-1), q), axis=-1)
    return per_pos.mean()


def attention_ce_batch(logits: Tensor, targets: np.ndarray, lengths, smoothing: float = 0.1) -> Tensor:
    """Per-utterance mean smoothed CE, shape (N,), for (N, L, K) logits and padded targets."""
    n, length, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    lengths = np.asarray(lengths)
    valid = (np.arange(length)[None, :] < lengths[:, None]).astype(np.float64)
    q = smoothed_targets(np.where(valid > 0, targets, 0), k, smoothing) * valid[..., None] / lengths[:, None, None]
    return -tsum(mul(log_softmax(logits, axis=-1), q), axis=(1, 2))


def joint_loss(ctc: float, att: float, lam: float = 0.3) -> LossBreakdown:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return LossBreakdown(float(ctc), float(att), lam * float(ctc) + (1.0 - lam) * float(att), lam)


def joint_objective(ctc: Tensor, att: Tensor, lam: float = 0.3) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return ctc * lam + att * (1.0 - lam)
