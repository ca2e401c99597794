"""Attention-only greedy and beam decoding, plus Levenshtein scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, log_softmax, no_grad

# maps a batch of prefixes (each starting with sos) to next-token log-probs, shape (B, K)
StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]  # without sos; ends with eos when finished
    score: float
    finished: bool = False

    def transcript(self, eos: int) -> list[int]:
        return [t for t in self.tokens if t != eos]

    def normalized_score(self) -> float:
        return self.score / max(len(self.tokens), 1)


@dataclass
class ErrorRateReport:
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int
    errors: int = field(init=False)
    rate: float = field(init=False)

    def __post_init__(self):
        self.errors = self.substitutions + self.insertions + self.deletions
        self.rate = self.errors / self.reference_length if self.reference_length else float("nan")

    def __add__(self, other: "ErrorRateReport") -> "ErrorRateReport":
        return ErrorRateReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_length + other.reference_length,
        )


def model_step_fn(decoder, memory: Tensor, memory_lengths=None, exclude: Sequence[int] = ()) -> StepFn:
    """Wrap a decoder and one utterance's (1, t, d_m) memory as a :data:`StepFn`."""

    def step(prefixes: list[list[int]]) -> np.ndarray:
        ids = np.asarray(prefixes, dtype=np.int64)
        mem = Tensor(np.repeat(memory.data, len(prefixes), axis=0))
        lens = None if memory_lengths is None else np.repeat(np.asarray(memory_lengths), len(prefixes))
        with no_grad():
            logits = decoder(ids, mem, lens).data[:, -1]
        if exclude:
            logits = logits.copy()
            logits[:, list(exclude)] = -np.inf
        return log_softmax(Tensor(logits), axis=-1).data

    return step


def greedy_search(step: StepFn, sos: int, eos: int, max_len: int) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        lp = step([[sos] + tokens])[0]
        best = int(np.argmax(lp))
        score += float(lp[best])
        tokens.append(best)
        if best == eos:
            return Hypothesis(tokens, score, True)
    return Hypothesis(tokens, score, False)


def beam_search(step: StepFn, sos: int, eos: int, max_len: int, beam: int = 4, length_norm: bool = True) -> list[Hypothesis]:
    """Fixed-width beam search; returns hypotheses best first.

    A hypothesis finishes when it emits eos. Search stops after ``max_len``
    steps or once ``beam`` hypotheses have finished. Final ranking uses
    score / length when ``length_norm``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    def rank(h: Hypothesis) -> float:
        return h.normalized_score() if length_norm else h.score

    live = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = step([[sos] + h.tokens for h in live])
        cands: list[tuple[float, int, int]] = []
        for i, h in enumerate(live):
            for k in np.argsort(-lp[i], kind="stable")[:beam]:
                if np.isfinite(lp[i, k]):
                    cands.append((h.score + float(lp[i, k]), i, int(k)))
        # live prefixes share one length, so raw scores rank them
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, i, k in cands[:beam]:
            h = Hypothesis(live[i].tokens + [k], score, k == eos)
            (finished if h.finished else next_live).append(h)
        live = next_live
        if not live or len(finished) >= beam:
            break
    pool = finished + live
    pool.sort(key=rank, reverse=True)
    return pool[:beam]


def edit_distance_rate(hyp: Sequence[int], ref: Sequence[int]) -> ErrorRateReport:
    """Unit-cost Levenshtein alignment; S/I/D counts come from the backtrace."""
    hyp, ref = list(hyp), list(ref)
    if not ref:
        raise ValueError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    d[0] = list(range(m + 1))
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorRateReport(s, ins, dels, n)


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    if not b:
        return len(a)
    return edit_distance_rate(a, b).errors
