"""Utterance embeddings from either stream, and a linear speaker probe on them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import TSTRM, make_batch
from .tensor import no_grad

STREAM_CHOICES = ("shallow", "deep")


class ProbeInputError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    ids: list[str]
    speakers: np.ndarray  # (n,) int
    vectors: np.ndarray  # (n, c)


def utterance_embeddings(model: TSTRM, examples: Sequence, which: str, batch_size: int = 32) -> EmbeddingTable:
    """Mean of the chosen stream's output map over valid frames and all frequency bins."""
    if which not in STREAM_CHOICES:
        raise ValueError(f"stream must be one of {STREAM_CHOICES}, got {which!r}")
    stream = model.shallow if which == "shallow" else model.deep
    if stream is None:
        raise ValueError(f"this model has no {which} stream")
    model.eval()
    vecs = []
    with no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = make_batch([ex.features for ex in chunk], model.cfg.resolution_ratio)
            x, lengths = (batch.high, batch.high_lengths) if which == "shallow" else (batch.low, batch.low_lengths)
            y, out_lengths = stream(x, lengths)
            # padded frames are exactly zero, so a plain sum over time is the valid sum
            total = y.data.sum(axis=(2, 3))
            vecs.append(total / (out_lengths[:, None] * y.shape[3]))
    return EmbeddingTable([ex.id for ex in examples], np.array([ex.speaker_id for ex in examples]), np.concatenate(vecs))


def write_embeddings(path: str | Path, table: EmbeddingTable) -> None:
    c = table.vectors.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["utt_id", "speaker_id", *(f"v{i + 1}" for i in range(c))]) + "\n")
        for uid, spk, v in zip(table.ids, table.speakers, table.vectors):
            fh.write(",".join([uid, str(int(spk)), *(repr(float(x)) for x in v)]) + "\n")


def read_embeddings(path: str | Path) -> EmbeddingTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("utt_id,speaker_id"):
        raise ProbeInputError(f"{path}: missing 'utt_id,speaker_id,...' header")
    ids, spk, vecs = [], [], []
    try:
        for line in lines[1:]:
            parts = line.split(",")
            ids.append(parts[0])
            spk.append(int(parts[1]))
            vecs.append([float(x) for x in parts[2:]])
    except (ValueError, IndexError) as exc:
        raise ProbeInputError(f"{path}: {exc}") from None
    return EmbeddingTable(ids, np.array(spk), np.array(vecs, dtype=np.float64))


def stratified_split(labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per class, a seeded shuffle puts the first half in train and the rest in test."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        half = len(idx) // 2
        train.extend(idx[:half])
        test.extend(idx[half:])
    return np.sort(train), np.sort(test)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 500, lr: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on the mean cross-entropy, from zero weights."""
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(y)
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def speaker_probe(vectors: np.ndarray, speakers: np.ndarray, seed: int = 0, steps: int = 500) -> float:
    """Held-out accuracy of a multinomial logistic regression predicting the speaker."""
    vectors = np.asarray(vectors, dtype=np.float64)
    speakers = np.asarray(speakers)
    classes, y = np.unique(speakers, return_inverse=True)
    if len(classes) < 2:
        raise ProbeInputError("the probe needs at least two speakers")
    counts = np.bincount(y)
    if counts.min() < 4:
        raise ProbeInputError(f"every speaker needs at least 4 utterances; smallest has {counts.min()}")
    tr, te = stratified_split(y, seed)
    mu = vectors[tr].mean(axis=0)
    sd = vectors[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (vectors - mu) / sd
    w, b = fit_softmax_regression(z[tr], y[tr], len(classes), steps)
    pred = np.argmax(z[te] @ w + b, axis=1)
    return float(np.mean(pred == y[te]))
