"""Synthetic speech-like corpus with controllable speaker character.

Each token k in 1..n_tokens owns a mel bin; while k is spoken every frame
carries a Gaussian bump centred on that bin. A speaker adds a fixed per-bin
tilt and a constant energy offset (both scaled by ``speaker_tilt_scale``)
to every frame, and white Gaussian noise is added on top. All randomness
comes from :class:`~tstrm.rng.Xoshiro256` streams derived from the seed, so
the corpus is identical on every platform.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthSpec
from .formats import Utterance, write_manifest, write_tstf
from .rng import Xoshiro256, derive_seed

SPEAKER_STREAM = 0
UTTERANCE_STREAM = 1


class CorpusExistsError(FileExistsError):
    pass


def token_bin(k: int, n_mels: int, n_tokens: int) -> int:
    """Mel bin of token k (1-based)."""
    return ((k - 1) * n_mels) // n_tokens


@dataclass(frozen=True)
class Speaker:
    tilt: np.ndarray  # (n_mels,)
    offset: float


@dataclass(frozen=True)
class SynthUtterance:
    id: str
    speaker_id: int
    tokens: tuple[int, ...]
    durations: tuple[int, ...]
    features: np.ndarray  # (T, n_mels)

    @property
    def gender(self) -> int:
        return self.speaker_id % 2


def make_speaker(spec: SynthSpec, speaker_id: int) -> Speaker:
    rng = Xoshiro256(derive_seed(spec.seed, SPEAKER_STREAM, speaker_id))
    tilt = np.array(rng.normals(spec.n_mels)) * spec.speaker_tilt_scale
    offset = rng.normal() * spec.speaker_tilt_scale
    return Speaker(tilt, offset)


def draw_transcript(rng: Xoshiro256, spec: SynthSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Token ids without immediate repeats, and a duration per token."""
    length = rng.integer(spec.min_transcript_len, spec.max_transcript_len)
    tokens = [rng.integer(1, spec.n_tokens)]
    for _ in range(length - 1):
        t = rng.integer(1, spec.n_tokens - 1)
        tokens.append(t + 1 if t >= tokens[-1] else t)
    durations = [rng.integer(spec.min_frames_per_token, spec.max_frames_per_token) for _ in tokens]
    return tuple(tokens), tuple(durations)


def render(spec: SynthSpec, tokens, durations, speaker: Speaker, rng: Xoshiro256 | None = None) -> np.ndarray:
    """(T, n_mels) features; noise is drawn from ``rng`` when noise_sigma > 0."""
    bins = np.arange(spec.n_mels)
    rows = []
    for k, d in zip(tokens, durations):
        centre = token_bin(k, spec.n_mels, spec.n_tokens)
        bump = spec.bump_height * np.exp(-0.5 * ((bins - centre) / spec.bump_width) ** 2)
        rows.append(np.tile(bump, (d, 1)))
    x = np.concatenate(rows, axis=0) + speaker.tilt + speaker.offset
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs a random stream")
        x = x + spec.noise_sigma * np.array(rng.normals(x.size)).reshape(x.shape)
    return x


def utterance_id(speaker_id: int, index: int) -> str:
    return f"spk{speaker_id:02d}_utt{index:03d}"


def generate(spec: SynthSpec) -> list[SynthUtterance]:
    """Every utterance of the corpus, speaker-major."""
    out = []
    for s in range(spec.n_speakers):
        speaker = make_speaker(spec, s)
        for j in range(spec.utterances_per_speaker):
            rng = Xoshiro256(derive_seed(spec.seed, UTTERANCE_STREAM, s * spec.utterances_per_speaker + j))
            tokens, durations = draw_transcript(rng, spec)
            feats = render(spec, tokens, durations, speaker, rng)
            out.append(SynthUtterance(utterance_id(s, j), s, tokens, durations, feats))
    return out


def split_of(index: int, spec: SynthSpec) -> str:
    """Per speaker: the last utterances go to test, the ones before them to dev."""
    n = spec.utterances_per_speaker
    n_test = int(round(n * spec.test_fraction))
    n_dev = int(round(n * spec.dev_fraction))
    if index >= n - n_test:
        return "test"
    if index >= n - n_test - n_dev:
        return "dev"
    return "train"


def write_corpus(spec: SynthSpec, out_dir: str | Path, force: bool = False) -> dict[str, Path]:
    """Write feature files plus manifest/train/dev/test TSVs; returns the manifest paths."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CorpusExistsError(f"{out} already exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
    everything = []
    for i, utt in enumerate(generate(spec)):
        rel = f"feats/{utt.id}.tstf"
        write_tstf(out / rel, utt.features)
        entry = Utterance(utt.id, rel, utt.tokens, utt.speaker_id, utt.gender)
        everything.append(entry)
        splits[split_of(i % spec.utterances_per_speaker, spec)].append(entry)
    paths = {"manifest": out / "manifest.tsv"}
    write_manifest(paths["manifest"], everything)
    for name, entries in splits.items():
        paths[name] = out / f"{name}.tsv"
        write_manifest(paths[name], entries)
    return paths
