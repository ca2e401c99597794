"""Scoring a checkpoint on a manifest and writing hypothesis files."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import ErrorRateReport, beam_search, model_step_fn
from .model import TSTRM, make_batch
from .tensor import no_grad
from .train import UtteranceResult, aggregate, check_compatible, decode_examples, load_examples, restore

PER_UTTERANCE_HEADER = ["utt_id", "reference", "hypothesis", "substitutions", "insertions", "deletions", "ref_len"]


def evaluate(checkpoint: str | Path, manifest: str | Path, out_csv: str | Path | None = None) -> ErrorRateReport:
    """Micro-averaged CER of greedy decoding; optionally writes one CSV row per utterance."""
    model, cfg, _ = restore(checkpoint)
    examples = load_examples(manifest)
    check_compatible(examples, cfg)
    results = decode_examples(model, examples, cfg.train.max_decode_len)
    if out_csv is not None:
        write_results(out_csv, results)
    return aggregate(results)


def write_results(path: str | Path, results: Sequence[UtteranceResult]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_UTTERANCE_HEADER)
        for r in results:
            rep = r.report
            w.writerow(
                [
                    r.id,
                    " ".join(map(str, r.reference)),
                    " ".join(map(str, r.hypothesis)),
                    rep.substitutions,
                    rep.insertions,
                    rep.deletions,
                    rep.reference_length,
                ]
            )


def beam_decode_utterance(model: TSTRM, features: np.ndarray, beam: int, max_len: int):
    """Beam search for a single utterance; returns hypotheses best first."""
    model.eval()
    with no_grad():
        memory, lengths = model.encode(make_batch([features], model.cfg.resolution_ratio))
    step = model_step_fn(model.decoder, memory, lengths, exclude=model.decoder_exclude())
    return beam_search(step, model.vocab.sos, model.vocab.eos, max_len, beam)


def decode_lines(checkpoint: str | Path, manifest: str | Path, beam: int = 1) -> list[str]:
    """``utt_id<TAB>score<TAB>token ids`` for every utterance in the manifest."""
    model, cfg, _ = restore(checkpoint)
    examples = load_examples(manifest)
    check_compatible(examples, cfg)
    lines = []
    if beam <= 1:
        for r in decode_examples(model, examples, cfg.train.max_decode_len):
            lines.append(f"{r.id}\t{r.score:.6f}\t{' '.join(map(str, r.hypothesis))}")
        return lines
    for ex in examples:
        best = beam_decode_utterance(model, ex.features, beam, cfg.train.max_decode_len)[0]
        toks = best.transcript(model.vocab.eos)
        lines.append(f"{ex.id}\t{best.score:.6f}\t{' '.join(map(str, toks))}")
    return lines
