"""Training driver: Adam with inverse-square-root warmup, metrics and checkpoints."""

from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config, ConfigError, config_to_text, parse_config
from .decode import ErrorRateReport, edit_distance_rate
from .formats import Checkpoint, FormatError, load_checkpoint, read_manifest, read_tstf, resolve, save_checkpoint
from .losses import LossBreakdown
from .model import TSTRM, make_batch
from .nn import Module

METRICS_HEADER = "epoch,step,ctc,att,joint,dev_cer"


class DataError(ValueError):
    """Unreadable or inconsistent corpus data."""


class NumericError(ArithmeticError):
    """A non-finite loss or gradient."""


@dataclass
class Example:
    id: str
    features: np.ndarray
    transcript: tuple[int, ...]
    speaker_id: int


def load_examples(manifest: str | Path) -> list[Example]:
    try:
        utts = read_manifest(manifest)
        return [Example(u.id, read_tstf(resolve(manifest, u)), u.transcript, u.speaker_id) for u in utts]
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from None


def check_compatible(examples: Sequence[Example], cfg: Config) -> None:
    for ex in examples:
        if ex.features.ndim != 2 or ex.features.shape[1] != cfg.model.feature_dim:
            raise ConfigError(f"{ex.id}: features {ex.features.shape} do not match model.feature_dim={cfg.model.feature_dim}")
        if ex.transcript and (min(ex.transcript) < 1 or max(ex.transcript) > cfg.model.n_tokens):
            raise ConfigError(f"{ex.id}: transcript uses ids outside the vocabulary 1..{cfg.model.n_tokens}")


# -- optimisation -----------------------------------------------------------------------


def noam_rate(step: int, d_m: int, warmup: int, factor: float) -> float:
    """factor * d_m^-0.5 * min(step^-0.5, step * warmup^-1.5), for step >= 1."""
    step = max(step, 1)
    return factor * d_m**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params  # name -> Parameter, canonical order
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])
        self.step_count = step


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- model construction and checkpoints ---------------------------------------------------


def build_model(cfg: Config) -> TSTRM:
    return TSTRM(cfg.model, np.random.default_rng(cfg.train.seed))


def make_checkpoint(model: Module, opt: Adam | None, cfg: Config, extra: dict | None = None) -> Checkpoint:
    return Checkpoint(
        dict(model.state_dict()),
        opt.state() if opt is not None else {},
        opt.step_count if opt is not None else 0,
        config_to_text(cfg),
        extra,
    )


def restore(path: str | Path) -> tuple[TSTRM, Config, Checkpoint]:
    try:
        ckpt = load_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from None
    cfg = parse_config(ckpt.config_text)
    model = build_model(cfg)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model, cfg, ckpt


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class UtteranceResult:
    id: str
    reference: tuple[int, ...]
    hypothesis: list[int]
    score: float
    report: ErrorRateReport


def decode_examples(model: TSTRM, examples: Sequence[Example], max_len: int, batch_size: int = 32) -> list[UtteranceResult]:
    was_training = model.training
    model.eval()
    results = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = make_batch([ex.features for ex in chunk], model.cfg.resolution_ratio)
        for ex, (hyp, score) in zip(chunk, model.greedy_decode(batch, max_len)):
            results.append(UtteranceResult(ex.id, ex.transcript, hyp, score, edit_distance_rate(hyp, ex.transcript)))
    model.train(was_training)
    return results


def aggregate(results: Sequence[UtteranceResult]) -> ErrorRateReport:
    total = ErrorRateReport(0, 0, 0, 0)
    for r in results:
        total = total + r.report
    return total


# -- training -----------------------------------------------------------------------------


def _shards(n: int, threads: int) -> list[slice]:
    threads = max(1, min(threads, n))
    bounds = np.linspace(0, n, threads + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


class Trainer:
    """One optimisation step per batch; optional data parallelism over batch shards.

    With ``threads > 1`` each shard runs forward/backward on its own model
    replica; gradients and batch-norm statistics are combined in shard-index
    order, so results are bitwise reproducible for a fixed thread count.
    """

    def __init__(self, model: TSTRM, cfg: Config):
        self.model = model
        self.cfg = cfg
        self.params = dict(model.named_parameters())
        self.opt = Adam(self.params)
        self.threads = max(1, cfg.train.threads)
        self.replicas = [copy.deepcopy(model) for _ in range(self.threads)] if self.threads > 1 else []
        seed = cfg.train.seed
        self.dropout_rngs = [np.random.default_rng([seed, 1, k]) for k in range(self.threads)]

    def _shard_grads(self, model: TSTRM, examples, rng):
        model.zero_grad()
        batch = make_batch([ex.features for ex in examples], model.cfg.resolution_ratio)
        loss, br = model.losses(batch, [ex.transcript for ex in examples], rng)
        if not np.isfinite(loss.data):
            return None, br
        loss.backward()
        return {k: p.grad for k, p in model.named_parameters()}, br

    def step(self, examples: Sequence[Example], batch_label: str) -> LossBreakdown:
        rngs = [None] * self.threads if self.cfg.train.deterministic else self.dropout_rngs
        n = len(examples)
        if self.threads == 1:
            grads, br = self._shard_grads(self.model, examples, rngs[0])
            parts = [(grads, br, n)]
        else:
            shards = _shards(n, self.threads)
            for rep in self.replicas:
                for k, p in rep.named_parameters():
                    p.data = self.params[k].data
            with ThreadPoolExecutor(len(shards)) as pool:
                futures = [
                    pool.submit(self._shard_grads, self.replicas[i], examples[s], rngs[i]) for i, s in enumerate(shards)
                ]
                parts = [(*f.result(), s.stop - s.start) for f, s in zip(futures, shards)]
            self._merge_buffers(len(shards))
        for grads, br, _ in parts:
            if grads is None or not np.isfinite(br.joint):
                raise NumericError(f"non-finite loss in batch {batch_label} (ctc={br.ctc}, att={br.att})")
        for k, p in self.params.items():
            p.grad = sum(g[k] * (m / n) for g, _, m in parts)
        norm = clip_gradients(self.params.values(), self.cfg.train.clip_norm)
        if not np.isfinite(norm):
            raise NumericError(f"non-finite gradient in batch {batch_label}")
        t = self.cfg.train
        self.opt.step(noam_rate(self.opt.step_count + 1, self.cfg.model.d_m, t.warmup_steps, t.lr_factor))
        w = [m / n for _, _, m in parts]
        return LossBreakdown(
            sum(wi * br.ctc for wi, (_, br, _) in zip(w, parts)),
            sum(wi * br.att for wi, (_, br, _) in zip(w, parts)),
            sum(wi * br.joint for wi, (_, br, _) in zip(w, parts)),
            self.cfg.model.ctc_weight,
        )

    def _merge_buffers(self, used: int) -> None:
        names = [k for k, _ in self.model.named_buffers()]
        merged = {}
        for k in names:
            vals = [dict(r.named_buffers())[k] for r in self.replicas[:used]]
            acc = vals[0].copy()
            for v in vals[1:]:
                acc = acc + v
            merged[k] = acc / used
        for k, v in merged.items():
            self.model.set_buffer(k, v)
            for r in self.replicas:
                r.set_buffer(k, v.copy())


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def train(cfg: Config, out_dir: str | Path, train_examples=None, dev_examples=None, log=None) -> dict:
    """Train, write ``metrics.csv``, ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.

    Returns a summary with the best dev CER and the checkpoint paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    if train_examples is None:
        if not t.train_manifest:
            raise ConfigError("train.train_manifest is not set")
        train_examples = load_examples(t.train_manifest)
    if dev_examples is None:
        dev_examples = load_examples(t.dev_manifest) if t.dev_manifest else []
    check_compatible(train_examples, cfg)
    check_compatible(dev_examples, cfg)
    if len(train_examples) < 2:
        raise DataError("training needs at least two utterances")

    model = build_model(cfg)
    model.train()
    trainer = Trainer(model, cfg)
    order_rng = np.random.default_rng([t.seed, 0])
    metrics = out / "metrics.csv"
    with open(metrics, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
    best = math.inf
    paths = {"metrics": metrics, "best": out / "best.ckpt", "last": out / "last.ckpt"}
    for epoch in range(1, t.epochs + 1):
        order = order_rng.permutation(len(train_examples))
        sums = np.zeros(3)
        count = 0
        for b, start in enumerate(range(0, len(order), t.batch_size)):
            idx = order[start : start + t.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two utterances
            br = trainer.step([train_examples[i] for i in idx], f"epoch {epoch} batch {b}")
            sums += np.array([br.ctc, br.att, br.joint]) * len(idx)
            count += len(idx)
        means = sums / max(count, 1)
        dev_cer = aggregate(decode_examples(model, dev_examples, t.max_decode_len)).rate if dev_examples else math.nan
        with open(metrics, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join([str(epoch), str(trainer.opt.step_count), *map(_fmt, means), _fmt(dev_cer)]) + "\n")
        if log is not None:
            log(f"epoch {epoch} step {trainer.opt.step_count} joint {means[2]:.4f} dev_cer {dev_cer:.4f}")
        ckpt = make_checkpoint(model, trainer.opt, cfg, {"epoch": epoch, "dev_cer": _fmt(dev_cer)})
        save_checkpoint(paths["last"], ckpt)
        if not dev_examples or dev_cer < best or epoch == 1:
            best = min(best, dev_cer) if dev_examples else best
            save_checkpoint(paths["best"], ckpt)
    return {"best_dev_cer": best, "model": model, **paths}
