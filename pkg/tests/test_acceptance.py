"""End-to-end acceptance criteria; the summary prints one PASS/FAIL line per criterion.

Criteria 6 to 8 train the tiny preset on the synthetic corpus and take a few
minutes each on one core.
"""

import itertools
import math
import time

import numpy as np
import pytest

from tstrm.ablation import run_ablation
from tstrm.checks import standard_checks
from tstrm.cli import main
from tstrm.config import ModelConfig, config_to_text, override, tiny_config
from tstrm.decode import edit_distance_rate
from tstrm.embeddings import read_embeddings, speaker_probe
from tstrm.formats import checkpoint_bytes, load_checkpoint
from tstrm.fusion import FeatureCorrelationFusion
from tstrm.losses import ctc_loss, ctc_min_frames
from tstrm.model import TSTRM, make_batch
from tstrm.tensor import Tensor, no_grad
from tstrm.train import load_examples
from tstrm.transformer import Decoder, TransformerConfig, attention, causal_mask, length_mask

# speaker_tilt_scale for the probe corpus: the highest swept value at which the
# recognizer still trains (dev CER about 0.2); frozen after one sweep
PROBE_TILT = 2.0


def conf_file(tmp_path, cfg, name="run.conf"):
    path = tmp_path / name
    path.write_text(config_to_text(cfg), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """The tiny preset's synthetic corpus written through the command line."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = tiny_config()
    assert main(["synth-data", "--config", conf_file(root, cfg), "--out", str(root / "data")]) == 0
    return cfg, root, root / "data"


def brute_force_ctc(lp, target):
    total = 0.0
    for path in itertools.product(range(lp.shape[1]), repeat=lp.shape[0]):
        collapsed = [s for i, s in enumerate(path) if s != 0 and (i == 0 or s != path[i - 1])]
        if collapsed == list(target):
            total += math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return -math.log(total)


def direct_fcf(xs, xd, a1, a2, a3):
    """Straight-line fusion for one utterance with explicit loops over channels and positions."""
    c, t, f = xs.shape
    d = t * f
    s = xs.reshape(c, d)
    deep = xd.reshape(c, d)
    p1 = [[sum(a1[i, k] * s[k, j] for k in range(c)) for j in range(d)] for i in range(c)]
    p2 = [[sum(a2[i, k] * deep[k, j] for k in range(c)) for j in range(d)] for i in range(c)]
    p3 = [[sum(a3[i, k] * s[k, j] for k in range(c)) for j in range(d)] for i in range(c)]
    out = np.zeros((2 * c, d))
    for i in range(c):
        logits = [sum(p1[i][q] * p2[j][q] for q in range(d)) / math.sqrt(d) for j in range(c)]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        w = [v / sum(e) for v in e]
        for q in range(d):
            out[i, q] = sum(w[j] * p3[j][q] for j in range(c)) + p2[i][q]
            out[c + i, q] = s[i, q]
    return out.reshape(2 * c, t, f)


def conv_out(n, strides):
    for s in strides:
        n = (n + 2 * 1 - 3) // s + 1
    return n


def row_strides(rows):
    return [stride if r == 0 else 1 for _, _, reps, stride in rows for r in range(reps)]


@pytest.mark.criterion(1, "CTC dynamic programme equals brute-force alignment enumeration")
def test_criterion_1_ctc_oracle():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 5))
        while True:
            t = int(rng.integers(1, 7))
            target = rng.integers(1, c, size=int(rng.integers(1, 4))).tolist()
            if ctc_min_frames(target) <= t:
                break
        z = rng.normal(size=(t, c)) * 2
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        worst = max(worst, abs(ctc_loss(Tensor(lp), target).item() - brute_force_ctc(lp, target)))
    elapsed = time.perf_counter() - start
    print(f"max |dp - brute| = {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 5.0


@pytest.mark.criterion(2, "finite-difference gradient checks of every layer")
def test_criterion_2_gradients():
    start = time.perf_counter()
    reports = standard_checks(seed=0, eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - start
    for r in reports:
        print(r)
    names = {r.op_name for r in reports}
    assert {"conv2d", "batchnorm", "bottleneck", "bilinear_resize", "fcf", "attention"} <= names
    assert {"encoder_layer", "decoder_layer", "ctc_loss", "attention_ce"} <= names
    assert all(r.passed for r in reports)
    assert elapsed < 120.0


@pytest.mark.criterion(3, "softmax rows sum to one; decoder is causal")
def test_criterion_3_normalisation():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        c = int(rng.integers(1, 6))
        fcf = FeatureCorrelationFusion(c, rng)
        fcf(Tensor(rng.normal(size=(2, c, 3, 4)) * 3), Tensor(rng.normal(size=(2, c, 3, 4)) * 3), np.array([3, 2]))
        worst = max(worst, np.abs(fcf.last_weights.sum(axis=-1) - 1).max())
        q = Tensor(rng.normal(size=(2, 5, 8)) * 3)
        k, v = Tensor(rng.normal(size=(2, 7, 8)) * 3), Tensor(rng.normal(size=(2, 7, 8)))
        _, w = attention(q, k, v, length_mask([7, 4], 7), return_weights=True)
        worst = max(worst, np.abs(w.data.sum(axis=-1) - 1).max())
        _, w = attention(q, q, q, causal_mask(5), return_weights=True)
        worst = max(worst, np.abs(w.data.sum(axis=-1) - 1).max())
    assert worst <= 1e-12

    cfg = TransformerConfig(n_enc_layers=1, n_dec_layers=2, n_heads=2, d_m=16, d_ff=32, dropout_rate=0.0)
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        dec = Decoder(cfg, 9, r)
        memory = Tensor(r.normal(size=(1, 6, 16)))
        tokens = r.integers(0, 9, size=(1, 7))
        i = int(r.integers(0, 6))
        altered = tokens.copy()
        altered[0, i + 1 :] = (tokens[0, i + 1 :] + 1 + r.integers(0, 8, size=6 - i)) % 9
        with no_grad():
            a, b = dec(tokens, memory).data, dec(altered, memory).data
        assert np.array_equal(a[0, : i + 1], b[0, : i + 1])
        assert not np.allclose(a[0, i + 1 :], b[0, i + 1 :])


@pytest.mark.criterion(4, "fusion module equals a straight-line evaluation")
def test_criterion_4_fcf_oracle():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        c, t, f = (int(v) for v in rng.integers(1, [5, 4, 4]))
        fcf = FeatureCorrelationFusion(c, rng)
        xs, xd = rng.normal(size=(c, t, f)), rng.normal(size=(c, t, f))
        out = fcf(Tensor(xs[None]), Tensor(xd[None])).data[0]
        ref = direct_fcf(xs, xd, fcf.f1.weight.data, fcf.f2.weight.data, fcf.f3.weight.data)
        worst = max(worst, np.abs(out - ref).max())
    assert worst <= 1e-10


@pytest.mark.criterion(5, "full-size shape law for T in {64, 128, 256} and D = 129")
def test_criterion_5_shape_law():
    cfg = ModelConfig()
    model = TSTRM(cfg, np.random.default_rng(0))
    model.eval()
    shallow_strides = row_strides(cfg.shallow_rows)
    deep_strides = row_strides(cfg.deep_rows)
    assert math.prod(shallow_strides) == 4 and math.prod(deep_strides) == 8
    for t in (64, 128, 256):
        batch = make_batch([np.random.default_rng(t).normal(size=(t, 129))], cfg.resolution_ratio)
        assert batch.low.shape[2] == math.ceil(t / 4)
        with no_grad():
            outs = model.streams(batch)
            fused, _ = model.fused(batch)
            memory, lengths = model.encode(batch)
        grid = (conv_out(t, shallow_strides), conv_out(129, shallow_strides))
        deep_grid = (conv_out(math.ceil(t / 4), deep_strides), conv_out(129, deep_strides))
        assert outs.shallow.shape == (1, 256, *grid)
        assert outs.deep.shape == (1, 256, *deep_grid)
        assert fused.shape == (1, 512, *grid)
        assert memory.shape == (1, grid[0], 256) and lengths.tolist() == [grid[0]]
        assert grid[0] == t // 4 and deep_grid[0] == t // 32
        print(f"T={t}: shallow {outs.shallow.shape}, deep {outs.deep.shape}, fused {fused.shape}, encoder {memory.shape}")


@pytest.mark.criterion(6, "tiny preset reaches held-out CER <= 0.10 within 30 epochs")
def test_criterion_6_learnability(corpus):
    cfg, root, data = corpus
    assert cfg.train.epochs <= 30
    assert (cfg.synth.n_speakers, cfg.synth.n_tokens, cfg.synth.utterances_per_speaker, cfg.synth.seed) == (8, 16, 40, 7)
    run = root / "learn"
    start = time.perf_counter()
    args = ["train", "--config", conf_file(root, cfg), "--out", str(run)]
    args += ["--train-manifest", str(data / "train.tsv"), "--dev-manifest", str(data / "dev.tsv")]
    assert main(args) == 0
    elapsed = time.perf_counter() - start
    assert main(["evaluate", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(data / "test.tsv"), "--out", str(run / "test.csv")]) == 0
    rows = [line.split(",") for line in (run / "test.csv").read_text().splitlines()[1:]]
    errors = sum(int(r[3]) + int(r[4]) + int(r[5]) for r in rows)
    cer = errors / sum(int(r[6]) for r in rows)
    print(f"held-out CER {cer:.4f} over {len(rows)} utterances, training {elapsed:.0f}s")
    assert cer <= 0.10
    assert elapsed < 20 * 60


@pytest.mark.criterion(7, "stream ablation: deep-only is worst and both <= deep-only")
def test_criterion_7_stream_ablation(corpus):
    cfg, root, data = corpus
    rows = run_ablation("streams", cfg, root / "ablate", load_examples(data / "train.tsv"), load_examples(data / "dev.tsv"))
    cer = {r.variant: r.dev_cer for r in rows}
    print("dev CER " + ", ".join(f"{k} {v:.4f}" for k, v in cer.items()) + f"; shallow - both {cer['shallow'] - cer['both']:+.4f}")
    assert cer["both"] <= cer["deep"]
    assert cer["deep"] >= max(cer["shallow"], cer["both"])


@pytest.mark.criterion(8, "speaker probe: deep-stream embeddings beat shallow by >= 0.10")
def test_criterion_8_speaker_probe(tmp_path):
    cfg = override(tiny_config(), **{"synth.speaker_tilt_scale": PROBE_TILT})
    conf = conf_file(tmp_path, cfg)
    data = tmp_path / "data"
    assert main(["synth-data", "--config", conf, "--out", str(data)]) == 0
    args = ["train", "--config", conf, "--out", str(tmp_path / "run")]
    args += ["--train-manifest", str(data / "train.tsv"), "--dev-manifest", str(data / "dev.tsv")]
    assert main(args) == 0
    acc = {}
    for stream in ("shallow", "deep"):
        out = tmp_path / f"{stream}.csv"
        ckpt = str(tmp_path / "run" / "best.ckpt")
        assert main(["dump-embeddings", "--checkpoint", ckpt, "--manifest", str(data / "manifest.tsv"), "--stream", stream, "--out", str(out)]) == 0
        table = read_embeddings(out)
        acc[stream] = speaker_probe(table.vectors, table.speakers)
    print(f"tilt {PROBE_TILT}: probe accuracy shallow {acc['shallow']:.4f}, deep {acc['deep']:.4f}")
    assert acc["deep"] >= 0.8
    assert acc["deep"] - acc["shallow"] >= 0.10


@pytest.mark.criterion(9, "identical seeds give identical metrics; checkpoints round-trip bitwise")
def test_criterion_9_determinism(corpus):
    cfg, root, data = corpus
    cfg = override(cfg, **{"train.epochs": 2})
    conf = conf_file(root, cfg, "short.conf")
    for name in ("det_a", "det_b"):
        args = ["train", "--config", conf, "--out", str(root / name), "--seed", "11", "--threads", "1"]
        args += ["--train-manifest", str(data / "dev.tsv"), "--dev-manifest", str(data / "test.tsv")]
        assert main(args) == 0
    a, b = root / "det_a", root / "det_b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()
    for name in ("best.ckpt", "last.ckpt"):
        raw = (a / name).read_bytes()
        assert checkpoint_bytes(load_checkpoint(a / name)) == raw


@pytest.mark.criterion(10, "Levenshtein DP equals the recursive definition")
def test_criterion_10_edit_distance():
    def recursive(a, b):
        if not a:
            return len(b)
        if not b:
            return len(a)
        return min(recursive(a[1:], b) + 1, recursive(a, b[1:]) + 1, recursive(a[1:], b[1:]) + (a[0] != b[0]))

    for seed in range(200):
        rng = np.random.default_rng(seed)
        hyp = rng.integers(0, 4, size=rng.integers(0, 7)).tolist()
        ref = rng.integers(0, 4, size=rng.integers(1, 7)).tolist()
        assert edit_distance_rate(hyp, ref).errors == recursive(hyp, ref)
