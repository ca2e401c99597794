"""Synthetic corpus, file formats, configuration, training, probing and the command line."""

import math
import re
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tstrm.ablation import read_rows, run_ablation
from tstrm.cli import main
from tstrm.config import Config, ConfigError, SynthSpec, config_to_text, override, parse_config, tiny_config
from tstrm.embeddings import ProbeInputError, read_embeddings, speaker_probe, utterance_embeddings, write_embeddings
from tstrm.formats import (
    Checkpoint,
    FormatError,
    Utterance,
    checkpoint_bytes,
    load_checkpoint,
    read_manifest,
    read_tstf,
    resolve,
    save_checkpoint,
    write_manifest,
    write_tstf,
)
from tstrm.model import make_batch
from tstrm.synth import CorpusExistsError, generate, make_speaker, render, split_of, token_bin, write_corpus
from tstrm.train import (
    METRICS_HEADER,
    Adam,
    Example,
    NumericError,
    build_model,
    clip_gradients,
    make_checkpoint,
    noam_rate,
    restore,
    train,
)
from tstrm.tensor import Tensor

FIELD = re.compile(r"^-?\d+\.\d{6}$|^nan$")


def examples_of(spec):
    out = {"train": [], "dev": [], "test": []}
    for i, u in enumerate(generate(spec)):
        out[split_of(i % spec.utterances_per_speaker, spec)].append(Example(u.id, u.features, u.tokens, u.speaker_id))
    return out


def uniform_ctc_nll(t_len, target, n_classes):
    """-log P(target) under uniform frame posteriors: T log C - log(number of alignments)."""
    ext = [0]
    for y in target:
        ext += [y, 0]
    count = np.zeros(len(ext), dtype=object)
    count[0] = count[1] = 1
    for _ in range(1, t_len):
        new = count.copy()
        for s in range(1, len(ext)):
            new[s] += count[s - 1]
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                new[s] += count[s - 2]
        count = new
    return t_len * math.log(n_classes) - math.log(int(count[-1] + count[-2]))


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(n_speakers=2, utterances_per_speaker=3)
        a, b = generate(spec), generate(spec)
        assert all(x.id == y.id and np.array_equal(x.features, y.features) for x, y in zip(a, b))
        c = generate(SynthSpec(n_speakers=2, utterances_per_speaker=3, seed=8))
        assert not np.array_equal(a[0].features, c[0].features) or a[0].tokens != c[0].tokens

    def test_no_tilt_no_noise_is_speaker_independent(self):
        spec = SynthSpec(speaker_tilt_scale=0.0, noise_sigma=0.0)
        tokens, durations = (3, 9, 16), (8, 10, 12)
        a = render(spec, tokens, durations, make_speaker(spec, 0))
        b = render(spec, tokens, durations, make_speaker(spec, 5))
        assert np.array_equal(a, b)

    def test_token_bump_dominates_its_span(self):
        spec = SynthSpec(n_speakers=3, utterances_per_speaker=5, speaker_tilt_scale=0.0, noise_sigma=0.0)
        for u in generate(spec):
            start = 0
            for k, d in zip(u.tokens, u.durations):
                assert np.all(np.argmax(u.features[start : start + d], axis=1) == token_bin(k, spec.n_mels, spec.n_tokens))
                start += d

    @given(st.integers(1, 64), st.integers(1, 64))
    def test_token_bin_in_range(self, n_tokens, n_mels):
        bins = [token_bin(k, n_mels, n_tokens) for k in range(1, n_tokens + 1)]
        assert bins[0] == 0 and max(bins) < n_mels and bins == sorted(bins)

    def test_no_immediate_repeats(self):
        for u in generate(SynthSpec(n_speakers=2)):
            assert all(a != b for a, b in zip(u.tokens, u.tokens[1:]))

    def test_split_sizes(self):
        spec = SynthSpec()
        labels = [split_of(j, spec) for j in range(spec.utterances_per_speaker)]
        assert (labels.count("train"), labels.count("dev"), labels.count("test")) == (32, 4, 4)

    def test_write_refuses_overwrite(self, tmp_path):
        spec = SynthSpec(n_speakers=2, utterances_per_speaker=4)
        paths = write_corpus(spec, tmp_path / "c")
        with pytest.raises(CorpusExistsError):
            write_corpus(spec, tmp_path / "c")
        write_corpus(spec, tmp_path / "c", force=True)
        utts = read_manifest(paths["manifest"])
        assert len(utts) == 8 and {u.gender for u in utts} == {0, 1}
        assert np.allclose(read_tstf(resolve(paths["manifest"], utts[0])), generate(spec)[0].features, atol=1e-5)


class TestFormats:
    def test_tstf_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(7, 5)).astype(np.float32).astype(np.float64)
        write_tstf(tmp_path / "x.tstf", x)
        raw = (tmp_path / "x.tstf").read_bytes()
        assert raw[:4] == b"TSTF" and struct.unpack_from("<IIQQ", raw, 4) == (1, 2, 7, 5)
        assert len(raw) == 4 + 8 + 16 + 4 * 35
        y = read_tstf(tmp_path / "x.tstf")
        assert y.dtype == np.float64 and np.array_equal(x, y)

    def test_tstf_rejects_bad_files(self, tmp_path):
        (tmp_path / "a").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            read_tstf(tmp_path / "a")
        write_tstf(tmp_path / "b", np.zeros((2, 3)))
        (tmp_path / "b").write_bytes((tmp_path / "b").read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_tstf(tmp_path / "b")

    def test_manifest_round_trip(self, tmp_path):
        utts = [Utterance("u1", "feats/u1.tstf", (1, 2, 3), 0, 0), Utterance("u2", "/abs/u2.tstf", (), 3, 1)]
        write_manifest(tmp_path / "m.tsv", utts)
        assert (tmp_path / "m.tsv").read_bytes().count(b"\r") == 0
        assert read_manifest(tmp_path / "m.tsv") == utts
        assert resolve(tmp_path / "m.tsv", utts[0]) == tmp_path / "feats/u1.tstf"

    def test_manifest_rejects_duplicates_and_bad_rows(self, tmp_path):
        (tmp_path / "d.tsv").write_text("a\tp\t1\t0\t0\na\tq\t2\t0\t0\n")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "d.tsv")
        (tmp_path / "e.tsv").write_text("a\tp\t1 x\t0\t0\n")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "e.tsv")

    def test_checkpoint_bytes_stable(self, tmp_path, micro_cfg):
        model = build_model(micro_cfg)
        opt = Adam(dict(model.named_parameters()))
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        opt.step(1e-3)
        save_checkpoint(tmp_path / "a.ckpt", make_checkpoint(model, opt, micro_cfg, {"epoch": 1}))
        again = load_checkpoint(tmp_path / "a.ckpt")
        assert checkpoint_bytes(again) == (tmp_path / "a.ckpt").read_bytes()
        restored, cfg, _ = restore(tmp_path / "a.ckpt")
        assert cfg == micro_cfg
        assert all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), restored.parameters()))

    def test_checkpoint_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"JUNK" + bytes(16))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x")

    def test_empty_checkpoint(self):
        ck = Checkpoint({}, {}, 0, "")
        assert checkpoint_bytes(ck)[:4] == b"TSCK"


class TestConfig:
    def test_round_trip(self, micro_cfg):
        assert parse_config(config_to_text(micro_cfg)) == micro_cfg
        assert parse_config(config_to_text(tiny_config())) == tiny_config()

    def test_comments_and_partial_files(self):
        cfg = parse_config("# tuned\nmodel.d_m = 128  # wider\n\ntrain.deterministic = true\n")
        assert cfg.model.d_m == 128 and cfg.train.deterministic and cfg.model.n_heads == Config().model.n_heads

    @pytest.mark.parametrize(
        "text",
        ["model.nope = 1", "oops = 1", "model.d_m = wide", "model.ctc_weight = 1.5", "model.fusion = mix", "no equals sign"],
    )
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_override(self):
        cfg = override(Config(), **{"model.fusion": "add", "train.seed": 3})
        assert cfg.model.fusion == "add" and cfg.train.seed == 3


class TestOptimisation:
    def test_noam_peak_and_decay(self):
        peak = noam_rate(1000, 256, 1000, 5.0)
        assert peak == pytest.approx(5.0 / 16 / math.sqrt(1000))
        assert noam_rate(500, 256, 1000, 5.0) == pytest.approx(peak / 2)
        assert noam_rate(4000, 256, 1000, 5.0) == pytest.approx(peak / 2)

    def test_adam_first_step(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -4.0, 0.0])
        Adam({"p": p}).step(0.1)
        # bias correction makes the first update lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], atol=1e-9)

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_gradients([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


class TestTraining:
    def test_initial_loss_near_uniform(self):
        cfg = tiny_config()
        model = build_model(cfg)
        data = examples_of(cfg.synth)["train"][:8]
        batch = make_batch([e.features for e in data], cfg.model.resolution_ratio)
        _, br = model.losses(batch, [e.transcript for e in data])
        lengths = model.grid_lengths(batch.high_lengths)
        ctc = np.mean([uniform_ctc_nll(int(t), e.transcript, model.vocab.ctc_size) for t, e in zip(lengths, data)])
        expected = cfg.model.ctc_weight * ctc + (1 - cfg.model.ctc_weight) * math.log(model.vocab.decoder_size)
        assert abs(br.joint - expected) <= 0.2 * expected

    def test_uniform_ctc_oracle_matches_enumeration(self):
        # T=3, target [1], 3 classes: alignments 1--, -1-, --1, 11-, -11, 111 → 6
        assert uniform_ctc_nll(3, [1], 3) == pytest.approx(3 * math.log(3) - math.log(6))

    def test_metrics_file(self, tmp_path, micro_cfg):
        data = examples_of(micro_cfg.synth)
        summary = train(micro_cfg, tmp_path, data["train"], data["dev"])
        lines = (tmp_path / "metrics.csv").read_bytes().decode("ascii").split("\n")
        assert lines[-1] == "" and lines[0] == METRICS_HEADER
        rows = lines[1:-1]
        assert len(rows) == micro_cfg.train.epochs
        for i, row in enumerate(rows, 1):
            epoch, step, *values = row.split(",")
            assert int(epoch) == i and int(step) > 0
            assert all(FIELD.match(v) for v in values)
        assert summary["best"].exists() and summary["last"].exists()

    @pytest.mark.parametrize("threads", [1, 2])
    def test_rerun_identical(self, tmp_path, micro_cfg, threads):
        cfg = override(micro_cfg, **{"train.threads": threads})
        data = examples_of(cfg.synth)
        train(cfg, tmp_path / "a", data["train"], data["dev"])
        train(cfg, tmp_path / "b", data["train"], data["dev"])
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_features_raise(self, tmp_path, micro_cfg):
        data = examples_of(micro_cfg.synth)["train"]
        data[1].features[3, 2] = np.nan
        with pytest.raises(NumericError):
            train(micro_cfg, tmp_path, data[:4])

    def test_incompatible_features(self, tmp_path, micro_cfg):
        data = examples_of(override(micro_cfg, **{"synth.n_mels": 10}).synth)["train"]
        with pytest.raises(ConfigError):
            train(micro_cfg, tmp_path, data)


class TestProbe:
    def test_one_hot_is_perfect(self):
        speakers = np.repeat(np.arange(5), 6)
        assert speaker_probe(np.eye(5)[speakers], speakers) == 1.0

    def test_noise_is_chance(self):
        speakers = np.repeat(np.arange(8), 40)
        accs = [speaker_probe(np.random.default_rng(s).normal(size=(320, 16)), speakers, seed=s) for s in range(5)]
        assert abs(np.mean(accs) - 1 / 8) <= 0.1

    @pytest.mark.parametrize("speakers", [[0, 0, 0, 0, 0], [0, 0, 0, 0, 1, 1, 1]])
    def test_degenerate_counts(self, speakers):
        with pytest.raises(ProbeInputError):
            speaker_probe(np.zeros((len(speakers), 3)), np.array(speakers))

    def test_embeddings_round_trip(self, tmp_path, micro_cfg):
        model = build_model(micro_cfg)
        model.eval()
        data = examples_of(micro_cfg.synth)["train"]
        table = utterance_embeddings(model, data, "deep")
        assert table.vectors.shape == (len(data), 32)
        assert utterance_embeddings(model, data, "shallow").vectors.shape == (len(data), 32)
        write_embeddings(tmp_path / "e.csv", table)
        back = read_embeddings(tmp_path / "e.csv")
        assert back.ids == table.ids and np.array_equal(back.speakers, table.speakers)
        np.testing.assert_allclose(back.vectors, table.vectors, rtol=1e-15)

    def test_embedding_is_padding_invariant(self, micro_cfg):
        model = build_model(micro_cfg)
        model.eval()
        data = examples_of(micro_cfg.synth)["train"][:3]
        together = utterance_embeddings(model, data, "deep").vectors
        alone = np.concatenate([utterance_embeddings(model, [e], "deep").vectors for e in data])
        np.testing.assert_allclose(together, alone, atol=1e-12)


class TestAblation:
    def test_streams(self, tmp_path, micro_cfg):
        cfg = override(micro_cfg, **{"train.epochs": 1})
        data = examples_of(cfg.synth)
        rows = run_ablation("streams", cfg, tmp_path, data["train"], data["dev"])
        assert [r.variant for r in rows] == ["shallow", "deep", "both"]
        assert read_rows(tmp_path / "streams.csv") == [type(r)(r.variant, float(f"{r.dev_cer:.6f}"), r.n_params) for r in rows]
        params = {r.variant: r.n_params for r in rows}
        assert params["shallow"] < params["both"] and params["deep"] < params["both"]

    @pytest.mark.parametrize("kind", ["fusion", "blocks"])
    def test_three_rows(self, tmp_path, micro_cfg, kind):
        cfg = override(micro_cfg, **{"train.epochs": 1})
        data = examples_of(cfg.synth)
        run_ablation(kind, cfg, tmp_path, data["train"], data["dev"])
        assert len(read_rows(tmp_path / f"{kind}.csv")) == 3

    def test_unknown_kind(self, micro_cfg):
        with pytest.raises(ValueError):
            run_ablation("heads", micro_cfg, "/nonexistent")


class TestCLI:
    @pytest.fixture
    def corpus(self, tmp_path, micro_cfg):
        conf = tmp_path / "micro.conf"
        conf.write_text(config_to_text(micro_cfg))
        assert main(["synth-data", "--config", str(conf), "--out", str(tmp_path / "data")]) == 0
        return conf, tmp_path / "data"

    def test_full_workflow(self, tmp_path, corpus, capsys):
        conf, data = corpus
        run = tmp_path / "run"
        args = ["train", "--config", str(conf), "--out", str(run), "--deterministic"]
        args += ["--train-manifest", str(data / "train.tsv"), "--dev-manifest", str(data / "dev.tsv")]
        assert main(args) == 0
        assert main(args) == 2  # existing run without --force
        assert main(args + ["--force"]) == 0
        ckpt = str(run / "best.ckpt")
        assert main(["evaluate", "--checkpoint", ckpt, "--manifest", str(data / "test.tsv"), "--out", str(tmp_path / "r.csv")]) == 0
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "utt_id,reference,hypothesis,substitutions,insertions,deletions,ref_len"
        for beam in ("1", "3"):
            out = tmp_path / f"hyp{beam}.txt"
            assert main(["decode", "--checkpoint", ckpt, "--manifest", str(data / "test.tsv"), "--beam", beam, "--out", str(out)]) == 0
            lines = out.read_text().splitlines()
            assert len(lines) == len(read_manifest(data / "test.tsv"))
            assert all(len(line.split("\t")) == 3 for line in lines)
        emb = tmp_path / "emb.csv"
        assert main(["dump-embeddings", "--checkpoint", ckpt, "--manifest", str(data / "manifest.tsv"), "--out", str(emb)]) == 0
        capsys.readouterr()
        assert main(["probe", str(emb)]) == 0
        assert 0.0 <= float(capsys.readouterr().out) <= 1.0

    def test_synth_refuses_overwrite(self, corpus):
        conf, data = corpus
        assert main(["synth-data", "--config", str(conf), "--out", str(data)]) == 2
        assert main(["synth-data", "--config", str(conf), "--out", str(data), "--force"]) == 0

    def test_usage_errors(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["probe", "x.csv", "--seed", "-1"])
        assert exc.value.code == 1
        (tmp_path / "bad.conf").write_text("model.d_m = wide\n")
        assert main(["synth-data", "--config", str(tmp_path / "bad.conf"), "--out", str(tmp_path / "o")]) == 1
        assert main(["train", "--out", str(tmp_path / "o")]) == 1  # no manifest configured

    def test_data_errors(self, tmp_path):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.ckpt"), "--manifest", "x.tsv"]) == 2
        (tmp_path / "e.csv").write_text("utt_id,speaker_id,v1\na,0,1.0\n")
        assert main(["probe", str(tmp_path / "e.csv")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path, corpus):
        conf, data = corpus
        utts = read_manifest(data / "train.tsv")
        x = read_tstf(resolve(data / "train.tsv", utts[0]))
        x[0, 0] = np.inf
        write_tstf(resolve(data / "train.tsv", utts[0]), x)
        args = ["train", "--config", str(conf), "--out", str(tmp_path / "run"), "--train-manifest", str(data / "train.tsv")]
        assert main(args) == 3

    def test_grad_check(self, capsys):
        assert main(["grad-check"]) == 0
        assert "fcf" in capsys.readouterr().out

    def test_featurize(self, tmp_path):
        import wave

        sr = 16000
        t = np.arange(sr // 4) / sr
        pcm = (np.sin(2 * np.pi * 440 * t) * 8000).astype("<i2")
        with wave.open(str(tmp_path / "tone.wav"), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(sr)
            w.writeframes(pcm.tobytes())
        assert main(["featurize", str(tmp_path / "tone.wav"), "--out", str(tmp_path / "f")]) == 0
        feats = read_tstf(tmp_path / "f/tone.tstf")
        assert feats.ndim == 2 and feats.shape[1] == 129
        (tmp_path / "junk.wav").write_bytes(b"not a wav")
        assert main(["featurize", str(tmp_path / "junk.wav"), "--out", str(tmp_path / "g")]) == 2
