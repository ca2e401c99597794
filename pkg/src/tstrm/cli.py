"""Command line entry point: ``tstrm <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablation import ABLATIONS, run_ablation
from .checks import standard_checks
from .config import Config, ConfigError, config_to_text, load_config, override, tiny_config
from .embeddings import ProbeInputError, read_embeddings, speaker_probe, utterance_embeddings, write_embeddings
from .evaluate import decode_lines, evaluate
from .formats import FormatError, write_tstf
from .frontend import FrontendConfig, FrontendError, read_wav, stft_logmel
from .synth import CorpusExistsError, write_corpus
from .train import DataError, NumericError, check_compatible, load_examples, restore, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _load(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else tiny_config()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["train.seed"] = args.seed
        changes["synth.seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["train.threads"] = args.threads
    if getattr(args, "deterministic", False):
        changes["train.deterministic"] = True
    for key in ("train_manifest", "dev_manifest"):
        if getattr(args, key, None):
            changes[f"train.{key}"] = args.__dict__[key]
    return override(cfg, **changes) if changes else cfg


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def cmd_synth_data(args) -> int:
    cfg = _load(args)
    paths = write_corpus(cfg.synth, _out(args), force=args.force)
    (_out(args) / "synth.conf").write_text(config_to_text(Config(synth=cfg.synth)), encoding="utf-8")
    print(f"wrote {paths['manifest']}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = FrontendConfig()
    for wav in args.inputs:
        spec = stft_logmel(read_wav(wav), fcfg)
        target = out / (Path(wav).stem + ".tstf")
        if target.exists() and not args.force:
            raise CorpusExistsError(f"{target} exists; pass --force to overwrite")
        write_tstf(target, spec.frames)
        print(f"{target}\t{spec.frames.shape[0]}x{spec.frames.shape[1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out(args)
    if (out / "metrics.csv").exists() and not args.force:
        raise CorpusExistsError(f"{out} already holds a training run; pass --force to overwrite")
    summary = train(cfg, out, log=print)
    print(f"best dev CER {summary['best_dev_cer']:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = evaluate(args.checkpoint, args.manifest, args.out)
    print(f"CER {report.rate:.6f} (S={report.substitutions} I={report.insertions} D={report.deletions} N={report.reference_length})")
    return EXIT_OK


def cmd_decode(args) -> int:
    lines = decode_lines(args.checkpoint, args.manifest, args.beam)
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    rows = run_ablation(args.kind, cfg, _out(args), log=print)
    for r in rows:
        print(f"{r.variant},{r.dev_cer:.6f},{r.n_params}")
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    model, cfg, _ = restore(args.checkpoint)
    examples = load_examples(args.manifest)
    check_compatible(examples, cfg)
    write_embeddings(_out(args), utterance_embeddings(model, examples, args.stream))
    return EXIT_OK


def cmd_probe(args) -> int:
    table = read_embeddings(args.embeddings)
    acc = speaker_probe(table.vectors, table.speakers, seed=args.seed or 0)
    print(f"{acc:.6f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    reports = standard_checks(seed=args.seed or 0)
    for r in reports:
        print(r)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tstrm", description="Two-stream two-resolution speech recognition toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text, config=False, out=False, seed=False, force=False):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", help="key = value config file (default: tiny preset)")
        if out:
            sp.add_argument("--out", help="output path")
        if seed:
            sp.add_argument("--seed", type=_u64, help="unsigned 64-bit seed")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite existing output")
        sp.set_defaults(func=fn)
        return sp

    add("synth-data", cmd_synth_data, "generate the synthetic corpus", config=True, out=True, seed=True, force=True)
    sp = add("featurize", cmd_featurize, "WAV files to log-mel+delta TSTF features", out=True, force=True)
    sp.add_argument("inputs", nargs="+", help="mono 16-bit WAV files")
    sp = add("train", cmd_train, "train a model", config=True, out=True, seed=True, force=True)
    sp.add_argument("--deterministic", action="store_true", help="disable dropout")
    sp.add_argument("--threads", type=int, help="data-parallel shards per batch")
    sp.add_argument("--train-manifest", dest="train_manifest")
    sp.add_argument("--dev-manifest", dest="dev_manifest")
    sp = add("evaluate", cmd_evaluate, "greedy-decode a manifest and report CER", out=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp = add("decode", cmd_decode, "write utt_id, score and token ids per utterance", out=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--beam", type=int, default=1)
    sp = add("ablate", cmd_ablate, "train the three variants of one ablation", config=True, out=True, seed=True)
    sp.add_argument("--kind", choices=sorted(ABLATIONS), required=True)
    sp.add_argument("--deterministic", action="store_true")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--train-manifest", dest="train_manifest")
    sp.add_argument("--dev-manifest", dest="dev_manifest")
    sp = add("dump-embeddings", cmd_dump_embeddings, "mean-pooled stream embeddings as CSV", out=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--stream", choices=("shallow", "deep"), default="deep")
    sp = add("probe", cmd_probe, "speaker probe accuracy on an embeddings CSV", seed=True)
    sp.add_argument("embeddings")
    add("grad-check", cmd_grad_check, "finite-difference checks of all layers", seed=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FrontendError, ProbeInputError, CorpusExistsError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
