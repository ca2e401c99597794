"""Structured ablations: stream variants, fusion methods, deep-stream depth."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import Config, override
from .train import train

ABLATIONS = {
    "streams": [("shallow", {"model.streams": "shallow"}), ("deep", {"model.streams": "deep"}), ("both", {"model.streams": "both"})],
    "fusion": [("concat", {"model.fusion": "concat"}), ("add", {"model.fusion": "add"}), ("fcf", {"model.fusion": "fcf"})],
    "blocks": [(f"groups{n}", {"model.n_deep_groups": n}) for n in (4, 5, 6)],
}

CSV_HEADER = "variant,dev_cer,n_params"


@dataclass(frozen=True)
class AblationRow:
    variant: str
    dev_cer: float
    n_params: int


def variant_configs(kind: str, cfg: Config) -> list[tuple[str, Config]]:
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; expected one of {sorted(ABLATIONS)}")
    base = override(cfg, **{"model.streams": "both"}) if kind != "streams" else cfg
    return [(name, override(base, **changes)) for name, changes in ABLATIONS[kind]]


def run_ablation(kind: str, cfg: Config, out_dir: str | Path, train_examples=None, dev_examples=None, log=None) -> list[AblationRow]:
    """Train every variant with the same seed and data; writes ``<kind>.csv`` in ``out_dir``.

    The reported dev CER is the best epoch's, i.e. that of the retained checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, vcfg in variant_configs(kind, cfg):
        summary = train(vcfg, out / f"{kind}_{name}", train_examples, dev_examples, log)
        rows.append(AblationRow(name, float(summary["best_dev_cer"]), summary["model"].num_parameters()))
        if log is not None:
            log(f"{kind}/{name}: dev_cer {rows[-1].dev_cer:.4f}")
    write_rows(out / f"{kind}.csv", rows)
    return rows


def write_rows(path: str | Path, rows: list[AblationRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.variant},{r.dev_cer:.6f},{r.n_params}\n")


def read_rows(path: str | Path) -> list[AblationRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing header {CSV_HEADER!r}")
    rows = []
    for line in lines[1:]:
        name, cer, n = line.split(",")
        rows.append(AblationRow(name, float(cer), int(n)))
    return rows
