"""Run configuration and its line-oriented text form.

A config file holds one ``section.key = value`` assignment per line; ``#``
starts a comment. Sections are ``model``, ``train`` and ``synth``. Stream
layouts are written as comma-separated ``op:channels:repeats:stride`` rows,
for example ``model.shallow_rows = conv:128:1:2, conv:256:1:2, conv:256:1:1``.
Unlisted keys keep their defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import DEEP_ROWS, SHALLOW_ROWS, StreamConfig
from .fusion import FUSION_KINDS
from .transformer import TransformerConfig

STREAM_VARIANTS = ("both", "shallow", "deep")


class ConfigError(ValueError):
    pass


Rows = tuple[tuple[str, int, int, int], ...]


def format_rows(rows: Rows) -> str:
    return ", ".join(f"{op}:{ch}:{rep}:{stride}" for op, ch, rep, stride in rows)


def parse_rows(text: str) -> Rows:
    rows = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 4:
            raise ConfigError(f"stream row {item.strip()!r} is not op:channels:repeats:stride")
        try:
            rows.append((parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError:
            raise ConfigError(f"stream row {item.strip()!r} has a non-integer field") from None
    return tuple(rows)


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int = 16
    feature_dim: int = 129
    resolution_ratio: int = 4
    streams: str = "both"
    fusion: str = "fcf"
    deep_rows: Rows = DEEP_ROWS
    shallow_rows: Rows = SHALLOW_ROWS
    n_deep_groups: int = 6
    expansion: int = 6
    d_m: int = 256
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    d_ff: int = 1024
    dropout_rate: float = 0.1
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    head_init_scale: float = 0.01

    def __post_init__(self):
        if self.streams not in STREAM_VARIANTS:
            raise ConfigError(f"model.streams must be one of {STREAM_VARIANTS}, got {self.streams!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"model.fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"model.ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"model.label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        for name in ("n_tokens", "feature_dim", "resolution_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        try:
            self.stream_config()
            self.transformer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stream_config(self) -> StreamConfig:
        return StreamConfig(self.deep_rows, self.shallow_rows, self.n_deep_groups, self.expansion)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(self.n_enc_layers, self.n_dec_layers, self.n_heads, self.d_m, self.d_ff, self.dropout_rate)


@dataclass(frozen=True)
class TrainConfig:
    train_manifest: str = ""
    dev_manifest: str = ""
    epochs: int = 30
    batch_size: int = 16
    warmup_steps: int = 1000
    lr_factor: float = 5.0
    clip_norm: float = 5.0
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    max_decode_len: int = 32


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 8
    n_tokens: int = 16
    utterances_per_speaker: int = 40
    min_transcript_len: int = 3
    max_transcript_len: int = 6
    min_frames_per_token: int = 8
    max_frames_per_token: int = 12
    n_mels: int = 40
    bump_height: float = 3.0
    bump_width: float = 1.5
    speaker_tilt_scale: float = 0.5
    noise_sigma: float = 0.3
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 7

    def __post_init__(self):
        for name in (
            "n_speakers",
            "n_tokens",
            "utterances_per_speaker",
            "min_transcript_len",
            "max_transcript_len",
            "min_frames_per_token",
            "max_frames_per_token",
            "n_mels",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be positive")
        if self.min_transcript_len > self.max_transcript_len:
            raise ConfigError("synth.min_transcript_len exceeds synth.max_transcript_len")
        if self.min_frames_per_token > self.max_frames_per_token:
            raise ConfigError("synth.min_frames_per_token exceeds synth.max_frames_per_token")
        if self.speaker_tilt_scale < 0 or self.noise_sigma < 0:
            raise ConfigError("synth.speaker_tilt_scale and synth.noise_sigma must be nonnegative")
        if self.n_tokens < 2 and self.max_transcript_len > 1:
            raise ConfigError("synth.n_tokens must be at least 2 for transcripts without repeats")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("synth.seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)


SECTIONS = ("model", "train", "synth")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return format_rows(value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return parse_rows(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def config_to_text(cfg: Config) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: Config | None = None) -> Config:
    base = Config() if base is None else base
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sub = getattr(base, section)
        known = {f.name for f in fields(sub)}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _parse_value(raw, getattr(sub, name), key)
    try:
        return Config(*(replace(getattr(base, s), **updates[s]) for s in SECTIONS))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def override(cfg: Config, **changes) -> Config:
    """Replace dotted keys, e.g. ``override(cfg, **{"model.fusion": "add"})``."""
    per: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in changes.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown key {key!r}")
        per[section][name] = value
    return Config(*(replace(getattr(cfg, s), **per[s]) for s in SECTIONS))


# channel counts divided by eight, small transformer; trains in minutes on one core
TINY_DEEP_ROWS: Rows = (
    ("conv", 4, 1, 2),
    ("bottleneck", 4, 1, 1),
    ("bottleneck", 4, 1, 1),
    ("bottleneck", 6, 3, 2),
    ("bottleneck", 8, 3, 2),
    ("bottleneck", 16, 2, 1),
    ("bottleneck", 32, 2, 1),
)
TINY_SHALLOW_ROWS: Rows = (("conv", 16, 1, 2), ("conv", 32, 1, 2), ("conv", 32, 1, 1))


def tiny_config() -> Config:
    model = ModelConfig(
        n_tokens=16,
        feature_dim=40,
        deep_rows=TINY_DEEP_ROWS,
        shallow_rows=TINY_SHALLOW_ROWS,
        d_m=64,
        n_heads=4,
        n_enc_layers=2,
        n_dec_layers=1,
        d_ff=128,
        dropout_rate=0.1,
    )
    return Config(model=model, train=TrainConfig(batch_size=8, warmup_steps=100, lr_factor=0.15), synth=SynthSpec())
