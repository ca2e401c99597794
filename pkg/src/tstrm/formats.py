"""On-disk formats: TSTF feature files, TSV manifests, binary checkpoints.

TSTF: ``b"TSTF"``, u32 version (=1), u32 ndim, ndim x u64 extents, then the
payload as little-endian float32, row-major. Loaded arrays are float64.

Manifest: UTF-8, LF line endings, one utterance per line with five TAB
separated fields ``id path transcript speaker gender``; the transcript is
space-separated token ids and ``path`` is relative to the manifest's
directory unless absolute.

Checkpoint: ``b"TSCK"``, u32 version (=1), u64 header length, a UTF-8 JSON
header (sorted keys, no whitespace), then float64 little-endian payloads in
header order. The header lists every array with its shape and byte offset,
plus the step counter, optimiser scalars and the config text.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

TSTF_MAGIC = b"TSTF"
TSTF_VERSION = 1
CKPT_MAGIC = b"TSCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def write_tstf(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    header = TSTF_MAGIC + struct.pack("<II", TSTF_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tstf(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TSTF_MAGIC:
        raise FormatError(f"{path}: not a TSTF file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != TSTF_VERSION:
        raise FormatError(f"{path}: unsupported TSTF version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    offset = 12 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) != offset + 4 * count:
        raise FormatError(f"{path}: payload holds {len(raw) - offset} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=offset, count=count).astype(np.float64).reshape(shape)


@dataclass(frozen=True)
class Utterance:
    id: str
    path: str
    transcript: tuple[int, ...]
    speaker_id: int
    gender: int


def write_manifest(path: str | Path, utts: Iterable[Utterance]) -> None:
    lines = []
    seen = set()
    for u in utts:
        if u.id in seen:
            raise FormatError(f"duplicate utterance id {u.id!r}")
        seen.add(u.id)
        lines.append("\t".join([u.id, u.path, " ".join(str(t) for t in u.transcript), str(u.speaker_id), str(u.gender)]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_manifest(path: str | Path) -> list[Utterance]:
    utts, seen = [], set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            uid, p, text, spk, gender = parts
            if uid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
            seen.add(uid)
            try:
                tokens = tuple(int(t) for t in text.split())
                utts.append(Utterance(uid, p, tokens, int(spk), int(gender)))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return utts


def resolve(manifest_path: str | Path, utt: Utterance) -> Path:
    p = Path(utt.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# -- checkpoints --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    config_text: str
    extra: dict | None = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for group, arrays in (("params", ckpt.params), ("optimizer", ckpt.optimizer)):
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(data.shape), "offset": offset})
            blobs.append(data.tobytes())
            offset += data.nbytes
    header = {
        "arrays": entries,
        "config": ckpt.config_text,
        "extra": ckpt.extra or {},
        "step": int(ckpt.step),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hdr)) + hdr + b"".join(blobs)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 16
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    base = start + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "optimizer": {}}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=base + e["offset"]).astype(np.float64)
        groups[e["group"]][e["name"]] = arr.reshape(e["shape"])
    return Checkpoint(groups["params"], groups["optimizer"], header["step"], header["config"], header["extra"])
