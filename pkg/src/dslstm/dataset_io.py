"""WAV files, CSV manifests, the DSL1 feature archive and DSLP checkpoints.

Binary layouts (all integers little-endian):

* tensor record: ``rank u32, dims u32 × rank, data f32 × prod(dims)``
* string: ``length u32, utf-8 bytes``
* feature archive: ``b"DSL1", version u32, count u32``, then per record
  ``id string, label u8, mfcc tensor, s1 tensor, s2 tensor``
* checkpoint: ``b"DSLP", version u32, config string (JSON), count u32``, then
  per entry ``name string, tensor record``
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy.io import wavfile

from .audio import AudioClip

log = logging.getLogger(__name__)

LABELS = ("happy", "neutral", "angry", "sad")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

ARCHIVE_MAGIC = b"DSL1"
CHECKPOINT_MAGIC = b"DSLP"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- WAV


def read_wav(path: str | Path) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported WAV sample type {data.dtype} (need PCM16 or float32)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(sr))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    wav_path: str
    label: str
    group: str | None = None

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


def load_manifest(path: str | Path, check_files: bool = True) -> list[ManifestEntry]:
    """Parse ``id,path,label,group`` CSV; relative paths resolve against the manifest's folder."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        log.warning("manifest %s is empty", path)
        return []
    reader = csv.DictReader(io.StringIO(text))
    missing = {"id", "path", "label"} - set(reader.fieldnames or ())
    if missing:
        raise ManifestError(f"{path}: header lacks column(s) {sorted(missing)}")
    entries, seen = [], set()
    for row_no, row in enumerate(reader, start=2):
        uid, label = row["id"].strip(), row["label"].strip().lower()
        if label not in LABEL_INDEX:
            raise ManifestError(f"{path} row {row_no}: unknown label {row['label']!r} (expected one of {', '.join(LABELS)})")
        if uid in seen:
            raise ManifestError(f"{path} row {row_no}: duplicate utterance id {uid!r}")
        seen.add(uid)
        wav = Path(row["path"].strip())
        if not wav.is_absolute():
            wav = path.parent / wav
        if check_files and not wav.is_file():
            raise ManifestError(f"{path} row {row_no}: WAV file {wav} not found")
        group = (row.get("group") or "").strip() or None
        entries.append(ManifestEntry(uid, str(wav), label, group))
    if not entries:
        log.warning("manifest %s has no rows", path)
    return entries


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "path", "label", "group"])
        for e in entries:
            wav = Path(e.wav_path)
            try:
                wav = wav.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([e.utterance_id, wav.as_posix(), e.label, e.group or ""])


# ---------------------------------------------------------------- binary records


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def write_string(f: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def read_string(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4, "string length"))
    return _read_exact(f, n, "string").decode("utf-8")


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor dims"))
    n = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * n, "tensor data"), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def _read_header(f: BinaryIO, magic: bytes) -> None:
    got = f.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")


# ---------------------------------------------------------------- feature archive


@dataclass
class FeatureRecord:
    utterance_id: str
    label: int
    mfcc: np.ndarray  # T × 39
    s1: np.ndarray  # 64 × T1
    s2: np.ndarray  # 128 × T2

    def __eq__(self, other):
        return (
            isinstance(other, FeatureRecord)
            and self.utterance_id == other.utterance_id
            and self.label == other.label
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("mfcc", "s1", "s2"))
        )


def write_features(path: str | Path, records: list[FeatureRecord]) -> None:
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(records)))
    for r in records:
        write_string(buf, r.utterance_id)
        buf.write(struct.pack("<B", r.label))
        for arr in (r.mfcc, r.s1, r.s2):
            write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def read_features(path: str | Path) -> list[FeatureRecord]:
    # parse fully before returning so a corrupt file never yields a partial result
    with open(path, "rb") as f:
        _read_header(f, ARCHIVE_MAGIC)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        out = []
        for _ in range(count):
            uid = read_string(f)
            (label,) = struct.unpack("<B", _read_exact(f, 1, "label"))
            mfcc, s1, s2 = read_tensor(f), read_tensor(f), read_tensor(f)
            out.append(FeatureRecord(uid, label, mfcc, s1, s2))
        if f.read(1):
            raise FormatError("trailing bytes after the last record")
    return out


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    write_string(buf, json.dumps(config, sort_keys=True))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        write_string(buf, name)
        write_tensor(buf, tensors[name])
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        _read_header(f, CHECKPOINT_MAGIC)
        config = json.loads(read_string(f))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        tensors = {}
        for _ in range(count):
            name = read_string(f)
            tensors[name] = read_tensor(f)
    return config, tensors
