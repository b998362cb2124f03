"""On-disk formats: FTR1 arrays, CKP1 checkpoints, WAV, manifests, alignments."""
from __future__ import annotations

import io
import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, InvalidCheckpoint, InvalidInput

FTR_MAGIC = b"FTR1"
FTR_VERSION = 1
CKP_MAGIC = b"CKP1"
CKP_VERSION = 1

# 0 is the only code feature files use; the others exist so checkpoints can
# carry double-precision weights and opaque byte blobs (model config JSON).
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


# ---------------------------------------------------------------------------
# FTR1


def encode_ftr(array, dtype_code: int = 0) -> bytes:
    arr = np.asarray(array)
    if dtype_code not in DTYPE_CODES:
        raise FormatError(f"unknown FTR1 dtype code {dtype_code}")
    if arr.ndim > 255:
        raise FormatError("rank too large for FTR1")
    out = io.BytesIO()
    out.write(FTR_MAGIC)
    out.write(struct.pack("<BB", FTR_VERSION, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(struct.pack("<B", dtype_code))
    out.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[dtype_code]).tobytes())
    return out.getvalue()


def decode_ftr(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one FTR1 blob at ``offset``; returns (array, offset past the blob)."""
    if buf[offset:offset + 4] != FTR_MAGIC:
        raise FormatError("bad FTR1 magic")
    pos = offset + 4
    if len(buf) < pos + 2:
        raise FormatError("truncated FTR1 header")
    version, rank = struct.unpack_from("<BB", buf, pos)
    pos += 2
    if version != FTR_VERSION:
        raise FormatError(f"unsupported FTR1 version {version}")
    if len(buf) < pos + 4 * rank + 1:
        raise FormatError("truncated FTR1 header")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown FTR1 dtype code {code}")
    dt = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated FTR1 payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
    return arr.reshape(shape).copy(), pos + nbytes


def save_ftr(path, array, dtype_code: int = 0) -> None:
    Path(path).write_bytes(encode_ftr(array, dtype_code))


def load_ftr(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_ftr(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after FTR1 payload")
    return arr


# ---------------------------------------------------------------------------
# CKP1


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CKP_MAGIC)
    out.write(struct.pack("<BI", CKP_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        arr = np.asarray(arr)
        out.write(encode_ftr(arr, _CODE_OF.get(arr.dtype, 0)))
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKP_MAGIC:
        raise InvalidCheckpoint("bad CKP1 magic")
    try:
        version, count = struct.unpack_from("<BI", buf, 4)
    except struct.error as exc:
        raise InvalidCheckpoint("truncated CKP1 header") from exc
    if version != CKP_VERSION:
        raise InvalidCheckpoint(f"unsupported CKP1 version {version}")
    pos = 9
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            arr, pos = decode_ftr(buf, pos)
        except (struct.error, FormatError, UnicodeDecodeError) as exc:
            raise InvalidCheckpoint(f"corrupt CKP1 entry: {exc}") from exc
        if name in entries:
            raise InvalidCheckpoint(f"duplicate entry {name!r}")
        entries[name] = arr
    if pos != len(buf):
        raise InvalidCheckpoint("trailing bytes after CKP1 entries")
    return entries


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise InvalidCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)


def bytes_entry(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# WAV (RIFF PCM16 mono)


def read_wav(path):
    from .dsp import Waveform

    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise InvalidInput(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise InvalidInput(f"{path}: expected 16-bit PCM")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InvalidInput(f"{path}: not a PCM WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wav) -> None:
    pcm = np.clip(np.round(np.asarray(wav.samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(wav.sample_rate))
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    utt_id: str
    wav_path: str
    speaker_id: str
    phonemes: list[int] = field(default_factory=list)
    sex: str | None = None


def read_manifest(path) -> list[ManifestRecord]:
    base = Path(path).parent
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (4, 5):
            raise FormatError(f"{path}:{lineno}: expected 4 or 5 tab-separated columns")
        try:
            phonemes = [int(p) for p in cols[3].split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad phoneme ids") from exc
        wav_path = cols[1]
        if not os.path.isabs(wav_path):
            wav_path = str(base / wav_path)
        records.append(ManifestRecord(cols[0], wav_path, cols[2], phonemes,
                                      cols[4] if len(cols) == 5 else None))
    return records


def write_manifest(path, records: Iterable[ManifestRecord], relative_to=None) -> None:
    lines = []
    for r in records:
        wav_path = r.wav_path
        if relative_to is not None:
            wav_path = os.path.relpath(wav_path, relative_to)
        cols = [r.utt_id, wav_path, r.speaker_id, " ".join(str(p) for p in r.phonemes)]
        if r.sex is not None:
            cols.append(r.sex)
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# alignments


def write_alignment_csv(path_or_file, alpha) -> None:
    alpha = np.asarray(alpha)
    text = "\n".join(",".join(f"{v:.6g}" for v in row) for row in alpha) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text)


def read_alignment_csv(path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from exc
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(f"{path}:{lineno}: ragged row ({len(row)} values, expected {width})")
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: empty alignment")
    return np.array(rows)


def alignment_to_pgm(alpha) -> bytes:
    """8-bit binary PGM, one image row per decoder step, scaled to row max."""
    alpha = np.asarray(alpha, dtype=np.float64)
    peak = alpha.max(axis=1, keepdims=True)
    scaled = np.divide(alpha, peak, out=np.zeros_like(alpha), where=peak > 0)
    pixels = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)
