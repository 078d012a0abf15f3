"""File contracts: tensor containers, clip manifests, checkpoints, WAV audio.

All formats are little-endian and platform independent. The tensor container
layout is::

    magic "FTFD" | version u8=1 | dtype u8 (0=f32, 1=f64) | rank u8
    | dims rank*u32 | payload row-major

Checkpoints are STORED zip archives with fixed timestamps so that
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import wave
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FTFD"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerError(ValueError):
    """Malformed tensor container."""


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODE_FOR:
        raise ContainerError(f"unsupported dtype {arr.dtype}; only float32/float64")
    Path(path).write_bytes(tensor_to_bytes(arr))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    code = _CODE_FOR[arr.dtype]
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    return head + dims + payload


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), name=str(path))


def tensor_from_bytes(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 7:
        raise ContainerError(f"{name}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise ContainerError(f"{name}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise ContainerError(f"{name}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise ContainerError(f"{name}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    offset = 7 + 4 * rank
    if len(raw) < offset:
        raise ContainerError(f"{name}: truncated dims (rank {rank})")
    dims = struct.unpack(f"<{rank}I", raw[7:offset]) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ContainerError(
            f"{name}: payload length {len(raw) - offset} != expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(raw[offset:], dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frames_path: Path
    audio_path: Path
    label: int            # 0 = real, 1 = fake
    split: str            # train | val | test


class ManifestError(ValueError):
    pass


_SPLITS = ("train", "val", "test")


def load_manifest(path, check_files: bool = True) -> dict[str, list[ClipRecord]]:
    """Parse a TAB-separated clip manifest into records grouped by split."""
    path = Path(path)
    base = path.parent
    by_split: dict[str, list[ClipRecord]] = {s: [] for s in _SPLITS}
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        clip_id, frames_rel, audio_rel, label_s, split = parts
        if label_s not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label_s!r}")
        if split not in _SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if clip_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        rec = ClipRecord(clip_id, base / frames_rel, base / audio_rel, int(label_s), split)
        if check_files:
            if not rec.frames_path.exists():
                raise ManifestError(f"{path}:{lineno}: missing frames path {rec.frames_path}")
            if not rec.audio_path.exists():
                raise ManifestError(f"{path}:{lineno}: missing audio file {rec.audio_path}")
        by_split[split].append(rec)
    return by_split


def write_manifest(path, records) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for rec in records:
        lines.append("\t".join([
            rec.clip_id,
            str(Path(rec.frames_path).relative_to(base)),
            str(Path(rec.audio_path).relative_to(base)),
            str(rec.label),
            rec.split,
        ]))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------
# clip frame directories
# ---------------------------------------------------------------------

def write_clip_frames(dirpath, frames: np.ndarray) -> None:
    """Store a (T, C, H, W) float32 frame stack as one container per frame."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_tensor(d / f"frame_{i:04d}.ftfd", frame.astype(np.float32))


def read_clip_frames(dirpath) -> np.ndarray:
    d = Path(dirpath)
    files = sorted(d.glob("frame_*.ftfd"))
    if not files:
        raise ContainerError(f"{d}: no frame containers found")
    return np.stack([read_tensor(f) for f in files])


# ---------------------------------------------------------------------
# WAV audio (16-bit mono PCM)
# ---------------------------------------------------------------------

def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return samples, rate


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def config_digest(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def save_checkpoint(path, weights: dict[str, np.ndarray], digest: str, step: int) -> None:
    """Write named weight tensors plus metadata as a deterministic archive."""
    names = sorted(weights)
    meta = {"format": "ftfd-checkpoint", "version": 1,
            "config_digest": digest, "step": int(step), "names": names}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, separators=(",", ":")))
        for name in names:
            info = zipfile.ZipInfo(f"weights/{name}", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, tensor_to_bytes(np.asarray(weights[name])))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect_digest: str | None = None):
    """Return (weights dict, step, digest); digest mismatch is an error."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            weights = {
                name: tensor_from_bytes(zf.read(f"weights/{name}"), name=name)
                for name in meta["names"]
            }
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from exc
    digest = meta.get("config_digest", "")
    if expect_digest is not None and digest != expect_digest:
        raise CheckpointError(
            f"{path}: config digest mismatch (checkpoint {digest[:12]}…, "
            f"current {expect_digest[:12]}…)"
        )
    return weights, int(meta.get("step", 0)), digest
