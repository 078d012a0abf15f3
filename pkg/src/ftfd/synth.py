"""Deterministic real/fake talking-face surrogates.

A clip is a smoothly drifting procedural texture with a mouth-like opening
whose vertical aperture follows the loudness envelope of an amplitude
modulated tone. Fakes break exactly one (or both) of the paper-level cues:

* ``desync``  - the aperture follows an independent envelope, so only the
  audio-visual relation separates fake from real;
* ``jitter``  - the mouth is drawn at a discontinuous per-frame offset,
  disordering the optical flow in the lip region while audio stays synced;
* ``both``    - both manipulations at once.

Same spec and seed always produce byte-identical frames and audio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import data_io

FAKE_MODES = ("desync", "jitter", "both")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_frames: int = 30
    fps: float = 25.0
    image_size: int = 56
    channels: int = 1
    lip_rect: tuple | None = None       # (r0, r1, c0, c1); default sits low-center
    carrier_lo: float = 180.0
    carrier_hi: float = 700.0
    sample_rate: int = 16000
    fake_mode: str = "both"
    jitter_px: int = 3

    def __post_init__(self):
        if self.fake_mode not in FAKE_MODES:
            raise ValueError(f"fake_mode must be one of {FAKE_MODES}")
        r0, r1, c0, c1 = self.resolved_lip_rect()
        s = self.image_size
        if not (0 < r0 < r1 < s and 0 < c0 < c1 < s):
            raise ValueError(f"lip rect {(r0, r1, c0, c1)} not strictly inside {s}x{s} frame")

    def resolved_lip_rect(self) -> tuple[int, int, int, int]:
        if self.lip_rect is not None:
            return tuple(self.lip_rect)
        s = self.image_size
        return (int(0.58 * s), int(0.88 * s), int(0.28 * s), int(0.72 * s))


@dataclass
class ClipArtifacts:
    clip_id: str
    label: int
    frames: np.ndarray            # (n, C, H, W) float32 in 0..255
    audio: np.ndarray
    sample_rate: int
    aperture: np.ndarray          # per-frame lip opening fraction in [0, 1]
    envelope: np.ndarray          # per-frame audio loudness in [0, 1]
    lip_rect: tuple


def _smooth_envelope(rng: np.random.Generator, n: int, fps: float) -> np.ndarray:
    """Band-limited loudness curve stretched to exactly [0.05, 1]."""
    t = np.arange(n) / fps
    mix = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(0.8, 3.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        mix += rng.uniform(0.5, 1.0) * np.sin(2.0 * np.pi * freq * t + phase)
    lo, hi = mix.min(), mix.max()
    span = hi - lo if hi > lo else 1.0
    return 0.05 + 0.95 * (mix - lo) / span


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.5, mode="wrap")
    lo, hi = field_.min(), field_.max()
    return 55.0 + 150.0 * (field_ - lo) / (hi - lo)


def _sample_shifted(tex: np.ndarray, dy: float, dx: float, size: int,
                    margin: int) -> np.ndarray:
    """Bilinear crop of the oversized texture at a sub-pixel offset."""
    ys = np.arange(size) + margin + dy
    xs = np.arange(size) + margin + dx
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = tex[np.ix_(y0, x0)]
    b = tex[np.ix_(y0, x0 + 1)]
    c = tex[np.ix_(y0 + 1, x0)]
    d = tex[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def generate_clip(spec: SynthSpec, label: int, clip_id: str = "clip") -> ClipArtifacts:
    """Render one clip; ``label`` 0 is real, 1 applies the spec's fake mode."""
    if label not in (0, 1):
        raise ValueError("label must be 0 (real) or 1 (fake)")
    streams = np.random.SeedSequence(spec.seed).spawn(6)
    tex_rng, drift_rng, env_rng, desync_rng, jitter_rng, carrier_rng = (
        np.random.default_rng(s) for s in streams)

    n = spec.n_frames
    size = spec.image_size
    margin = 4 + spec.jitter_px
    tex = _texture(tex_rng, size + 2 * margin)

    t = np.arange(n) / spec.fps
    drift = []
    for _ in range(2):
        amp = drift_rng.uniform(0.8, 2.0)
        freq = drift_rng.uniform(0.3, 0.8)
        phase = drift_rng.uniform(0, 2 * np.pi)
        drift.append(amp * np.sin(2 * np.pi * freq * t + phase))
    dy, dx = drift

    envelope = _smooth_envelope(env_rng, n, spec.fps)
    aperture = envelope.copy()
    if label == 1 and spec.fake_mode in ("desync", "both"):
        aperture = _smooth_envelope(desync_rng, n, spec.fps)

    jitter = np.zeros((n, 2), dtype=int)
    if label == 1 and spec.fake_mode in ("jitter", "both"):
        jitter = jitter_rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=(n, 2))

    r0, r1, c0, c1 = spec.resolved_lip_rect()
    rc = (r0 + r1) / 2.0
    cc = (c0 + c1) / 2.0
    half_h = (r1 - r0) / 2.0
    half_w = 0.85 * (c1 - c0) / 2.0
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]

    frames = np.empty((n, spec.channels, size, size), dtype=np.float32)
    for i in range(n):
        img = _sample_shifted(tex, dy[i], dx[i], size, margin)
        a = max(aperture[i] * half_h, 0.35)
        jy, jx = jitter[i]
        # elliptical mouth opening, darkened against the face texture
        norm = (((rows - (rc + jy)) / a) ** 2 + ((cols - (cc + jx)) / half_w) ** 2)
        img[norm <= 1.0] *= 0.30
        frames[i] = np.clip(img, 0.0, 255.0).astype(np.float32)

    n_samples = int(round(n / spec.fps * spec.sample_rate))
    ts = np.arange(n_samples) / spec.sample_rate
    env_audio = np.interp(ts, t, envelope)
    f0 = carrier_rng.uniform(spec.carrier_lo, spec.carrier_hi)
    audio = 0.7 * env_audio * np.sin(2 * np.pi * f0 * ts)

    return ClipArtifacts(clip_id=clip_id, label=label, frames=frames, audio=audio,
                         sample_rate=spec.sample_rate, aperture=aperture,
                         envelope=envelope, lip_rect=(r0, r1, c0, c1))


def write_clip(clip: ClipArtifacts, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    frames_dir = out_dir / clip.clip_id
    audio_path = out_dir / f"{clip.clip_id}.wav"
    data_io.write_clip_frames(frames_dir, clip.frames)
    data_io.write_wav(audio_path, clip.audio, clip.sample_rate)
    return frames_dir, audio_path


def _split_of(index: int, count: int) -> str:
    n_train = int(round(0.6 * count))
    n_val = int(round(0.2 * count))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def clip_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=base_seed,
                                      spawn_key=(index,)).generate_state(1)[0])


def generate_dataset(n_real: int, n_fake: int, seed: int, out_dir,
                     spec: SynthSpec | None = None) -> Path:
    """Write a balanced, stratified 60/20/20 dataset; returns the manifest path."""
    if n_real < 1 or n_fake < 1:
        raise ValueError("need at least one clip per class")
    base = spec or SynthSpec()
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)

    records = []
    jobs = [(0, i, n_real) for i in range(n_real)] + [(1, i, n_fake) for i in range(n_fake)]
    for label, index, count in jobs:
        tag = "real" if label == 0 else "fake"
        cid = f"{tag}_{index:04d}"
        cspec = replace(base, seed=clip_seed(seed, index if label == 0 else n_real + index))
        clip = generate_clip(cspec, label, clip_id=cid)
        frames_dir, audio_path = write_clip(clip, clips_dir)
        records.append(data_io.ClipRecord(
            clip_id=cid,
            frames_path=frames_dir,
            audio_path=audio_path,
            label=label,
            split=_split_of(index, count),
        ))

    manifest = out_dir / "manifest.tsv"
    data_io.write_manifest(manifest, records)
    meta = {"seed": seed, "n_real": n_real, "n_fake": n_fake, "spec": asdict(base)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest
