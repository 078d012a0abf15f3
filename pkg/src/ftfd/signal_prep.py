"""Clip preprocessing: MFCC spectrograms, dense optical flow, input stacking.

Everything here is deterministic and numpy-native; the outputs feed the
three stream encoders as ``(T*C) x H x W`` frames, ``(T*2) x H x W`` flow
stacks and ``n_coeffs x n_steps`` spectrograms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage


# ---------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class MfccParams:
    win_seconds: float = 0.025
    hop_seconds: float = 0.010
    n_mels: int = 26
    n_coeffs: int = 13
    preemphasis: float = 0.97
    log_floor: float = 1e-10


@dataclass
class Spectrogram:
    """MFCC feature block, coefficients x time steps."""

    values: np.ndarray

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_bins: int, sample_rate: int, frame_len: int) -> np.ndarray:
    """Triangular mel filters (n_mels x n_bins) evaluated at DFT bin centers."""
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_bins) * sample_rate / frame_len
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_signal(signal: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Split into overlapping frames, zero-padding the tail to full coverage."""
    n = len(signal)
    n_frames = 1 if n <= frame_len else 1 + int(np.ceil((n - frame_len) / hop))
    padded = np.zeros((n_frames - 1) * hop + frame_len)
    padded[:n] = signal
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def mel_energies(audio: np.ndarray, sample_rate: int,
                 params: MfccParams = MfccParams()) -> np.ndarray:
    """Per-frame mel filterbank energies (n_frames, n_mels), pre-log."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size == 0:
        raise ValueError("compute_mfcc requires non-empty mono audio")
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    frame_len = int(round(params.win_seconds * sample_rate))
    hop = int(round(params.hop_seconds * sample_rate))
    if frame_len < 2 or hop < 1:
        raise ValueError("analysis window too short for this sample rate")

    emphasized = np.concatenate([audio[:1], audio[1:] - params.preemphasis * audio[:-1]])
    frames = frame_signal(emphasized, frame_len, hop) * np.hamming(frame_len)
    magnitude = np.abs(np.fft.rfft(frames, n=frame_len, axis=1))
    fb = mel_filterbank(params.n_mels, magnitude.shape[1], sample_rate, frame_len)
    return magnitude @ fb.T


def compute_mfcc(audio: np.ndarray, sample_rate: int,
                 params: MfccParams = MfccParams()) -> Spectrogram:
    """Pre-emphasis -> Hamming frames -> |DFT| -> mel bank -> log -> DCT-II."""
    mel = mel_energies(audio, sample_rate, params)
    logmel = np.log(np.maximum(mel, params.log_floor))
    coeffs = sfft.dct(logmel, type=2, axis=1, norm="ortho")[:, :params.n_coeffs]
    return Spectrogram(values=np.ascontiguousarray(coeffs.T))


# ---------------------------------------------------------------------
# Farneback dense optical flow
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    pyr_scale: float = 0.5
    iterations: int = 3
    poly_n: int = 5            # expansion reaches poly_n pixels each side
    poly_sigma: float = 1.1
    win_size: int = 15


@dataclass
class FlowField:
    """Per-pixel displacement, channel 0 = dx (columns), channel 1 = dy (rows)."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.values[0], self.values[1])


def to_luma(frame: np.ndarray) -> np.ndarray:
    """Collapse an RGB (3,H,W) frame to luma; pass single-channel through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 1:
        return frame[0]
    if frame.ndim == 3 and frame.shape[0] == 3:
        return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]
    raise ValueError(f"expected H,W or 1/3-channel C,H,W frame, got {frame.shape}")


def _poly_expand(img: np.ndarray, n: int, sigma: float):
    """Fit f ~ c + bx*x + by*y + axx*x^2 + ayy*y^2 + axy*xy per pixel.

    Gaussian-weighted least squares via separable correlations; returns the
    five non-constant coefficient planes (bx, by, axx, ayy, axy).
    """
    t = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-t * t / (2.0 * sigma * sigma))
    g /= g.sum()
    tg = t * g
    ttg = t * t * g
    m2 = float(ttg.sum())
    m4 = float((t * t * ttg).sum())

    def corr(a, k, axis):
        # correlate1d indexes weights by offset -n..n directly
        return ndimage.correlate1d(a, k, axis=axis, mode="nearest")

    gy = corr(img, g, 0)
    tgy = corr(img, tg, 0)
    ttgy = corr(img, ttg, 0)
    b1 = corr(gy, g, 1)
    bx = corr(gy, tg, 1)
    by = corr(tgy, g, 1)
    bxx = corr(gy, ttg, 1)
    byy = corr(ttgy, g, 1)
    bxy = corr(tgy, tg, 1)

    inv_m2 = 1.0 / m2
    inv_q = 1.0 / (m4 - m2 * m2)
    return (
        bx * inv_m2,
        by * inv_m2,
        (bxx - m2 * b1) * inv_q,
        (byy - m2 * b1) * inv_q,
        bxy / (m2 * m2),
    )


def _bilinear_sample(planes: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (K,H,W) planes at float coordinates with border clamping."""
    _, h, w = planes.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return (planes[:, y0, x0] * w00 + planes[:, y0, x1] * w01
            + planes[:, y1, x0] * w10 + planes[:, y1, x1] * w11)


def _resize_plane(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sy = img.shape[0] / h
    sx = img.shape[1] / w
    ys = (np.arange(h) + 0.5) * sy - 0.5
    xs = (np.arange(w) + 0.5) * sx - 0.5
    return _bilinear_sample(img[None], ys[:, None] + 0 * xs[None, :],
                            0 * ys[:, None] + xs[None, :])[0]


def _flow_single_level(c1, c2, flow: np.ndarray, params: FlowParams) -> np.ndarray:
    """One fixed-point refinement of the displacement field at one scale."""
    bx1, by1, axx1, ayy1, axy1 = c1
    bx2, by2, axx2, ayy2, axy2 = c2
    h, w = bx1.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = yy + flow[1]
    xs = xx + flow[0]
    sampled = _bilinear_sample(np.stack([bx2, by2, axx2, ayy2, axy2]), ys, xs)
    sbx, sby, saxx, sayy, saxy = sampled

    axx = 0.5 * (axx1 + saxx)
    ayy = 0.5 * (ayy1 + sayy)
    axy = 0.25 * (axy1 + saxy)          # A(0,1) = axy coefficient / 2, averaged
    dbx = 0.5 * (bx1 - sbx) + axx * flow[0] + axy * flow[1]
    dby = 0.5 * (by1 - sby) + axy * flow[0] + ayy * flow[1]

    g11 = axx * axx + axy * axy
    g12 = axy * (axx + ayy)
    g22 = ayy * ayy + axy * axy
    h1 = axx * dbx + axy * dby
    h2 = axy * dbx + ayy * dby

    size = params.win_size
    g11, g12, g22, h1, h2 = (
        ndimage.uniform_filter(p, size=size, mode="nearest")
        for p in (g11, g12, g22, h1, h2)
    )
    det = g11 * g22 - g12 * g12
    safe = np.abs(det) > 1e-12
    inv_det = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
    new = np.empty_like(flow)
    new[0] = np.where(safe, (g22 * h1 - g12 * h2) * inv_det, flow[0])
    new[1] = np.where(safe, (g11 * h2 - g12 * h1) * inv_det, flow[1])
    return new


def farneback_flow(prev: np.ndarray, nxt: np.ndarray,
                   params: FlowParams = FlowParams()) -> FlowField:
    """Dense two-frame flow from quadratic polynomial expansion on a pyramid."""
    a = to_luma(prev)
    b = to_luma(nxt)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    span = 2 * params.poly_n + 1
    if h < span or w < span:
        raise ValueError(
            f"frames {h}x{w} smaller than expansion neighborhood {span}x{span}"
        )

    # coarse-to-fine pyramid; keep every level at least the expansion size
    shapes = [(h, w)]
    for _ in range(1, params.levels):
        ph = int(round(shapes[-1][0] * params.pyr_scale))
        pw = int(round(shapes[-1][1] * params.pyr_scale))
        if ph < span or pw < span:
            break
        shapes.append((ph, pw))

    flow = np.zeros((2, *shapes[-1]))
    for lvl in range(len(shapes) - 1, -1, -1):
        ph, pw = shapes[lvl]
        if lvl == 0:
            la, lb = a, b
        else:
            smooth_sigma = 0.5 / params.pyr_scale
            la = _resize_plane(ndimage.gaussian_filter(a, smooth_sigma, mode="nearest"), ph, pw)
            lb = _resize_plane(ndimage.gaussian_filter(b, smooth_sigma, mode="nearest"), ph, pw)
        if flow.shape[1:] != (ph, pw):
            scale_y = ph / flow.shape[1]
            scale_x = pw / flow.shape[2]
            flow = np.stack([
                _resize_plane(flow[0], ph, pw) * scale_x,
                _resize_plane(flow[1], ph, pw) * scale_y,
            ])
        c1 = _poly_expand(la, params.poly_n, params.poly_sigma)
        c2 = _poly_expand(lb, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            flow = _flow_single_level(c1, c2, flow, params)
    return FlowField(values=flow)


# ---------------------------------------------------------------------
# model input stacking
# ---------------------------------------------------------------------

@dataclass
class FrameWindow:
    """Consecutive face frames (n, C, H, W) in 0..255, plus timing metadata."""

    frames: np.ndarray
    fps: float = 25.0
    start: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError(f"FrameWindow frames must be (n, C, H, W), got {self.frames.shape}")


def stack_frames(window: FrameWindow, t: int) -> np.ndarray:
    """First ``t`` frames stacked channel-major, scaled to [0, 1]."""
    if len(window.frames) < t:
        raise ValueError(f"window holds {len(window.frames)} frames, need {t}")
    n, c, h, w = window.frames.shape
    return (window.frames[:t] / 255.0).reshape(t * c, h, w)


def unstack_frames(stacked: np.ndarray, channels: int) -> np.ndarray:
    """Inverse of :func:`stack_frames` (returns frames scaled back to 0..255)."""
    tc, h, w = stacked.shape
    return (stacked * 255.0).reshape(tc // channels, channels, h, w)


def stack_flows(window: FrameWindow, t: int,
                params: FlowParams = FlowParams()) -> np.ndarray:
    """Flows for the ``t`` consecutive frame pairs, stacked to (t*2, H, W)."""
    if len(window.frames) < t + 1:
        raise ValueError(f"window holds {len(window.frames)} frames, need {t + 1}")
    _, _, h, w = window.frames.shape
    out = np.empty((t * 2, h, w))
    for i in range(t):
        fl = farneback_flow(window.frames[i], window.frames[i + 1], params)
        out[2 * i:2 * i + 2] = fl.values
    return out


def align_audio_window(audio: np.ndarray, sample_rate: int,
                       window: FrameWindow, t: int) -> np.ndarray:
    """Samples spanning [start/fps, (start+t)/fps) seconds, zero-padded at edges."""
    audio = np.asarray(audio, dtype=np.float64)
    begin = int(round(window.start / window.fps * sample_rate))
    length = int(round(t / window.fps * sample_rate))
    end = begin + length
    if end <= 0 or begin >= len(audio):
        raise ValueError(
            f"audio window [{begin}, {end}) lies outside clip of {len(audio)} samples"
        )
    out = np.zeros(length)
    lo = max(begin, 0)
    hi = min(end, len(audio))
    out[lo - begin:hi - begin] = audio[lo:hi]
    return out
