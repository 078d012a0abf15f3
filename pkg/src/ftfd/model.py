"""Full detector: stream encoders + fusion + classifier, loss and inference.

The network emits raw logits; the sigmoid lives inside the loss so extreme
scores cannot overflow. Segment-level verdicts average the sigmoid scores
of all sliding windows over a 25-frame evaluation segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import signal_prep as sp
from . import tensor as tz
from .data_io import config_digest
from .encoders import (AudioEncoder, EncoderConfig, StreamEncoder,
                       TwinAudioEncoder, block_sizes, prepare_spectrogram,
                       DEFAULT_CONVS, DEFAULT_WIDTHS)
from .fusion import FusionConfig, MultiScaleFusion, _pool_to
from .layers import Dropout, Linear, Module, batchify
from .tensor import Tensor

MODALITIES = ("visual", "audio", "motion")


@dataclass(frozen=True)
class ModelConfig:
    t_frames: int = 4
    input_size: int = 112
    channels: int = 3
    widths: tuple = DEFAULT_WIDTHS
    convs: tuple = DEFAULT_CONVS
    fusion: str = "cmf"
    attention: str = "avam"            # none | visual | avam
    modalities: tuple = MODALITIES
    dropout: float = 0.5
    classifier_widths: tuple = (512, 128)
    sample_rate: int = 16000
    fps: float = 25.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad or not self.modalities:
            raise ValueError(f"modalities must be a non-empty subset of {MODALITIES}")
        if self.attention not in ("none", "visual", "avam"):
            raise ValueError(f"unknown attention variant {self.attention!r}")
        if self.attention != "none" and "visual" not in self.modalities:
            raise ValueError("attention variants require the visual stream")
        if self.attention == "avam" and "audio" not in self.modalities:
            raise ValueError("avam attention requires the audio stream")
        if len(self.modalities) > 1 and "visual" not in self.modalities:
            raise ValueError("multi-stream fusion requires the visual stream")

    def digest(self) -> str:
        return config_digest(asdict(self))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class FTFDNet(Module):
    """Tri-modal fake-talking-face detector emitting one logit per sample."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        size = cfg.input_size
        n_blocks = len(cfg.widths)

        if "visual" in cfg.modalities:
            self.visual = StreamEncoder(
                EncoderConfig(cfg.t_frames * cfg.channels, cfg.widths, cfg.convs),
                size, rng, attention=cfg.attention, dtype=dtype)
        if "motion" in cfg.modalities:
            self.motion = StreamEncoder(
                EncoderConfig(cfg.t_frames * 2, cfg.widths, cfg.convs),
                size, rng, dtype=dtype)
        if "audio" in cfg.modalities:
            self.audio = AudioEncoder(
                EncoderConfig(1, cfg.widths, cfg.convs), size, rng, dtype=dtype)
        if cfg.attention == "avam":
            self.twin_audio = TwinAudioEncoder(
                EncoderConfig(1, cfg.widths, cfg.convs), size, rng, dtype=dtype)

        sizes = block_sizes(size, n_blocks)
        if len(cfg.modalities) == 1:
            # single stream: flatten its last two blocks, no fusion weights
            self.fuse = None
            deep = sizes[-1]
            consumed = cfg.widths[-min(2, n_blocks):]
            self.flat_len = sum(w * deep * deep for w in consumed)
        else:
            self.fuse = MultiScaleFusion(
                FusionConfig(cfg.fusion), cfg.widths, size, rng,
                modalities=cfg.modalities, dtype=dtype)
            self.flat_len = self.fuse.flat_len

        w1, w2 = cfg.classifier_widths
        self.fc1 = Linear(self.flat_len, w1, rng, dtype=dtype)
        self.fc2 = Linear(w1, w2, rng, dtype=dtype)
        self.fc3 = Linear(w2, 1, rng, dtype=dtype)
        self.drop1 = Dropout(cfg.dropout, int(rng.integers(2 ** 31)))
        self.drop2 = Dropout(cfg.dropout, int(rng.integers(2 ** 31)))

    # -- forward ---------------------------------------------------------
    def _encode(self, inputs: dict):
        cfg = self.cfg
        pyramids = {}
        twin = None
        if "audio" in cfg.modalities:
            spec = inputs.get("spec")
            if spec is None:
                raise ValueError("audio stream enabled but no 'spec' input given")
            if cfg.attention == "avam":
                twin = self.twin_audio(spec)
            pyramids["audio"] = self.audio(spec)
        if "visual" in cfg.modalities:
            frames = inputs.get("frames")
            if frames is None:
                raise ValueError("visual stream enabled but no 'frames' input given")
            pyramids["visual"] = self.visual(frames, audio_pyramid=twin)
        if "motion" in cfg.modalities:
            flows = inputs.get("flows")
            if flows is None:
                raise ValueError("motion stream enabled but no 'flows' input given")
            pyramids["motion"] = self.motion(flows)
        return pyramids

    def avam_maps(self, inputs: dict) -> list[np.ndarray]:
        """Per-block attention maps for one batch (requires avam attention)."""
        if self.cfg.attention != "avam":
            raise ValueError("attention maps require an avam-configured model")
        twin = self.twin_audio(inputs["spec"])
        x, _ = batchify(inputs["frames"])
        maps = []
        h = x
        with tz.no_grad():
            for i, block in enumerate(self.visual.blocks):
                h = block.body(h)
                m = self.visual.gates[i].attention_map(h, twin.pre_pool[i])
                maps.append(m.data)
                h = block.shrink(h * m)
        return maps

    def forward(self, inputs: dict) -> Tensor:
        """Raw logits, shape (N,); inputs hold only the enabled streams."""
        pyramids = self._encode(inputs)
        if self.fuse is not None:
            flat = self.fuse(pyramids.get("visual"), pyramids.get("motion"),
                             pyramids.get("audio"))
        else:
            pyr = next(iter(pyramids.values()))
            deep = pyr.blocks[-1]
            take = pyr.blocks[-min(2, len(pyr.blocks)):]
            maps = [_pool_to(t, deep.shape[-1]) for t in take]
            joined = tz.concat(maps, axis=-3)
            flat = tz.reshape(joined, (joined.shape[0], -1)) if joined.ndim == 4 \
                else tz.reshape(joined, (-1,))
        if flat.ndim == 1:
            flat = tz.reshape(flat, (1, -1))
        h = self.drop1(tz.relu(self.fc1(flat)))
        h = self.drop2(tz.relu(self.fc2(h)))
        return tz.reshape(self.fc3(h), (-1,))

    __call__ = forward


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------

def logloss(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy on sigmoid(logits), fused as softplus(x) - x*y."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.size != labels.size:
        raise ValueError(f"{logits.size} logits vs {labels.size} labels")
    flat = tz.reshape(logits, (-1,))
    return tz.tmean(tz.softplus(flat) - flat * labels.reshape(-1))


def sigmoid_scores(logits: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(logits >= 0, 1.0 / (1.0 + np.exp(-logits)),
                        np.exp(logits) / (1.0 + np.exp(logits)))


# ---------------------------------------------------------------------
# per-window inputs and segment scoring
# ---------------------------------------------------------------------

@dataclass
class LoadedClip:
    """In-memory clip with a lazy per-pair optical flow cache."""

    clip_id: str
    frames: np.ndarray            # (n, C, H, W), 0..255
    audio: np.ndarray
    sample_rate: int
    label: int
    fps: float = 25.0
    flow_params: sp.FlowParams = field(default_factory=sp.FlowParams)
    _flows: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def pair_flow(self, i: int) -> np.ndarray:
        """Flow between frames i and i+1, cached after the first call."""
        got = self._flows.get(i)
        if got is None:
            fl = sp.farneback_flow(self.frames[i], self.frames[i + 1], self.flow_params)
            got = fl.values.astype(np.float32)
            self._flows[i] = got
        return got


def window_inputs(clip: LoadedClip, start: int, cfg: ModelConfig) -> dict:
    """Per-modality arrays for one T(+1)-frame window of a clip."""
    t = cfg.t_frames
    if start < 0 or start + t + 1 > clip.n_frames:
        raise ValueError(
            f"window [{start}, {start + t + 1}) outside clip of {clip.n_frames} frames"
        )
    dtype = cfg.np_dtype
    out = {}
    if "visual" in cfg.modalities:
        block = clip.frames[start:start + t]
        n, c, h, w = block.shape
        out["frames"] = (block.reshape(n * c, h, w) / 255.0).astype(dtype)
    if "motion" in cfg.modalities:
        flows = [clip.pair_flow(start + i) for i in range(t)]
        out["flows"] = np.concatenate(flows, axis=0).astype(dtype)
    if "audio" in cfg.modalities:
        win = sp.FrameWindow(frames=clip.frames[start:start + t + 1],
                             fps=clip.fps, start=start)
        audio = sp.align_audio_window(clip.audio, clip.sample_rate, win, t)
        spec = sp.compute_mfcc(audio, clip.sample_rate)
        out["spec"] = prepare_spectrogram(spec, cfg.input_size).astype(dtype)
    return out


def batch_inputs(samples: list[dict]) -> dict:
    keys = samples[0].keys()
    return {k: np.stack([s[k] for s in samples]) for k in keys}


@dataclass
class DetectionReport:
    clip_id: str
    window_logits: np.ndarray
    segment_score: float
    verdict: str                  # 'fake' | 'real'
    threshold: float


def predict_segment(model: FTFDNet, clip: LoadedClip, *, threshold: float = 0.5,
                    segment_frames: int = 25) -> DetectionReport:
    """Score sliding T+1 windows over the leading 25-frame segment."""
    cfg = model.cfg
    span = cfg.t_frames + 1
    if clip.n_frames < segment_frames:
        raise ValueError(
            f"clip {clip.clip_id} has {clip.n_frames} frames, needs {segment_frames}"
        )
    n_windows = segment_frames - span + 1
    model.eval()
    with tz.no_grad():
        batch = batch_inputs([window_inputs(clip, s, cfg) for s in range(n_windows)])
        logits = model.forward(batch).data.astype(np.float64)
    score = float(np.mean(sigmoid_scores(logits)))
    verdict = "fake" if score >= threshold else "real"
    return DetectionReport(clip.clip_id, logits, score, verdict, threshold)
