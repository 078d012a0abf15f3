"""Three-stream feature encoders plus the twin audio pyramid for attention.

Each stream is a stack of conv blocks that halve the spatial dims, either
with a trailing 2x2 max-pool (visual/motion and the twin audio pyramid) or
by giving the block's last conv stride 2 (audio stream, whose input is a
spectrogram resized to the visual input size). Block b of every stream
lands on the same spatial grid, which the fusion stage and the attention
gates both rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attention import AttentionGate
from .layers import ConvBNReLU, Module, batchify
from .signal_prep import Spectrogram
from .tensor import Tensor

DEFAULT_WIDTHS = (64, 128, 256, 512, 512)
DEFAULT_CONVS = (2, 2, 3, 3, 3)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    widths: tuple = DEFAULT_WIDTHS
    convs: tuple = DEFAULT_CONVS
    downsample: str = "pool"          # 'pool' or 'stride'

    def __post_init__(self):
        if len(self.widths) != len(self.convs):
            raise ValueError("widths and convs must list the same number of blocks")
        if self.downsample not in ("pool", "stride"):
            raise ValueError(f"unknown downsample kind {self.downsample!r}")

    @property
    def n_blocks(self) -> int:
        return len(self.widths)


def block_sizes(input_size: int, n_blocks: int) -> list[int]:
    """Spatial dim after each block (each block halves, floor division)."""
    sizes, s = [], input_size
    for _ in range(n_blocks):
        s = s // 2
        sizes.append(s)
    return sizes


@dataclass
class FeaturePyramid:
    """Per-block outputs: ``blocks`` post-downsample, ``pre_pool`` just before it."""

    blocks: list
    pre_pool: list


class _Block(Module):
    def __init__(self, c_in: int, width: int, n_convs: int, in_size: int,
                 downsample: str, rng, dtype):
        super().__init__()
        self.downsample = downsample
        units = []
        c = c_in
        body = n_convs if downsample == "pool" else n_convs - 1
        for _ in range(max(body, 0)):
            units.append(ConvBNReLU(c, width, 3, rng, padding=1, dtype=dtype))
            c = width
        self.units = units
        if downsample == "stride":
            # pad so the strided conv lands exactly on in_size // 2
            pad = 1 if in_size % 2 == 0 else 0
            self.down = ConvBNReLU(c, width, 3, rng, stride=2, padding=pad, dtype=dtype)
        else:
            self.down = None

    def body(self, x) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x

    def shrink(self, x) -> Tensor:
        if self.down is not None:
            return self.down(x)
        return tz.pool2d("max", x, 2, 2)


class StreamEncoder(Module):
    """VGG-style encoder; optional attention gates act on pre-pool features."""

    def __init__(self, cfg: EncoderConfig, input_size: int, rng, *,
                 attention: str = "none", dtype=np.float64):
        super().__init__()
        if attention not in ("none", "visual", "avam"):
            raise ValueError(f"unknown attention variant {attention!r}")
        if attention != "none" and cfg.downsample != "pool":
            raise ValueError("attention gates require pool downsampling")
        self.cfg = cfg
        self.input_size = input_size
        self.attention = attention
        blocks = []
        c = cfg.in_channels
        size = input_size
        for width, n_convs in zip(cfg.widths, cfg.convs):
            blocks.append(_Block(c, width, n_convs, size, cfg.downsample, rng, dtype))
            c = width
            size //= 2
        self.blocks = blocks
        if attention == "none":
            self.gates = []
        else:
            self.gates = [AttentionGate(rng, dtype=dtype) for _ in cfg.widths]

    def forward(self, x, audio_pyramid: FeaturePyramid | None = None) -> FeaturePyramid:
        x, _ = batchify(x)
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, encoder expects {self.cfg.in_channels}"
            )
        if self.attention == "avam" and audio_pyramid is None:
            raise ValueError("avam attention needs an audio pyramid")
        pre_pool, outs = [], []
        h = x
        for i, block in enumerate(self.blocks):
            h = block.body(h)
            if self.attention == "avam":
                h = self.gates[i](h, audio_pyramid.pre_pool[i])
            elif self.attention == "visual":
                h = self.gates[i](h)
            pre_pool.append(h)
            h = block.shrink(h)
            outs.append(h)
        return FeaturePyramid(blocks=outs, pre_pool=pre_pool)

    __call__ = forward


def prepare_spectrogram(spec: Spectrogram | np.ndarray, size: int) -> np.ndarray:
    """Resize an MFCC block to a single-channel (1, size, size) image."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("spectrogram must be a non-empty 2-D array")
    with tz.no_grad():
        resized = tz.resize_bilinear(Tensor(values[None]), size, size)
    return resized.data


class AudioEncoder(Module):
    """Strided-conv stream for the fusion branch; resizes spectrograms itself."""

    def __init__(self, cfg: EncoderConfig, input_size: int, rng, dtype=np.float64):
        super().__init__()
        self.input_size = input_size
        self.encoder = StreamEncoder(
            EncoderConfig(cfg.in_channels, cfg.widths, cfg.convs, "stride"),
            input_size, rng, dtype=dtype)

    def forward(self, spec) -> FeaturePyramid:
        if isinstance(spec, Spectrogram):
            spec = prepare_spectrogram(spec, self.input_size)
        x, _ = batchify(spec)
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = tz.resize_bilinear(x, self.input_size, self.input_size)
        return self.encoder(x)

    __call__ = forward


class TwinAudioEncoder(Module):
    """Pool-downsampled audio pyramid whose pre-pool dims mirror the visual ones.

    Weights are independent of the visual encoder by default; pass
    ``share_with`` to reuse an existing encoder's weights instead.
    """

    def __init__(self, cfg: EncoderConfig, input_size: int, rng, *,
                 dtype=np.float64, share_with: StreamEncoder | None = None):
        super().__init__()
        self.input_size = input_size
        if share_with is not None:
            self.encoder = share_with
        else:
            self.encoder = StreamEncoder(
                EncoderConfig(1, cfg.widths, cfg.convs, "pool"),
                input_size, rng, dtype=dtype)

    def forward(self, spec) -> FeaturePyramid:
        if isinstance(spec, Spectrogram):
            spec = prepare_spectrogram(spec, self.input_size)
        x, _ = batchify(spec)
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = tz.resize_bilinear(x, self.input_size, self.input_size)
        return self.encoder(x)

    __call__ = forward
