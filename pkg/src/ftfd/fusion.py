"""Joint representation of the three streams.

The full path modulates the visual feature with the motion feature (a
per-channel affine whose scale/shift come from two linear heads on the
spatially averaged motion map), refines it with conv+BN+ReLU, then mixes
in the audio feature through query-key-value attention with an additive
residual. This runs at the consumed pyramid blocks; shallower fused maps
are max-pooled down to the deepest grid and everything is concatenated
along channels and flattened. Plain concatenation and element-wise sum of
the raw stream features are available as ablation strategies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .encoders import FeaturePyramid, block_sizes
from .layers import Conv2d, ConvBNReLU, Linear, Module
from .tensor import Tensor

STRATEGIES = ("cmf", "concat", "sum", "cmf_kqv", "cmf_last", "cmf_last3")

_BLOCKS_CONSUMED = {"cmf": 2, "concat": 2, "sum": 2, "cmf_kqv": 2,
                    "cmf_last": 1, "cmf_last3": 3}


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "cmf"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")

    @property
    def n_consumed(self) -> int:
        return _BLOCKS_CONSUMED[self.strategy]

    @property
    def kqv_variant(self) -> str:
        return "kqv" if self.strategy == "cmf_kqv" else "standard"

    @property
    def uses_attention(self) -> bool:
        return self.strategy.startswith("cmf")


class FilmModulator(Module):
    """Per-channel affine on the visual map conditioned on the motion map."""

    def __init__(self, c_motion: int, c_visual: int, rng, dtype=np.float64):
        super().__init__()
        # scale head starts at 1 so the modulated map begins near identity
        self.scale_head = Linear(c_motion, c_visual, rng, dtype=dtype, bias_init=1.0)
        self.shift_head = Linear(c_motion, c_visual, rng, dtype=dtype)

    def __call__(self, f_m, f_v) -> Tensor:
        f_m = f_m if isinstance(f_m, Tensor) else Tensor(f_m)
        f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
        if f_m.shape[-2:] != f_v.shape[-2:]:
            raise ValueError(
                f"spatial dims differ: motion {f_m.shape[-2:]} vs visual {f_v.shape[-2:]}"
            )
        batched = f_v.ndim == 4
        cond = tz.tmean(f_m, axis=(-2, -1))              # (C_m,) or (N, C_m)
        if not batched:
            cond = tz.reshape(cond, (1, -1))
        gamma = self.scale_head(cond)
        beta = self.shift_head(cond)
        if batched:
            gamma = tz.reshape(gamma, (*gamma.shape, 1, 1))
            beta = tz.reshape(beta, (*beta.shape, 1, 1))
        else:
            gamma = tz.reshape(gamma, (-1, 1, 1))
            beta = tz.reshape(beta, (-1, 1, 1))
        return gamma * f_v + beta


class CrossModalAttention(Module):
    """softmax(K Q^T / sqrt(d)) V with an additive residual on the value stream.

    Standard variant: K, Q from the audio feature and V from the modulated
    visual feature; the kqv variant sources K, V from the modulated visual
    feature and Q from audio. The residual adds the modulated visual feature
    either way.
    """

    def __init__(self, channels: int, rng, *, variant: str = "standard",
                 dtype=np.float64):
        super().__init__()
        if variant not in ("standard", "kqv"):
            raise ValueError(f"unknown attention variant {variant!r}")
        self.variant = variant
        self.channels = channels
        self.proj_k = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.proj_q = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.proj_v = Conv2d(channels, channels, 1, rng, dtype=dtype)

    def __call__(self, f_vm, f_a) -> Tensor:
        f_vm = f_vm if isinstance(f_vm, Tensor) else Tensor(f_vm)
        f_a = f_a if isinstance(f_a, Tensor) else Tensor(f_a)
        if f_vm.shape != f_a.shape:
            raise ValueError(
                f"modulated visual and audio shapes differ: {f_vm.shape} vs {f_a.shape}"
            )
        squeeze = f_vm.ndim == 3
        if squeeze:
            f_vm = tz.reshape(f_vm, (1, *f_vm.shape))
            f_a = tz.reshape(f_a, (1, *f_a.shape))
        n, c, h, w = f_vm.shape
        if self.variant == "kqv":
            k, q, v = self.proj_k(f_vm), self.proj_q(f_a), self.proj_v(f_vm)
        else:
            k, q, v = self.proj_k(f_a), self.proj_q(f_a), self.proj_v(f_vm)

        def as_rows(t):                                   # (N, L, d)
            return tz.transpose(tz.reshape(t, (n, c, h * w)), (0, 2, 1))

        scores = tz.bmm(as_rows(k), tz.transpose(as_rows(q), (0, 2, 1)))
        weights = tz.softmax(scores * (1.0 / np.sqrt(c)), axis=-1)
        mixed = tz.bmm(weights, as_rows(v))
        fused = tz.reshape(tz.transpose(mixed, (0, 2, 1)), (n, c, h, w)) + f_vm
        return tz.reshape(fused, fused.shape[1:]) if squeeze else fused


class _SumStage(Module):
    """1x1-project each stream to the block width and add them up."""

    def __init__(self, channels: int, n_streams: int, rng, dtype=np.float64):
        super().__init__()
        self.convs = [Conv2d(channels, channels, 1, rng, dtype=dtype)
                      for _ in range(n_streams)]

    def __call__(self, feats) -> Tensor:
        acc = None
        for conv, feat in zip(self.convs, feats):
            term = conv(feat)
            acc = term if acc is None else acc + term
        return acc


class _CmfStage(Module):
    """film -> conv/BN/ReLU -> cross-modal attention for one pyramid block."""

    def __init__(self, channels: int, rng, *, variant: str, use_motion: bool,
                 use_audio: bool, dtype=np.float64):
        super().__init__()
        self.use_motion = use_motion
        self.use_audio = use_audio
        self.film = FilmModulator(channels, channels, rng, dtype=dtype) if use_motion else None
        self.refine = ConvBNReLU(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.cma = (CrossModalAttention(channels, rng, variant=variant, dtype=dtype)
                    if use_audio else None)

    def __call__(self, f_v, f_m, f_a) -> Tensor:
        h = self.film(f_m, f_v) if self.film is not None else f_v
        h = self.refine(h)
        if self.cma is not None:
            h = self.cma(h, f_a)
        return h


def _pool_to(t: Tensor, target: int) -> Tensor:
    guard = 0
    while t.shape[-1] > target:
        t = tz.pool2d("max", t, 2, 2)
        guard += 1
        if guard > 16:
            raise ValueError("downsampling never reached the target grid")
    if t.shape[-1] != target:
        raise ValueError(f"cannot pool {t.shape[-1]} down to {target}")
    return t


class MultiScaleFusion(Module):
    """Fuse the consumed pyramid blocks into one flat feature vector."""

    def __init__(self, cfg: FusionConfig, widths, input_size: int, rng, *,
                 modalities=("visual", "audio", "motion"), dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.modalities = tuple(modalities)
        if "visual" not in self.modalities:
            raise ValueError("fusion requires the visual stream")
        n = cfg.n_consumed
        if n > len(widths):
            raise ValueError(
                f"strategy {cfg.strategy} consumes {n} blocks, encoder has {len(widths)}"
            )
        self.consumed = list(range(len(widths) - n, len(widths)))
        self.block_widths = [widths[i] for i in self.consumed]
        sizes = block_sizes(input_size, len(widths))
        self.block_dims = [sizes[i] for i in self.consumed]
        self.target_dim = sizes[-1]

        use_motion = "motion" in self.modalities
        use_audio = "audio" in self.modalities
        n_streams = 1 + use_motion + use_audio
        if cfg.uses_attention:
            self.stages = [
                _CmfStage(w, rng, variant=cfg.kqv_variant, use_motion=use_motion,
                          use_audio=use_audio, dtype=dtype)
                for w in self.block_widths
            ]
            self.flat_len = sum(w * self.target_dim ** 2 for w in self.block_widths)
        elif cfg.strategy == "concat":
            self.stages = []
            self.flat_len = sum(
                w * n_streams * self.target_dim ** 2 for w in self.block_widths
            )
        else:                                           # sum
            self.stages = [_SumStage(w, n_streams, rng, dtype=dtype)
                           for w in self.block_widths]
            self.flat_len = sum(w * self.target_dim ** 2 for w in self.block_widths)

    def _streams_at(self, idx, visual, motion, audio):
        feats = [visual.blocks[idx]]
        if "audio" in self.modalities:
            feats.append(audio.blocks[idx])
        if "motion" in self.modalities:
            feats.append(motion.blocks[idx])
        return feats

    def __call__(self, visual: FeaturePyramid, motion: FeaturePyramid | None,
                 audio: FeaturePyramid | None) -> Tensor:
        fused_maps = []
        for pos, idx in enumerate(self.consumed):
            f_v = visual.blocks[idx]
            if f_v.shape[-1] != self.block_dims[pos]:
                raise ValueError(
                    f"block {idx} grid {f_v.shape[-1]} != configured {self.block_dims[pos]}"
                )
            if self.cfg.uses_attention:
                f_m = motion.blocks[idx] if "motion" in self.modalities else None
                f_a = audio.blocks[idx] if "audio" in self.modalities else None
                fused = self.stages[pos](f_v, f_m, f_a)
            elif self.cfg.strategy == "concat":
                fused = tz.concat(self._streams_at(idx, visual, motion, audio),
                                  axis=-3)
            else:
                fused = self.stages[pos](self._streams_at(idx, visual, motion, audio))
            fused_maps.append(_pool_to(fused, self.target_dim))
        joined = tz.concat(fused_maps, axis=-3)
        if joined.ndim == 3:
            return tz.reshape(joined, (-1,))
        return tz.reshape(joined, (joined.shape[0], -1))
