"""Spatial attention from channel-pooled audio/visual descriptors.

The gate pools both feature maps along the channel axis (mean and max),
pushes each pooled pair through a sigmoid-activated 7x7 conv, and derives
a single (0,1) attention map from the concatenated branches. The attended
feature is the input scaled per position by that map. With no audio input
the visual descriptor stands in for both, which is the visual-only
ablation arm.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .layers import Conv2d, Module, batchify
from .tensor import Tensor


class AttentionGate(Module):
    """Two pooled descriptors -> two conv+sigmoid branches -> one map."""

    def __init__(self, rng: np.random.Generator, *, kernel: int = 7, dtype=np.float64):
        super().__init__()
        pad = kernel // 2
        self.conv_avg = Conv2d(2, 1, kernel, rng, padding=pad, dtype=dtype)
        self.conv_max = Conv2d(2, 1, kernel, rng, padding=pad, dtype=dtype)
        self.conv_out = Conv2d(2, 1, kernel, rng, padding=pad, dtype=dtype)

    def attention_map(self, f_v, f_a=None) -> Tensor:
        """Map with values strictly in (0, 1); ``f_a=None`` uses f_v for both."""
        f_v, squeeze = batchify(f_v)
        if f_a is None:
            f_a = f_v
        else:
            f_a, _ = batchify(f_a)
            if f_a.shape[-2:] != f_v.shape[-2:]:
                raise ValueError(
                    f"spatial dims differ: visual {f_v.shape[-2:]} vs audio {f_a.shape[-2:]}"
                )
            if f_a.shape[0] != f_v.shape[0]:
                raise ValueError("batch sizes differ between visual and audio features")
        f_avg = tz.concat([tz.channel_pool("avg", f_v), tz.channel_pool("avg", f_a)], axis=1)
        f_max = tz.concat([tz.channel_pool("max", f_v), tz.channel_pool("max", f_a)], axis=1)
        f_prime = tz.concat(
            [tz.sigmoid(self.conv_avg(f_avg)), tz.sigmoid(self.conv_max(f_max))], axis=1
        )
        m = tz.sigmoid(self.conv_out(f_prime))
        return tz.reshape(m, m.shape[1:]) if squeeze else m

    def __call__(self, f_v, f_a=None) -> Tensor:
        return apply_map(f_v, self.attention_map(f_v, f_a))


def apply_map(f_v, m) -> Tensor:
    """Scale every channel of ``f_v`` by the spatial map (broadcast over channels)."""
    f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
    m = m if isinstance(m, Tensor) else Tensor(m)
    if m.shape[-2:] != f_v.shape[-2:]:
        raise ValueError(
            f"spatial dims differ: feature {f_v.shape[-2:]} vs map {m.shape[-2:]}"
        )
    return f_v * m
