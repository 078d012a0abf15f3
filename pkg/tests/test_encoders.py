import numpy as np
import pytest

import ftfd.tensor as tz
from ftfd.encoders import (AudioEncoder, EncoderConfig, StreamEncoder,
                           TwinAudioEncoder, block_sizes, prepare_spectrogram)
from ftfd.layers import set_bn_updates
from ftfd.signal_prep import Spectrogram
from ftfd.tensor import Tensor

TINY = dict(widths=(4, 8), convs=(1, 1))


def tiny_encoder(in_channels, size=16, attention="none", seed=0):
    rng = np.random.default_rng(seed)
    return StreamEncoder(EncoderConfig(in_channels, **TINY), size, rng,
                         attention=attention)


class TestShapes:
    def test_default_visual_block_dims(self, rng):
        enc = StreamEncoder(EncoderConfig(12), 112, rng)
        enc.eval()
        set_bn_updates(enc, False)
        with tz.no_grad():
            pyr = enc(rng.random((12, 112, 112)).astype(np.float32))
        assert tuple(pyr.blocks[3].shape) == (1, 512, 7, 7)
        assert tuple(pyr.blocks[4].shape) == (1, 512, 3, 3)
        assert [b.shape[-1] for b in pyr.blocks] == [56, 28, 14, 7, 3]
        assert [b.shape[-1] for b in pyr.pre_pool] == [112, 56, 28, 14, 7]

    def test_motion_encoder_block_dims(self, rng):
        enc = StreamEncoder(EncoderConfig(8), 112, rng)
        enc.eval()
        set_bn_updates(enc, False)
        with tz.no_grad():
            pyr = enc(rng.random((8, 112, 112)).astype(np.float32))
        assert tuple(pyr.blocks[4].shape) == (1, 512, 3, 3)

    def test_audio_encoder_strided_dims_match(self, rng):
        enc = AudioEncoder(EncoderConfig(1), 112, rng)
        enc.eval()
        set_bn_updates(enc, False)
        spec = Spectrogram(values=rng.standard_normal((13, 16)))
        with tz.no_grad():
            pyr = enc(spec)
        assert tuple(pyr.blocks[3].shape) == (1, 512, 7, 7)
        assert tuple(pyr.blocks[4].shape) == (1, 512, 3, 3)

    def test_twin_audio_dims_mirror_visual(self, rng):
        vis = StreamEncoder(EncoderConfig(12), 112, rng)
        twin = TwinAudioEncoder(EncoderConfig(1), 112, rng)
        for m in (vis, twin):
            m.eval()
            set_bn_updates(m, False)
        spec = Spectrogram(values=rng.standard_normal((13, 20)))
        with tz.no_grad():
            vp = vis(rng.random((12, 112, 112)).astype(np.float32))
            ap = twin(spec)
        for vb, ab in zip(vp.pre_pool, ap.pre_pool):
            assert vb.shape[-2:] == ab.shape[-2:]
        # block 3 sits on a 28-grid pre-pool and a 14-grid post-pool
        assert ap.pre_pool[2].shape[-1] == 28
        assert ap.blocks[2].shape[-1] == 14

    def test_block_sizes_helper(self):
        assert block_sizes(112, 5) == [56, 28, 14, 7, 3]
        assert block_sizes(56, 5) == [28, 14, 7, 3, 1]


class TestBehaviour:
    def test_channel_mismatch_rejected(self, rng):
        enc = tiny_encoder(4)
        with pytest.raises(ValueError, match="channels"):
            enc(rng.random((3, 16, 16)))

    def test_avam_requires_audio_pyramid(self, rng):
        enc = tiny_encoder(2, attention="avam")
        with pytest.raises(ValueError, match="audio pyramid"):
            enc(rng.random((2, 16, 16)))

    def test_zeroed_gates_halve_each_block(self, rng):
        """sigma(0)=0.5 map: per block, the attended output is half the plain one."""
        plain = tiny_encoder(2, seed=3)
        gated = tiny_encoder(2, seed=3, attention="avam")
        for src, dst in zip(plain.blocks, gated.blocks):
            dst.load_state_arrays({k: v.copy() for k, v in src.state_arrays().items()})
        for gate in gated.gates:
            for p in gate.named_params().values():
                p.data[...] = 0.0
        twin = tiny_encoder(1, seed=9)
        for m in (plain, gated, twin):
            m.eval()
            set_bn_updates(m, False)
        x = rng.random((2, 16, 16))
        with tz.no_grad():
            ap = twin(rng.random((1, 16, 16)))
            # feed each block the same input and compare outputs in isolation
            h = Tensor(np.expand_dims(x, 0))
            for i, (pb, gb) in enumerate(zip(plain.blocks, gated.blocks)):
                pre_plain = pb.body(h)
                pre_gated = gated.gates[i](gb.body(h), ap.pre_pool[i])
                assert np.allclose(pre_gated.data, 0.5 * pre_plain.data)
                h = pb.shrink(pre_plain)

    def test_deterministic_forward(self, rng):
        enc = tiny_encoder(2, seed=11)
        enc.eval()
        set_bn_updates(enc, False)
        x = rng.random((2, 16, 16))
        with tz.no_grad():
            a = enc(x)
            b = enc(x)
        for ta, tb in zip(a.blocks, b.blocks):
            assert np.array_equal(ta.data, tb.data)

    def test_same_seed_same_weights(self):
        a = tiny_encoder(2, seed=5)
        b = tiny_encoder(2, seed=5)
        for (ka, va), (kb, vb) in zip(sorted(a.named_params().items()),
                                      sorted(b.named_params().items())):
            assert ka == kb and np.array_equal(va.data, vb.data)

    def test_channel_permutation_changes_features(self, rng):
        enc = tiny_encoder(4, seed=2)
        enc.eval()
        set_bn_updates(enc, False)
        x = rng.random((4, 16, 16))
        with tz.no_grad():
            a = enc(x)
            b = enc(x[::-1].copy())
        assert not np.allclose(a.blocks[-1].data, b.blocks[-1].data)

    def test_zero_flow_input_finite(self, rng):
        enc = tiny_encoder(4, seed=2)
        enc.eval()
        set_bn_updates(enc, False)
        with tz.no_grad():
            pyr = enc(np.zeros((4, 16, 16)))
        assert np.all(np.isfinite(pyr.blocks[-1].data))

    def test_distinct_spectrograms_distinct_features(self, rng):
        enc = AudioEncoder(EncoderConfig(1, **TINY), 16, np.random.default_rng(4))
        enc.eval()
        set_bn_updates(enc, False)
        with tz.no_grad():
            a = enc(Spectrogram(values=rng.standard_normal((13, 16))))
            b = enc(Spectrogram(values=rng.standard_normal((13, 16))))
        assert not np.allclose(a.blocks[-1].data, b.blocks[-1].data)

    def test_constant_spectrogram_finite_and_repeatable(self, rng):
        enc = AudioEncoder(EncoderConfig(1, **TINY), 16, np.random.default_rng(4))
        enc.eval()
        set_bn_updates(enc, False)
        spec = Spectrogram(values=np.zeros((13, 16)))
        with tz.no_grad():
            a = enc(spec)
            b = enc(spec)
        assert np.all(np.isfinite(a.blocks[-1].data))
        assert np.array_equal(a.blocks[-1].data, b.blocks[-1].data)

    def test_gradients_reach_every_weight(self, rng):
        enc = tiny_encoder(2, seed=7, attention="avam")
        twin = tiny_encoder(1, seed=8)
        x = rng.random((2, 2, 16, 16))
        spec = rng.random((2, 1, 16, 16))
        ap = twin(spec)
        pyr = enc(Tensor(x), audio_pyramid=ap)
        loss = (pyr.blocks[-1] * rng.standard_normal(pyr.blocks[-1].shape)).sum()
        loss.backward()
        for name, p in {**enc.named_params(), **twin.named_params()}.items():
            assert p.grad is not None, f"{name} got no gradient"
            assert np.count_nonzero(p.grad) > 0, f"{name} gradient all zero"


class TestPrepareSpectrogram:
    def test_resize_to_square(self, rng):
        out = prepare_spectrogram(Spectrogram(values=rng.standard_normal((13, 16))), 112)
        assert out.shape == (1, 112, 112)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            prepare_spectrogram(np.zeros((0, 5)), 16)
