import numpy as np
import pytest

import ftfd.tensor as tz
from ftfd.encoders import FeaturePyramid
from ftfd.fusion import (CrossModalAttention, FilmModulator, FusionConfig,
                         MultiScaleFusion)
from ftfd.layers import set_bn_updates
from ftfd.tensor import Tensor

from conftest import check_gradients
from oracles import cma_oracle, film_oracle


class TestFilm:
    def test_identity_when_scale_one_shift_zero(self, rng):
        mod = FilmModulator(4, 4, np.random.default_rng(0))
        for p in (mod.scale_head.weight, mod.shift_head.weight, mod.shift_head.bias):
            p.data[...] = 0.0
        mod.scale_head.bias.data[...] = 1.0
        f_v = rng.standard_normal((4, 5, 5))
        out = mod(Tensor(rng.standard_normal((4, 5, 5))), Tensor(f_v))
        assert np.allclose(out.data, f_v)

    def test_constant_when_scale_zero(self, rng):
        mod = FilmModulator(4, 4, np.random.default_rng(0))
        for p in (mod.scale_head.weight, mod.scale_head.bias, mod.shift_head.weight):
            p.data[...] = 0.0
        mod.shift_head.bias.data[...] = np.arange(4.0)
        out = mod(Tensor(rng.standard_normal((4, 5, 5))),
                  Tensor(rng.standard_normal((4, 5, 5))))
        for c in range(4):
            assert np.allclose(out.data[c], float(c))

    def test_matches_scalar_loop_oracle(self, rng):
        mod = FilmModulator(3, 5, np.random.default_rng(1))
        f_m = rng.standard_normal((3, 4, 4))
        f_v = rng.standard_normal((5, 4, 4))
        got = mod(Tensor(f_m), Tensor(f_v)).data
        assert np.max(np.abs(got - film_oracle(f_m, f_v, mod))) < 1e-12

    def test_batched_matches_per_sample(self, rng):
        mod = FilmModulator(3, 5, np.random.default_rng(1))
        f_m = rng.standard_normal((2, 3, 4, 4))
        f_v = rng.standard_normal((2, 5, 4, 4))
        batched = mod(Tensor(f_m), Tensor(f_v)).data
        for n in range(2):
            single = mod(Tensor(f_m[n]), Tensor(f_v[n])).data
            assert np.allclose(batched[n], single)

    def test_spatial_mismatch_rejected(self, rng):
        mod = FilmModulator(3, 3, np.random.default_rng(0))
        with pytest.raises(ValueError, match="spatial"):
            mod(Tensor(rng.random((3, 4, 4))), Tensor(rng.random((3, 5, 5))))

    def test_gradients(self, rng):
        mod = FilmModulator(3, 4, np.random.default_rng(2))
        f_m = rng.standard_normal((3, 4, 4))
        f_v = rng.standard_normal((4, 4, 4))
        check_gradients(lambda ts: (mod(ts[0], ts[1]) ** 2).sum(), [f_m, f_v])


class TestCrossModalAttention:
    def test_single_position_softmax_collapses(self, rng):
        cma = CrossModalAttention(6, np.random.default_rng(0))
        f_vm = rng.standard_normal((6, 1, 1))
        f_a = rng.standard_normal((6, 1, 1))
        got = cma(Tensor(f_vm), Tensor(f_a)).data
        wgt = cma.proj_v.weight.data[:, :, 0, 0]
        v = wgt @ f_vm[:, 0, 0] + cma.proj_v.bias.data
        assert np.allclose(got[:, 0, 0], v + f_vm[:, 0, 0])

    def test_zero_value_projection_passes_residual(self, rng):
        cma = CrossModalAttention(6, np.random.default_rng(1))
        cma.proj_v.weight.data[...] = 0.0
        cma.proj_v.bias.data[...] = 0.0
        f_vm = rng.standard_normal((6, 3, 3))
        out = cma(Tensor(f_vm), Tensor(rng.standard_normal((6, 3, 3))))
        assert np.allclose(out.data, f_vm)

    @pytest.mark.parametrize("variant", ["standard", "kqv"])
    def test_matches_straight_line_oracle(self, rng, variant):
        cma = CrossModalAttention(8, np.random.default_rng(2), variant=variant)
        f_vm = rng.standard_normal((8, 3, 3))
        f_a = rng.standard_normal((8, 3, 3))
        got = cma(Tensor(f_vm), Tensor(f_a)).data
        assert np.max(np.abs(got - cma_oracle(f_vm, f_a, cma))) < 1e-10

    def test_attention_rows_sum_to_one(self, rng):
        cma = CrossModalAttention(4, np.random.default_rng(3))
        f_a = rng.standard_normal((4, 3, 3))
        k = cma.proj_k(Tensor(f_a)).data.reshape(4, 9).T
        q = cma.proj_q(Tensor(f_a)).data.reshape(4, 9).T
        scores = Tensor(k @ q.T / 2.0)
        rows = tz.softmax(scores, axis=1).data.sum(axis=1)
        assert np.max(np.abs(rows - 1.0)) < 1e-6

    def test_shape_mismatch_rejected(self, rng):
        cma = CrossModalAttention(4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="differ"):
            cma(Tensor(rng.random((4, 3, 3))), Tensor(rng.random((4, 2, 2))))

    def test_batched_matches_per_sample(self, rng):
        cma = CrossModalAttention(5, np.random.default_rng(4))
        f_vm = rng.standard_normal((2, 5, 3, 3))
        f_a = rng.standard_normal((2, 5, 3, 3))
        batched = cma(Tensor(f_vm), Tensor(f_a)).data
        for n in range(2):
            single = cma(Tensor(f_vm[n]), Tensor(f_a[n])).data
            assert np.max(np.abs(batched[n] - single)) < 1e-12

    def test_gradients(self, rng):
        cma = CrossModalAttention(4, np.random.default_rng(5))
        f_vm = rng.standard_normal((4, 2, 2))
        f_a = rng.standard_normal((4, 2, 2))
        check_gradients(lambda ts: (cma(ts[0], ts[1]) ** 2).sum(), [f_vm, f_a])


def pyramid(rng, widths=(4, 8), dims=(8, 4), batch=None):
    blocks = []
    for w, d in zip(widths, dims):
        shape = (w, d, d) if batch is None else (batch, w, d, d)
        blocks.append(Tensor(rng.standard_normal(shape)))
    return FeaturePyramid(blocks=blocks, pre_pool=[])


class TestMultiScaleFusion:
    def make(self, strategy, rng_seed=0, widths=(4, 8), input_size=16,
             modalities=("visual", "audio", "motion")):
        fus = MultiScaleFusion(FusionConfig(strategy), widths, input_size,
                               np.random.default_rng(rng_seed), modalities=modalities)
        set_bn_updates(fus, False)
        return fus

    def test_default_flat_length_is_9216(self):
        fus = MultiScaleFusion(FusionConfig("cmf"), (64, 128, 256, 512, 512), 112,
                               np.random.default_rng(0))
        assert fus.flat_len == 9216

    def test_cmf_shapes_and_length(self, rng):
        fus = self.make("cmf")
        out = fus(pyramid(rng), pyramid(rng), pyramid(rng))
        assert out.shape == (fus.flat_len,)
        assert fus.flat_len == 4 * 16 + 8 * 16   # both blocks pooled to the 4-grid

    @pytest.mark.parametrize("strategy,consumed", [
        ("cmf", 2), ("concat", 2), ("sum", 2), ("cmf_kqv", 2),
        ("cmf_last", 1), ("cmf_last3", 3),
    ])
    def test_block_consumption(self, strategy, consumed):
        assert FusionConfig(strategy).n_consumed == consumed

    def test_cmf_last_uses_single_block(self, rng):
        fus = self.make("cmf_last")
        out = fus(pyramid(rng), pyramid(rng), pyramid(rng))
        assert out.shape == (8 * 16,)

    def test_cmf_last3_needs_three_blocks(self):
        with pytest.raises(ValueError, match="consumes"):
            self.make("cmf_last3")

    def test_concat_flat_length(self, rng):
        fus = self.make("concat")
        out = fus(pyramid(rng), pyramid(rng), pyramid(rng))
        assert out.shape == (fus.flat_len,)
        assert fus.flat_len == (4 * 3) * 16 + (8 * 3) * 16

    def test_sum_with_zero_stream_reduces_to_two_terms(self, rng):
        from ftfd.fusion import _pool_to
        fus = self.make("sum", rng_seed=1)
        vis, mot, aud = pyramid(rng), pyramid(rng), pyramid(rng)
        zero = FeaturePyramid(
            blocks=[Tensor(np.zeros(b.shape)) for b in mot.blocks], pre_pool=[])
        for stage in fus.stages:
            stage.convs[2].bias.data[...] = 0.0   # streams order: visual, audio, motion
        got = fus(vis, zero, aud).data
        maps = []
        for pos, idx in enumerate(fus.consumed):
            term = fus.stages[pos].convs[0](vis.blocks[idx]) \
                + fus.stages[pos].convs[1](aud.blocks[idx])
            maps.append(_pool_to(term, fus.target_dim))
        want = tz.concat(maps, axis=-3).data.reshape(-1)
        assert np.allclose(got, want)

    def test_zeroed_penultimate_stage_makes_its_channels_constant(self, rng):
        """cmf vs cmf_last differ only by the shallower branch."""
        fus = self.make("cmf", rng_seed=3)
        for p in fus.stages[0].named_params().values():
            p.data[...] = 0.0
        a = fus(pyramid(rng), pyramid(rng), pyramid(rng)).data
        b = fus(pyramid(rng), pyramid(rng), pyramid(rng)).data
        penult_span = 4 * fus.target_dim ** 2
        assert np.allclose(a[:penult_span], b[:penult_span])   # dead branch
        assert not np.allclose(a[penult_span:], b[penult_span:])

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError, match="strategy"):
            FusionConfig("mean")

    def test_flat_len_pure_function_of_config(self):
        a = self.make("cmf", rng_seed=1)
        b = self.make("cmf", rng_seed=99)
        assert a.flat_len == b.flat_len

    def test_batched_output_shape(self, rng):
        fus = self.make("cmf")
        out = fus(pyramid(rng, batch=3), pyramid(rng, batch=3), pyramid(rng, batch=3))
        assert out.shape == (3, fus.flat_len)

    def test_gradients_reach_all_streams(self, rng):
        fus = self.make("cmf", rng_seed=2)
        vis = Tensor(rng.standard_normal((4, 8, 8)), requires_grad=True)
        mot = Tensor(rng.standard_normal((4, 8, 8)), requires_grad=True)
        aud = Tensor(rng.standard_normal((4, 8, 8)), requires_grad=True)
        deep_v = Tensor(rng.standard_normal((8, 4, 4)), requires_grad=True)
        deep_m = Tensor(rng.standard_normal((8, 4, 4)), requires_grad=True)
        deep_a = Tensor(rng.standard_normal((8, 4, 4)), requires_grad=True)
        out = fus(FeaturePyramid([vis, deep_v], []),
                  FeaturePyramid([mot, deep_m], []),
                  FeaturePyramid([aud, deep_a], []))
        out.sum().backward()
        for t in (vis, mot, aud, deep_v, deep_m, deep_a):
            assert t.grad is not None and np.count_nonzero(t.grad) > 0

    def test_modality_subset_audio_visual(self, rng):
        fus = self.make("cmf", modalities=("visual", "audio"))
        out = fus(pyramid(rng), None, pyramid(rng))
        assert out.shape == (fus.flat_len,)

    def test_modality_subset_visual_motion(self, rng):
        fus = self.make("cmf", modalities=("visual", "motion"))
        out = fus(pyramid(rng), pyramid(rng), None)
        assert out.shape == (fus.flat_len,)
