"""Multi-scale cell matrix: counts, layout, pooling semantics."""

import numpy as np
import numpy.testing as npt
import pytest

import qproto.tensor as T
from qproto.errors import ConfigError, DimensionError
from qproto.hierarchy import fgc_count, hierarchical_rep, multi_instance_rep, scale_layout
from qproto.tensor import Tensor, backward, grad_check


def rng_for(seed):
    return np.random.default_rng(np.random.SeedSequence((0x41E, seed)))


class TestFgcCount:
    def test_reference_629(self):
        assert fgc_count(21, (10, 7, 5, 3, 2, 1)) == 441 + 188 == 629

    def test_no_scales(self):
        assert fgc_count(9, ()) == 81

    def test_desk_scale_94(self):
        assert fgc_count(8, (4, 3, 2, 1)) == 64 + 16 + 9 + 4 + 1 == 94

    @pytest.mark.parametrize("scales", [(9,), (3, 3), (3, 4), (0,)])
    def test_invalid_scales_rejected(self, scales):
        with pytest.raises(ConfigError):
            fgc_count(8, scales)

    def test_layout_offsets(self):
        assert scale_layout(8, (4, 1)) == [(8, 0), (4, 64), (1, 80)]


class TestHierarchicalRep:
    def test_reference_64x629(self):
        x = Tensor(rng_for(0).random((1, 64, 21, 21)))
        rep = hierarchical_rep(x, (10, 7, 5, 3, 2, 1))
        assert rep.fgcs.shape == (1, 64, 629)
        assert rep.sizes == (21, 10, 7, 5, 3, 2, 1)

    def test_base_block_is_row_major_grid(self):
        x = rng_for(1).random((2, 3, 4, 4))
        rep = hierarchical_rep(Tensor(x), (2,))
        npt.assert_array_equal(rep.fgcs.data[:, :, :16], x.reshape(2, 3, 16))

    def test_scale_one_is_global_mean(self):
        x = rng_for(2).random((1, 5, 6, 6))
        rep = hierarchical_rep(Tensor(x), (1,))
        npt.assert_allclose(rep.fgcs.data[:, :, -1], x.mean(axis=(2, 3)), atol=1e-12)

    def test_constant_map_gives_constant_cells(self):
        v = rng_for(3).random(4)
        x = np.broadcast_to(v[None, :, None, None], (1, 4, 8, 8)).copy()
        rep = hierarchical_rep(Tensor(x), (4, 2, 1))
        want = np.broadcast_to(v[None, :, None], rep.fgcs.shape)
        npt.assert_allclose(rep.fgcs.data, want, atol=1e-12)

    def test_single_instance_input(self):
        x = Tensor(rng_for(4).random((3, 6, 6)))
        rep = hierarchical_rep(x, (2, 1))
        assert rep.fgcs.shape == (3, 36 + 4 + 1)

    def test_mass_conservation_when_divisible(self):
        x = rng_for(5).random((1, 2, 8, 8))
        rep = hierarchical_rep(Tensor(x), (4, 2))
        base_sum = x.sum(axis=(2, 3))
        for size, offset in [(4, 64), (2, 64 + 16)]:
            block = rep.fgcs.data[:, :, offset:offset + size * size]
            area = (8 // size) ** 2
            npt.assert_allclose(block.sum(axis=2) * area, base_sum, atol=1e-9)

    def test_pooled_gradient_spreads_uniformly(self):
        x = Tensor(rng_for(6).random((1, 1, 4, 4)), requires_grad=True)
        rep = hierarchical_rep(x, (1,))
        backward(T.reduce_sum(T.narrow(T.transpose(rep.fgcs, (2, 0, 1)), 16, 17)))
        npt.assert_allclose(x.grad, np.full((1, 1, 4, 4), 1.0 / 16.0))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = rng_for(20 + seed)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        probe = rng.standard_normal((1, 2, 36 + 4 + 1))

        def f(xi):
            return T.reduce_sum(T.mul(hierarchical_rep(xi, (2, 1)).fgcs, Tensor(probe)))
        assert grad_check(f, [x], eps=1e-6) < 1e-4

    def test_column_count_always_matches_fgc_count(self):
        for scales in [(), (3, 1), (4, 3, 2, 1)]:
            x = Tensor(rng_for(7).random((1, 2, 8, 8)))
            rep = hierarchical_rep(x, scales)
            assert rep.fgcs.shape[2] == fgc_count(8, scales)


class TestMultiInstance:
    def test_k1_equals_single(self):
        x = rng_for(8).random((1, 3, 4, 4))
        a = multi_instance_rep(Tensor(x), (2,))
        b = hierarchical_rep(Tensor(x[0]), (2,))
        npt.assert_array_equal(a.data, b.fgcs.data)

    def test_k5_reference_width(self):
        x = Tensor(rng_for(9).random((5, 64, 21, 21)))
        out = multi_instance_rep(x, (10, 7, 5, 3, 2, 1))
        assert out.shape == (64, 5 * 629)

    def test_duplicated_instance_blocks_bit_equal(self):
        x = rng_for(10).random((1, 2, 4, 4))
        pair = np.concatenate([x, x])
        out = multi_instance_rep(Tensor(pair), (2,))
        t = 16 + 4
        npt.assert_array_equal(out.data[:, :t], out.data[:, t:])

    def test_instance_order_preserved(self):
        rng = rng_for(11)
        xs = [Tensor(rng.random((2, 4, 4))) for _ in range(3)]
        out = multi_instance_rep(xs, ())
        for k, x in enumerate(xs):
            npt.assert_array_equal(out.data[:, k * 16:(k + 1) * 16],
                                   x.data.reshape(2, 16))

    def test_heterogeneous_shapes_rejected(self):
        with pytest.raises(DimensionError):
            multi_instance_rep([Tensor(np.zeros((2, 4, 4))),
                                Tensor(np.zeros((2, 6, 6)))], ())
