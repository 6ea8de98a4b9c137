"""Convolution block forward/backward and initialization."""

import numpy as np
import pytest

from deformconv1d.block import BatchNorm, DeformableConvBlock, glu, swish
from deformconv1d.conv import offset_forward
from deformconv1d.errors import ConfigError, ShapeError
from deformconv1d.gradcheck import central_difference, max_relative_error


def make_block(f=4, k=3, gd=1, seed=0, scheme="xavier", dtype=np.float64,
               **kw):
    block = DeformableConvBlock(f, kernel_size=k, deformable_groups=gd,
                                dtype=dtype, **kw)
    block.init_params(scheme, seed)
    return block


def nudge_block_offsets(block, x, margin=1.5e-3):
    for _ in range(2000):
        _, cache = block.forward(x, train=True)
        p = cache["offsets"].p_prime
        if float(np.abs(p - np.round(p)).min()) > margin:
            return
        block.deform.offset_bias += 0.00371
    raise RuntimeError("positions stuck near integers")


class TestActivations:
    def test_glu_zero_gate_halves(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((2, 5, 3))
        z = np.concatenate([a, np.zeros_like(a)], axis=-1)
        out, _ = glu(z)
        np.testing.assert_allclose(out, a / 2, rtol=1e-15)

    def test_glu_needs_even_channels(self):
        with pytest.raises(ShapeError):
            glu(np.zeros((1, 2, 3)))

    def test_swish_zero(self):
        out, _ = swish(np.zeros((1, 1, 1)))
        assert out.item() == 0.0

    def test_swish_derivative_at_zero_is_half(self):
        z = np.zeros((1, 1, 1))
        eps = 1e-6
        num = (swish(z + eps)[0] - swish(z - eps)[0]) / (2 * eps)
        assert num.item() == pytest.approx(0.5, abs=1e-9)


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        bn = BatchNorm(3, dtype=np.float64)
        rng = np.random.default_rng(1)
        z = rng.standard_normal((4, 10, 3)) * 3.0 + 1.5
        out, _ = bn.forward(z, train=True)
        mean = out.mean(axis=(0, 1))
        var = out.var(axis=(0, 1))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-4

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(2, dtype=np.float64)
        rng = np.random.default_rng(2)
        z = rng.standard_normal((2, 8, 2)) + 5.0
        for _ in range(200):
            bn.forward(z, train=True)
        out, _ = bn.forward(z, train=False)
        got, _ = bn.forward(z, train=True)
        np.testing.assert_allclose(out, got, atol=1e-3)

    def test_backward_matches_finite_differences(self):
        bn = BatchNorm(3, dtype=np.float64)
        rng = np.random.default_rng(3)
        bn.scale[...] = rng.standard_normal(3)
        bn.shift[...] = rng.standard_normal(3)
        z = rng.standard_normal((2, 6, 3))
        r = rng.standard_normal((2, 6, 3))

        def loss():
            return float(np.sum(bn.forward(z, train=True)[0] * r))

        _, cache = bn.forward(z, train=True)
        d_z, d_scale, d_shift = bn.backward(r, cache)
        num = central_difference(loss, {"z": z, "s": bn.scale, "b": bn.shift},
                                 eps=1e-5)
        assert max_relative_error(d_z, num["z"]) < 1e-7
        assert max_relative_error(d_scale, num["s"]) < 1e-7
        assert max_relative_error(d_shift, num["b"]) < 1e-7


class TestBlockForward:
    def test_output_shape_matches_input(self):
        block = make_block(f=4, k=15)
        x = np.random.default_rng(4).standard_normal((2, 20, 4))
        y, _ = block.forward(x)
        assert y.shape == x.shape

    def test_zero_weights_with_residual_is_identity(self):
        block = DeformableConvBlock(3, kernel_size=3, dtype=np.float64)
        x = np.random.default_rng(5).standard_normal((1, 7, 3))
        y, _ = block.forward(x)
        assert np.array_equal(y, x)

    def test_frozen_offsets_equal_zero_offset_deformable_bitwise(self):
        for seed in range(3):
            frozen = make_block(f=4, k=5, seed=seed, scheme="zero_offset",
                                freeze_offsets=True)
            live = make_block(f=4, k=5, seed=seed, scheme="zero_offset",
                              freeze_offsets=False)
            x = np.random.default_rng(60 + seed).standard_normal((2, 11, 4))
            y_frozen, _ = frozen.forward(x, train=True)
            y_live, _ = live.forward(x, train=True)
            assert np.array_equal(y_frozen, y_live)

    def test_dropout_hook_rejects_nonzero(self):
        with pytest.raises(ConfigError):
            DeformableConvBlock(4, dropout=0.1)


class TestBlockBackward:
    def test_requires_train_cache(self):
        block = make_block()
        with pytest.raises(RuntimeError):
            block.backward(None, np.zeros((1, 4, 4)))

    def test_residual_path_alone_passes_gradient(self):
        block = DeformableConvBlock(3, kernel_size=3, dtype=np.float64)
        x = np.random.default_rng(7).standard_normal((1, 6, 3))
        _, cache = block.forward(x, train=True)
        g = np.random.default_rng(8).standard_normal((1, 6, 3))
        d_x, _ = block.backward(cache, g)
        assert np.array_equal(d_x, g)

    @pytest.mark.parametrize("seed,scheme,gd", [
        (0, "xavier", 1), (1, "xavier", 2), (2, "zero_offset", 1),
    ])
    def test_gradients_match_finite_differences(self, seed, scheme, gd):
        b, t, f, k = 2, 8, 4, 3
        block = make_block(f=f, k=k, gd=gd, seed=seed, scheme=scheme)
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((b, t, f))
        # keep every sampling position off the integer kinks of the
        # interpolation; the analytic derivative there is one-sided
        nudge_block_offsets(block, x)
        r = rng.standard_normal((b, t, f))

        def loss():
            y, _ = block.forward(x, train=True)
            return float(np.sum(y * r))

        _, cache = block.forward(x, train=True)
        d_x, grads = block.backward(cache, r)
        probes = {"x": x}
        probes.update(block.parameters())
        num = central_difference(loss, probes, eps=1e-5)
        assert max_relative_error(d_x, num["x"]) < 1e-5
        for name in block.parameters():
            assert max_relative_error(grads[name], num[name]) < 1e-5, name

    def test_frozen_offsets_backward_matches_finite_differences(self):
        b, t, f, k = 2, 6, 4, 3
        block = make_block(f=f, k=k, seed=5, scheme="zero_offset",
                           freeze_offsets=True)
        rng = np.random.default_rng(500)
        x = rng.standard_normal((b, t, f))
        r = rng.standard_normal((b, t, f))

        def loss():
            y, _ = block.forward(x, train=True)
            return float(np.sum(y * r))

        _, cache = block.forward(x, train=True)
        d_x, grads = block.backward(cache, r)
        num = central_difference(loss, {"x": x, "w": block.pw1_weights},
                                 eps=1e-5)
        assert max_relative_error(d_x, num["x"]) < 1e-5
        assert max_relative_error(grads["pw1.weights"], num["w"]) < 1e-5
        assert not grads["deform.offset_weights"].any()


class TestInit:
    def test_zero_offset_first_forward_has_zero_offsets(self):
        block = make_block(f=4, k=3, scheme="zero_offset")
        x = np.random.default_rng(9).standard_normal((1, 9, 4))
        field = offset_forward(block.deform, x)
        assert not field.delta_p.any()

    def test_xavier_bound(self):
        # [N_out, N_in, K] kernel: bound = sqrt(6 / (N_in*K + N_out*K))
        block = make_block(f=8, k=5, seed=3, scheme="xavier")
        w = block.deform.output_weights   # [8, 1, 5]
        bound = np.sqrt(6.0 / (1 * 5 + 8 * 5))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound  # actually fills the range
        w1 = block.pw1_weights            # [16, 8, 1]
        bound1 = np.sqrt(6.0 / (8 + 16))
        assert np.abs(w1).max() <= bound1

    def test_same_seed_bitwise_identical(self):
        b1 = make_block(seed=42)
        b2 = make_block(seed=42)
        for name, p in b1.parameters().items():
            assert np.array_equal(p, b2.parameters()[name]), name

    def test_unknown_scheme_rejected(self):
        block = DeformableConvBlock(4)
        with pytest.raises(ConfigError):
            block.init_params("kaiming", 0)
