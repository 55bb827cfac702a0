import numpy as np
import pytest
from hypothesis import given, strategies as st

from odlc import autodiff as ad
from odlc import gradcheck
from oracles import conv2d_direct


def t(data, **kw):
    return ad.Tensor(np.asarray(data, dtype=np.float32), **kw)


class TestConv2d:
    def test_1x1_identity_kernel(self):
        x = t(np.random.default_rng(0).random((4, 5, 6)))
        eye = t(np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1))
        out = ad.conv2d(x, eye, t(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_field_all_ones_kernel(self):
        c = 0.37
        x = t(np.full((1, 5, 5), c))
        k = t(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, t(np.zeros(1)))
        assert out.data[0, 2, 2] == pytest.approx(9 * c, rel=1e-6)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.random((2, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = ad.conv2d(t(x), t(k), t(b)).data
        want = conv2d_direct(x, k, b, stride=1, padding="same")
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_oracle_grid(self, stride, padding):
        rng = np.random.default_rng(stride * 17 + len(padding))
        x = rng.random((3, 7, 6))
        k = rng.standard_normal((2, 3, 3, 3)) * 0.5
        b = rng.standard_normal(2)
        got = ad.conv2d(t(x), t(k), t(b), stride=stride, padding=padding).data
        want = conv2d_direct(x, k, b, stride=stride, padding=padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_same_padding_output_size(self):
        x = t(np.zeros((1, 7, 5)))
        k = t(np.zeros((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=2)
        assert out.shape == (1, 4, 3)  # ceil(7/2), ceil(5/2)

    def test_channel_mismatch_names_dimension(self):
        x = t(np.zeros((4, 5, 5)))
        k = t(np.zeros((2, 3, 3, 3)))
        with pytest.raises(ad.ShapeError, match="3 input channels.*4"):
            ad.conv2d(x, k)

    def test_even_kernel_rejected(self):
        with pytest.raises(ad.ShapeError, match="odd"):
            ad.conv2d(t(np.zeros((1, 5, 5))), t(np.zeros((1, 1, 2, 2))))


class TestConvGru:
    def _zero_params(self, c_in=2, c_h=3, stride=1):
        rng = np.random.default_rng(0)
        p = ad.GruParams.init(rng, "g", c_in, c_h, stride=stride)
        for q in p.parameters():
            q.value = np.zeros_like(q.value)
        return p

    def test_all_zero_params_zero_hidden(self):
        p = self._zero_params()
        x = t(np.random.default_rng(1).random((2, 6, 6)))
        h = t(np.zeros((3, 6, 6)))
        out = ad.conv_gru_cell(x, h, p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 6, 6)))

    def test_saturated_update_gate_keeps_hidden(self):
        rng = np.random.default_rng(2)
        p = ad.GruParams.init(rng, "g", 2, 3, stride=1)
        p.bu.value = np.full(3, -1000.0, dtype=np.float32)  # force u ~ 0
        x = t(rng.random((2, 6, 6)))
        h = t(rng.random((3, 6, 6)))
        out = ad.conv_gru_cell(x, h, p)
        np.testing.assert_allclose(out.data, h.data, atol=1e-3)

    def test_spatial_misalignment_rejected(self):
        p = self._zero_params(stride=2)
        x = t(np.zeros((2, 8, 8)))
        h = t(np.zeros((3, 8, 8)))  # stride 2 expects 4x4 hidden
        with pytest.raises(ad.ShapeError, match="misaligned"):
            ad.conv_gru_cell(x, h, p)

    def test_gradients_match_finite_differences(self):
        case = gradcheck.GruCase(np.random.default_rng(5), np.float32,
                                 c_in=2, c_h=3, hw=(6, 6), stride=2)
        err = gradcheck.check_gradients(case.build, case.wrt, dtype=np.float32)
        assert err < 1e-3


class TestDepthToSpace:
    def test_r1_identity(self):
        x = t(np.random.default_rng(0).random((3, 4, 5)))
        out = ad.depth_to_space(x, 1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_4x1x1_becomes_1x2x2(self):
        x = t(np.arange(4, dtype=np.float32).reshape(4, 1, 1))
        out = ad.depth_to_space(x, 2)
        assert out.shape == (1, 2, 2)
        assert sorted(out.data.reshape(-1).tolist()) == [0.0, 1.0, 2.0, 3.0]

    def test_round_trip_bit_identical(self):
        x = t(np.random.default_rng(3).random((8, 3, 5)).astype(np.float32))
        back = ad.space_to_depth(ad.depth_to_space(x, 2), 2)
        np.testing.assert_array_equal(back.data, x.data)

    @given(co=st.integers(1, 3), r=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4),
           seed=st.integers(0, 100))
    def test_inverse_pair_property(self, co, r, h, w, seed):
        data = np.random.default_rng(seed).random((co * r * r, h, w)).astype(np.float32)
        x = t(data)
        rt = ad.space_to_depth(ad.depth_to_space(x, r), r)
        np.testing.assert_array_equal(rt.data, data)

    def test_non_divisible_channels_rejected(self):
        with pytest.raises(ad.ShapeError, match="not divisible"):
            ad.depth_to_space(t(np.zeros((6, 2, 2))), 2)


class TestElementwise:
    def test_fixed_points(self):
        assert ad.tanh(t([0.0])).item() == 0.0
        assert ad.sigmoid(t([0.0])).item() == 0.5

    def test_mean_of_constant(self):
        assert ad.mean(t(np.full((3, 4), 2.5))).item() == pytest.approx(2.5, abs=1e-7)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError, match="shapes differ"):
            ad.add(t(np.zeros((2, 3))), t(np.zeros((3, 2))))

    def test_dispatcher_covers_spec_kinds(self):
        for kind in ("tanh", "sigmoid", "add", "sub", "mul", "scale", "square", "mean"):
            assert kind in ad.ELEMENTWISE
        x = t([[1.0, 2.0]])
        np.testing.assert_array_equal(ad.elementwise("scale", x, 2.0).data, [[2.0, 4.0]])
        with pytest.raises(ad.ShapeError, match="unknown kind"):
            ad.elementwise("nope", x)

    def test_composite_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        u = t(rng.uniform(-1, 1, (3, 4)))
        v = t(rng.uniform(-1, 1, (3, 4)))

        def build():
            return ad.mean(ad.square(ad.add(ad.tanh(ad.mul(u, v)), ad.scale(u, 0.3))))

        assert gradcheck.check_gradients(build, [u, v], dtype=np.float32) < 1e-3


class TestBackward:
    def test_sum_gives_all_ones(self):
        p = ad.Parameter("p", np.random.default_rng(0).random((3, 4)))
        with ad.Tape() as tape:
            loss = ad.scale(ad.mean(p.tensor), p.tensor.size)  # sum
        ad.backward(loss, tape)
        np.testing.assert_array_equal(p.grad, np.ones((3, 4), dtype=np.float32))

    def test_mse_closed_form(self):
        rng = np.random.default_rng(1)
        p = ad.Parameter("p", rng.random((4, 5)))
        target = ad.Tensor(rng.random((4, 5)).astype(np.float32))
        with ad.Tape() as tape:
            loss = ad.mean(ad.square(ad.sub(p.tensor, target)))
        ad.backward(loss, tape)
        want = 2.0 * (p.value - target.data) / p.value.size
        np.testing.assert_allclose(p.grad, want, rtol=1e-6, atol=1e-8)

    def test_non_scalar_loss_rejected(self):
        p = ad.Parameter("p", np.ones((2, 2)))
        with ad.Tape() as tape:
            y = ad.square(p.tensor)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(y, tape)

    def test_unreached_parameters_keep_zero_grad(self):
        used = ad.Parameter("used", np.ones(3))
        idle = ad.Parameter("idle", np.ones(3))
        with ad.Tape() as tape:
            loss = ad.mean(used.tensor)
        ad.backward(loss, tape)
        np.testing.assert_array_equal(idle.grad, np.zeros(3, dtype=np.float32))

    def test_fanout_accumulates_once(self):
        # z = x*x + x*x: dz/dx = 4x; a double-visited record would give 8x
        x = t([3.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            z = ad.add(y, y)
        assert len(tape) == 2
        ad.backward(z, tape)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_forward_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.random((3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

        def run():
            return ad.conv2d(ad.Tensor(x.copy()), ad.Tensor(k.copy()), stride=2).data

        np.testing.assert_array_equal(run(), run())


class TestGradientSuite:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_every_op_three_instances(self, dtype):
        rows = gradcheck.run_op_suite(dtype, seed=20, instances=3)
        bad = [(n, e) for n, e, _, ok in rows if not ok]
        assert not bad, f"gradient failures: {bad}"
