import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odlc import autodiff as ad
from odlc import codec
from odlc.bitstream import Bitstream, BitstreamError, BitstreamHeader, pack_bits, unpack_bits

MICRO = codec.CodecLayout(enc_widths=(4, 6, 8, 8), dec_widths=(8, 8, 8, 4),
                          bottleneck=4, t_max=8)
MICRO_CB32 = codec.CodecLayout(enc_widths=(4, 6, 8, 8), dec_widths=(8, 8, 8, 4),
                               bottleneck=32, t_max=8)


@pytest.fixture(scope="module")
def params():
    return codec.CodecParams(MICRO, seed=3)


def image(seed=0, h=32, w=32):
    return np.random.default_rng(seed).random((3, h, w), dtype=np.float32)


class TestBinarize:
    def test_deterministic_signs(self):
        z = ad.Tensor(np.array([0.7, -0.3, 0.0], dtype=np.float32))
        out = codec.binarize(z, "deterministic")
        np.testing.assert_array_equal(out.data, [1.0, -1.0, 1.0])  # sign(0) = +1

    def test_out_of_range_rejected(self):
        with pytest.raises(codec.CodecError, match="outside"):
            codec.binarize(ad.Tensor(np.array([1.2], dtype=np.float32)), "deterministic")

    def test_stochastic_needs_rng(self):
        with pytest.raises(codec.CodecError, match="generator"):
            codec.binarize(ad.Tensor(np.zeros(4, dtype=np.float32)), "stochastic")

    @pytest.mark.parametrize("z,seed", [(0.0, 11), (0.5, 12), (-0.5, 13)])
    def test_stochastic_unbiased(self, z, seed):
        n = 10_000
        t = ad.Tensor(np.full(n, z, dtype=np.float32))
        out = codec.binarize(t, "stochastic", np.random.default_rng(seed))
        tol = 3.0 * np.sqrt(1.0 - z * z) / np.sqrt(n)
        assert abs(out.data.mean() - z) <= max(tol, 0.03)

    def test_straight_through_identity(self):
        x = ad.Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 4)).astype(np.float32),
                      requires_grad=True)
        with ad.Tape() as tape:
            z = ad.tanh(x)
            b = codec.binarize(z, "deterministic")
            loss = ad.mean(ad.square(b))
        ad.backward(loss, tape)
        np.testing.assert_array_equal(z.grad, b.grad)

    def test_straight_through_matches_identity_for_linear_loss(self):
        # mean() is linear, so the full input gradient must match the
        # quantizer-free graph exactly
        data = np.random.default_rng(1).uniform(-0.9, 0.9, (3, 3)).astype(np.float32)
        x1 = ad.Tensor(data.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mean(codec.binarize(ad.tanh(x1), "deterministic"))
        ad.backward(loss, tape)
        x2 = ad.Tensor(data.copy(), requires_grad=True)
        with ad.Tape() as tape2:
            loss2 = ad.mean(ad.tanh(x2))
        ad.backward(loss2, tape2)
        np.testing.assert_array_equal(x1.grad, x2.grad)


class TestCodecStep:
    def test_zero_decoder_means_zero_delta(self):
        p = codec.CodecParams(MICRO, seed=1)
        for param in p.parameters():
            if param.name.startswith("dec."):
                param.value = np.zeros_like(param.value)
        x = ad.Tensor(image(2))
        state = codec.CodecState.zeros(p, 32, 32)
        delta, bits, _ = codec.codec_step(x, state, p)
        np.testing.assert_array_equal(delta.data, np.zeros((3, 32, 32), dtype=np.float32))

    def test_bit_count_64px(self):
        p = codec.CodecParams(MICRO_CB32, seed=1)
        state = codec.CodecState.zeros(p, 64, 64)
        _, bits, _ = codec.codec_step(ad.Tensor(image(0, 64, 64)), state, p)
        assert bits.data.size == 32 * 4 * 4 == 512

    def test_deterministic_repeat(self, params):
        x = ad.Tensor(image(5))

        def run():
            state = codec.CodecState.zeros(params, 32, 32)
            d, b, _ = codec.codec_step(x, state, params, mode="deterministic")
            return d.data, b.data

        d1, b1 = run()
        d2, b2 = run()
        np.testing.assert_array_equal(d1, d2)
        np.testing.assert_array_equal(b1, b2)

    def test_small_resolution_rejected(self, params):
        state = codec.CodecState.zeros(params, 16, 16)
        with pytest.raises(codec.CodecError, match="below 16x16"):
            codec.codec_step(ad.Tensor(np.zeros((3, 8, 8), dtype=np.float32)), state, params)


class TestReconstruct:
    def test_t1_single_delta(self, params):
        tr = codec.reconstruct_progressive(image(1), 1, params)
        assert tr.iterations == 1
        state = codec.CodecState.zeros(params, 32, 32)
        delta, _, _ = codec.codec_step(tr.input_normalized, state, params)
        np.testing.assert_array_equal(tr.reconstructions[0].data, delta.data)

    def test_trace_invariants_exact(self, params):
        tr = codec.reconstruct_progressive(image(2), 4, params)
        x = tr.input_normalized.data
        np.testing.assert_array_equal(tr.residuals[0].data, x)  # r_1 = x
        for t in range(1, 4):
            np.testing.assert_array_equal(tr.residuals[t].data,
                                          x - tr.reconstructions[t - 1].data)
        for r in tr.residuals:
            assert np.isfinite(r.data).all()

    def test_padding_and_crop(self, params):
        tr = codec.reconstruct_progressive(image(3, 40, 50), 2, params)
        assert tr.input_normalized.shape == (3, 48, 64)
        out = tr.decoded()
        assert out.shape == (3, 40, 50)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_iteration_bounds(self, params):
        with pytest.raises(codec.CodecError, match="outside"):
            codec.reconstruct_progressive(image(0), 0, params)
        with pytest.raises(codec.CodecError, match="outside"):
            codec.reconstruct_progressive(image(0), 9, params)


class TestCompressDecompress:
    def test_bpp_law_224(self):
        p = codec.CodecParams(MICRO_CB32, seed=0)
        x = image(0, 224, 224)
        bs8 = codec.compress(x, 8, p)
        assert bs8.payload_bits == 8 * 32 * 14 * 14 == 50176
        assert bs8.bpp == 1.0
        bs1 = codec.compress(x, 1, p)
        assert bs1.bpp == 0.125

    def test_bpp_law_64(self, params):
        p = codec.CodecParams(MICRO_CB32, seed=0)
        bs = codec.compress(image(0, 64, 64), 2, p)
        assert bs.payload_bits == 2 * 32 * 4 * 4 == 1024
        assert bs.bpp == 0.25

    @settings(max_examples=10)
    @given(h=st.integers(17, 70), w=st.integers(17, 70), t=st.integers(1, 4))
    def test_bit_count_law_property(self, h, w, t):
        p = codec.CodecParams(MICRO, seed=2)
        bs = codec.compress(image(1, h, w), t, p)
        assert bs.payload_bits == t * 4 * (-(-h // 16)) * (-(-w // 16))

    def test_t_beyond_trained_rejected(self, params):
        with pytest.raises(codec.CodecError, match="trained range"):
            codec.compress(image(0), 9, params)

    def test_round_trip_bit_identical(self, params):
        x = image(7)
        b1 = codec.compress(x, 3, params)
        b2 = codec.compress(x, 3, params)
        assert b1.to_bytes() == b2.to_bytes()
        y1 = codec.decompress(b1, params)
        y2 = codec.decompress(Bitstream.from_bytes(b1.to_bytes()), params)
        np.testing.assert_array_equal(y1, y2)

    def test_decompress_equals_trace(self, params):
        x = image(8, 48, 32)
        bs = codec.compress(x, 3, params)
        tr = codec.reconstruct_progressive(x, 3, params, mode="deterministic")
        np.testing.assert_array_equal(codec.decompress(bs, params), tr.decoded(3))

    def test_truncated_stream_matches_prefix(self, params):
        x = image(9)
        full, t_cut = 4, 2
        bs = codec.compress(x, full, params)
        hdr = bs.header
        cut = BitstreamHeader(width=hdr.width, height=hdr.height, iterations=t_cut,
                              c_b=hdr.c_b, flags=hdr.flags)
        bits = unpack_bits(bs.payload, hdr.payload_bits)
        cut_payload = pack_bits([bits[: cut.payload_bits]])
        truncated = Bitstream(header=cut, payload=cut_payload)
        tr = codec.reconstruct_progressive(x, full, params, mode="deterministic")
        np.testing.assert_array_equal(codec.decompress(truncated, params), tr.decoded(t_cut))

    def test_random_bits_valid_header_decodes(self, params):
        rng = np.random.default_rng(13)
        codes = [np.where(rng.random((4, 2, 2)) < 0.5, -1.0, 1.0).astype(np.float32)
                 for _ in range(3)]
        bs = Bitstream.from_codes(codes, width=32, height=32)
        out = codec.decompress(bs, params)
        assert out.shape == (3, 32, 32)
        assert np.isfinite(out).all()

    def test_cb_mismatch_rejected(self, params):
        p32 = codec.CodecParams(MICRO_CB32, seed=0)
        bs = codec.compress(image(0), 1, p32)
        with pytest.raises(BitstreamError, match="dimension mismatch"):
            codec.decompress(bs, params)

    def test_save_load_round_trip(self, params, tmp_path):
        path = tmp_path / "codec.ckpt"
        params.save(path)
        again = codec.CodecParams.load(path)
        x = image(4)
        np.testing.assert_array_equal(codec.compress(x, 2, params).to_bytes(),
                                      codec.compress(x, 2, again).to_bytes())


class TestFullCodecGradient:
    def test_finite_differences_t2_16px(self):
        lay = codec.CodecLayout(enc_widths=(2, 2, 4, 4), dec_widths=(4, 4, 4, 4),
                                bottleneck=2, t_max=4)
        p = codec.CodecParams(lay, seed=6)
        x01 = image(21, 16, 16)
        xn = ad.Tensor(((x01 - 0.5) / 0.5).astype(np.float32))
        target = ad.Tensor(xn.data.copy())

        def build():
            tr = codec.progressive_from_normalized(xn, 2, p, mode="bypass")
            loss = None
            for rec in tr.reconstructions:
                term = ad.mean(ad.square(ad.sub(rec, target)))
                loss = term if loss is None else ad.add(loss, term)
            return ad.scale(loss, 0.5)

        from odlc import gradcheck
        wrt = [q.tensor for q in p.parameters()]
        err = gradcheck.check_gradients(build, wrt, dtype=np.float32)
        assert err < 1e-3
