import numpy as np
import pytest

from helpers import binomial_ci
from psb import fixedpoint as fx
from psb.capacitor import (Mode, SamplingConfig, Wide, binomial_form_mac, conv2d_forward,
                           conv2d_kernel, dense_forward, dense_kernel, draw_counts, guard_bits,
                           im2col, shift_form_mac, stochastic_mac)
from psb.encoding import EncodingConfig, encode_array
from psb.errors import ConfigError, ShapeMismatch
from psb.oracle import conv2d_float, dense_float
from psb.sampling import RngStream, bernoulli_bits
from psb.encoding import relative_std_bound

EXACT = EncodingConfig(prob_bits=None)
PB10 = EncodingConfig(prob_bits=10)


def enc(w, cfg=EXACT):
    return encode_array(np.asarray(w, dtype=np.float64), cfg)


def fxraw(x):
    return fx.quantize_array(np.asarray(x, dtype=np.float64)).astype(np.int64)


class TestConfig:
    @pytest.mark.parametrize("n", [0, 3, 5000])
    def test_bad_n(self, n):
        with pytest.raises(ConfigError):
            SamplingConfig(n)

    def test_deterministic_needs_full_grid(self):
        with pytest.raises(ConfigError):
            SamplingConfig(8, Mode.DETERMINISTIC, prob_bits=4)
        assert SamplingConfig(16, "deterministic", prob_bits=4).m == 4

    def test_unknown_sampler(self):
        with pytest.raises(ConfigError):
            SamplingConfig(4, sampler="urn")


class TestStochasticMac:
    @pytest.mark.parametrize("sampler", ["direct", "gumbel"])
    def test_repeats_match_sequential_draws(self, sampler):
        w = enc([3.0, 0.0, -1.3, 5.5], PB10)
        cfg = SamplingConfig(8, sampler=sampler)
        bulk, _ = draw_counts(w, cfg, RngStream(9), repeats=50)
        s = RngStream(9)
        seq = np.concatenate([draw_counts(w, cfg, s)[0] for _ in range(50)])
        assert np.array_equal(bulk, seq)

    def test_power_of_two_is_exact(self):
        for n in (1, 4, 64):
            for seed in range(5):
                out = stochastic_mac(fxraw([1.0]), enc([2.0]), SamplingConfig(n), RngStream(seed))
                assert out.value == 2.0

    def test_three_single_sample(self):
        draws = 100_000
        # one stream, many calls: each call consumes the next draws
        s = RngStream(42)
        w = enc([3.0], PB10)
        vals = np.array([stochastic_mac(fxraw([1.0]), w, SamplingConfig(1), s).value
                         for _ in range(2000)])
        assert set(np.unique(vals)) <= {2.0, 4.0}
        # the bulk check uses the same counts via draw_counts
        counts, _ = draw_counts(w, SamplingConfig(1), RngStream(43), repeats=draws)
        freq = counts.mean()
        assert abs(freq - 0.5) <= binomial_ci(0.5, draws)

    def test_mean_oracle(self):
        out = stochastic_mac(fxraw([1.0, 1.0]), enc([1.5, -0.5], PB10), SamplingConfig(16, Mode.MEAN_ORACLE))
        assert out.value == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            stochastic_mac(fxraw([1.0, 2.0]), enc([1.0]), SamplingConfig(1), RngStream(0))

    def test_wide_to_fx_floors(self):
        assert Wide(-1, 11).to_fx().raw == -1
        assert Wide(3, 11).to_fx().raw == 1


def random_instance(rng, d, n, prob_bits=10):
    w = rng.uniform(0.05, 6, d) * rng.choice([-1, 1], d)
    w[rng.random(d) < 0.1] = 0.0
    x = rng.integers(-32768, 32768, d)
    weights = enc(w, EncodingConfig(prob_bits=prob_bits))
    bits = bernoulli_bits(RngStream(int(rng.integers(1 << 30))), weights.prob_num, prob_bits, n)
    return x, weights, bits


def test_shift_form_equals_binomial_form():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n = int(2 ** rng.integers(1, 7))
        x, w, bits = random_instance(rng, int(rng.integers(1, 6)), n)
        a = shift_form_mac(x, w, bits)
        b = binomial_form_mac(x, w, bits.sum(axis=1), n)
        assert a == b


class TestStatistics:
    def test_unbiased_before_relu(self):
        rng = np.random.default_rng(3)
        x = fxraw(rng.uniform(-1, 1, 4))
        w = enc(rng.uniform(-3, 3, 4), PB10)
        truth = stochastic_mac(x, w, SamplingConfig(4, Mode.MEAN_ORACLE)).value
        cfg = SamplingConfig(4)
        counts, _ = draw_counts(w, cfg, RngStream(5), repeats=100_000)
        vals = np.array([binomial_form_mac(x, w, c, 4).value for c in counts[:20_000]])
        sigma = vals.std(ddof=1)
        assert abs(vals.mean() - truth) <= 4 * sigma / np.sqrt(vals.size)

    def test_variance_halves_with_fourfold_n(self):
        rng = np.random.default_rng(4)
        x = fxraw(rng.uniform(0.2, 1, 4))
        w = enc(rng.uniform(-3, 3, 4), PB10)

        def std(n):
            counts, _ = draw_counts(w, SamplingConfig(n), RngStream(n), repeats=10_000)
            return np.std([binomial_form_mac(x, w, c, n).value for c in counts])

        assert 0.4 <= std(64) / std(16) <= 0.6

    def test_modes_agree_on_one_position(self):
        K = enc(np.full((1, 1, 1, 1), 3.0), PB10)
        x = np.full((1, 1, 1), 1024, dtype=np.int64)
        outs = {}
        for mode in (Mode.PER_CALL_FILTER, Mode.PER_POSITION):
            cfg = SamplingConfig(2, mode)
            outs[mode] = np.array([conv2d_kernel(x, K, None, 1, "same", cfg, RngStream(7, i))[0].item()
                                   for i in range(1500)])
        a, b = outs.values()
        for v in (2048, 2560, 3072, 3584, 4096):
            assert abs(np.mean(a == v) - np.mean(b == v)) < 0.05
        # same stream, one position: the two modes draw identically
        assert np.array_equal(a, b)

    def test_deterministic_equals_mean_oracle(self):
        rng = np.random.default_rng(6)
        W = enc(rng.uniform(-2, 2, (5, 12)), EncodingConfig(prob_bits=4))
        x = fxraw(rng.uniform(-1, 1, 12))
        det = SamplingConfig(16, Mode.DETERMINISTIC, prob_bits=4)
        a, _ = dense_kernel(x, W, None, det, None)
        b, _ = dense_kernel(x, W, None, det, None)
        assert np.array_equal(a, b)
        truth = (W.decode_mean() @ x) / fx.SCALE
        assert np.all(np.abs(a / fx.SCALE - truth) <= 2 ** -10 * 12)
        mo, _ = dense_kernel(x, W, None, SamplingConfig(16, Mode.MEAN_ORACLE), None)
        assert np.array_equal(a, mo)


class TestDense:
    def test_zero_weights_give_bias(self):
        W = enc(np.zeros((3, 4)))
        bias = fxraw([0.5, -1.0, 2.0])
        out, ops = dense_kernel(fxraw(np.ones(4)), W, bias, SamplingConfig(8), RngStream(0))
        assert np.array_equal(out, bias) and ops == 0

    def test_identity(self):
        x = fx.FxTensor.from_float(np.array([0.25, -3.5, 7.0]))
        out = dense_forward(x, enc(np.eye(3)), None, SamplingConfig(16), RngStream(0))
        assert np.array_equal(out.raw, x.raw)

    def test_large_n_matches_float(self):
        rng = np.random.default_rng(8)
        w = rng.uniform(-1, 1, (4, 4))
        b = rng.uniform(-0.5, 0.5, 4)
        xf = rng.uniform(-1, 1, 4)
        x = fx.FxTensor.from_float(xf)
        out = dense_forward(x, enc(w, PB10), fx.quantize_array(b), SamplingConfig(4096), RngStream(1)).to_float()
        y = dense_float(x.to_float(), w, b)
        tol = 2 * (2 ** -10 + 3 * relative_std_bound(4096) * np.abs(w) @ np.abs(x.to_float()))
        assert np.all(np.abs(out - y) <= tol)

    def test_ops(self):
        W = enc(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]))
        _, ops = dense_kernel(fxraw([1, 1]), W, None, SamplingConfig(8), RngStream(0))
        assert ops == 4 * 8

    def test_shape_errors(self):
        W = enc(np.ones((2, 3)))
        with pytest.raises(ShapeMismatch):
            dense_kernel(fxraw([1, 1]), W, None, SamplingConfig(1), RngStream(0))
        with pytest.raises(ShapeMismatch):
            dense_kernel(fxraw([1, 1, 1]), W, np.zeros(3), SamplingConfig(1), RngStream(0))

    def test_saturates(self):
        W = enc(np.full((1, 4), 64.0))
        out, _ = dense_kernel(fxraw([30, 30, 30, 30]), W, None, SamplingConfig(1), RngStream(0))
        assert out[0] == fx.RAW_MAX


class TestConv:
    def test_identity_1x1(self):
        x = fx.FxTensor.from_float(np.random.default_rng(0).uniform(-2, 2, (5, 5, 1)))
        out = conv2d_forward(x, enc(np.ones((1, 1, 1, 1))), None, cfg=SamplingConfig(4), stream=RngStream(0))
        assert np.array_equal(out.raw, x.raw)

    def test_zero_kernel(self):
        x = fx.FxTensor.from_float(np.ones((4, 4, 2)))
        out = conv2d_forward(x, enc(np.zeros((3, 3, 2, 3))), fxraw([1, 2, 3]),
                             cfg=SamplingConfig(4), stream=RngStream(0))
        assert np.all(out.to_float() == np.array([1.0, 2.0, 3.0]))

    @pytest.mark.parametrize("padding,stride", [("same", 1), ("valid", 1), ("same", 2)])
    def test_mean_oracle_matches_float(self, padding, stride):
        rng = np.random.default_rng(9)
        xf = rng.uniform(-1, 1, (8, 8, 2))
        k = rng.uniform(-0.5, 0.5, (3, 3, 2, 3))
        x = fx.FxTensor.from_float(xf)
        K = enc(k, PB10)
        out = conv2d_forward(x, K, None, stride, padding, SamplingConfig(16, Mode.MEAN_ORACLE)).to_float()
        ref = conv2d_float(x.to_float(), K.decode_mean(), np.zeros(3), stride, padding)
        assert out.shape == ref.shape
        assert np.max(np.abs(out - ref)) <= 2 ** -9

    def test_im2col_same_shape(self):
        cols, Ho, Wo = im2col(np.zeros((7, 5, 3)), 3, 3, 2, "same")
        assert (Ho, Wo) == (4, 3) and cols.shape == (12, 27)

    def test_per_position_varies_across_positions(self):
        K = enc(np.full((1, 1, 1, 1), 3.0), PB10)
        x = np.full((8, 8, 1), 1024, dtype=np.int64)
        shared, _ = conv2d_kernel(x, K, None, 1, "same", SamplingConfig(1), RngStream(1))
        per, _ = conv2d_kernel(x, K, None, 1, "same", SamplingConfig(1, Mode.PER_POSITION), RngStream(1))
        assert np.unique(shared).size == 1
        assert np.unique(per).size == 2

    def test_n_map_ops_and_coupling(self):
        rng = np.random.default_rng(2)
        K = enc(rng.uniform(-1, 1, (3, 3, 1, 2)), PB10)
        x = fxraw(rng.uniform(0, 1, (6, 6, 1)))
        nmap = np.where(rng.random((6, 6)) < 0.3, 16, 4)
        mixed, ops = conv2d_kernel(x, K, None, 1, "same", SamplingConfig(16), RngStream(3), nmap)
        assert ops == K.nonzero_count * int(nmap.sum())
        lo, _ = conv2d_kernel(x, K, None, 1, "same", SamplingConfig(4), RngStream(3))
        hi, _ = conv2d_kernel(x, K, None, 1, "same", SamplingConfig(16), RngStream(3))
        sel = nmap == 16
        assert np.array_equal(mixed[sel], hi[sel]) and np.array_equal(mixed[~sel], lo[~sel])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d_kernel(np.zeros((4, 4, 2), dtype=np.int64), enc(np.ones((3, 3, 1, 1))), None, 1,
                          "same", SamplingConfig(1), RngStream(0))


def test_guard_bits():
    assert guard_bits(enc([0.25, 4.0])) == 2
    assert guard_bits(enc([1.0, 4.0])) == 0
    assert guard_bits(enc([0.0])) == 0


def test_zero_weights_draw_nothing():
    dense = enc([3.0, 3.0])
    sparse = enc([3.0, 0.0, 3.0])
    a, _ = draw_counts(dense, SamplingConfig(8), RngStream(0))
    b, _ = draw_counts(sparse, SamplingConfig(8), RngStream(0))
    assert np.array_equal(a[0], b[0][[0, 2]]) and b[0][1] == 0
