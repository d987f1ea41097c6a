import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import tiny_cnn
from psb.encoding import EncodingConfig, encode_array
from psb.errors import InvalidInput, ModelError
from psb.graph import Layer, Model, convert_to_psb
from psb.oracle import (StatSummary, enumerate_expectation, exact_binomial_pmf, float_forward,
                        relative_logit_error)

EXACT = EncodingConfig(prob_bits=None)


def enc(w, cfg=EXACT):
    return encode_array(np.asarray(w, dtype=np.float64), cfg)


class TestEnumerate:
    def test_three_single(self):
        assert enumerate_expectation([1.0], enc([3.0]), 1) == (3, 1)

    def test_power_of_two(self):
        assert enumerate_expectation([1.0], enc([2.0]), 4) == (2, 0)

    def test_two_threes(self):
        mean, var = enumerate_expectation([1.0, 1.0], enc([3.0, 3.0]), 2)
        assert mean == 6 and var == 1

    def test_refuses_large(self):
        with pytest.raises(InvalidInput):
            enumerate_expectation(np.ones(3), enc([3.0, 3.0, 3.0]), 8)

    def test_zero_weight(self):
        assert enumerate_expectation([5.0, 1.0], enc([0.0, 1.5]), 2) == (Fraction(3, 2), Fraction(1, 8))

    @given(st.lists(st.tuples(st.floats(-4, 4), st.floats(0.1, 8)), min_size=1, max_size=3),
           st.sampled_from([1, 2]))
    def test_mean_is_dot_product(self, pairs, n):
        x = [p[0] for p in pairs]
        w = [p[1] for p in pairs]
        mean, var = enumerate_expectation(x, enc(w), n)
        assert mean == sum(Fraction(a) * Fraction(b) for a, b in zip(x, w))
        assert var >= 0

    @pytest.mark.parametrize("w", [3.0, 1.25, -5.5, 0.375])
    def test_antiproportional(self, w):
        _, v1 = enumerate_expectation([1.0], enc([w]), 1)
        for n in (2, 4, 8):
            _, vn = enumerate_expectation([1.0], enc([w]), n)
            assert vn == v1 / n

    def test_matches_closed_form(self):
        t = enc([-1.75, 0.625], EncodingConfig(prob_bits=3))
        x = [0.5, -2.0]
        _, var = enumerate_expectation(x, t, 4)
        expected = Fraction(0)
        for i in range(2):
            p = Fraction(int(t.prob_num[i]), 8)
            expected += Fraction(x[i]) ** 2 * Fraction(4) ** int(t.exponent[i]) * p * (1 - p) / 4
        assert var == expected


class TestBinomialPmf:
    def test_n1(self):
        np.testing.assert_allclose(exact_binomial_pmf(1, 0.3), [0.7, 0.3])

    def test_symmetric(self):
        pmf = exact_binomial_pmf(16, 0.5)
        np.testing.assert_allclose(pmf, pmf[::-1], rtol=1e-12)
        assert np.argmax(pmf) == 8

    def test_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, p = int(rng.integers(1, 4097)), float(rng.random())
            assert abs(exact_binomial_pmf(n, p).sum() - 1) < 1e-12

    def test_against_math_comb(self):
        pmf = exact_binomial_pmf(20, 0.35)
        ref = [math.comb(20, k) * 0.35 ** k * 0.65 ** (20 - k) for k in range(21)]
        np.testing.assert_allclose(pmf, ref, rtol=1e-10)

    def test_too_large(self):
        with pytest.raises(InvalidInput):
            exact_binomial_pmf(5000, 0.5)


class TestFloatForward:
    def test_identity(self):
        m = Model([Layer("id", "relu")], (3,))
        x = np.array([0.5, 1.0, 2.0])
        assert np.array_equal(float_forward(m, x), x)

    def test_batch_and_single_agree(self):
        m = tiny_cnn(0)
        x = np.random.default_rng(1).uniform(0, 1, (3, 8, 8, 1))
        batch = float_forward(m, x)
        assert np.array_equal(float_forward(m, x[1]), batch[1])

    def test_capture(self):
        m = tiny_cnn(0)
        x = np.random.default_rng(1).uniform(0, 1, (2, 8, 8, 1))
        _, cap = float_forward(m, x, capture="r2")
        assert cap.shape == (2, 4, 4, 5) and cap.min() >= 0

    def test_nan(self):
        m = Model([Layer("id", "relu")], (2,))
        with pytest.raises(InvalidInput):
            float_forward(m, np.array([np.nan, 1.0]))

    def test_rejects_psb(self):
        m = convert_to_psb(Model([Layer("d", "dense", weight=np.eye(2))], (2,)))
        with pytest.raises(ModelError):
            float_forward(m, np.zeros(2))


class TestSummaries:
    def test_stat_summary(self):
        s = StatSummary.of([1.0, 2.0, 3.0, 4.0])
        assert s.mean == 2.5 and s.count == 4
        assert s.radius == pytest.approx(4 * math.sqrt(s.variance / 4))

    def test_empty(self):
        with pytest.raises(InvalidInput):
            StatSummary.of([])

    def test_relative_error(self):
        err = relative_logit_error([[3.0, 4.0], [0.0, 0.0]], [[0.0, 0.0 + 5.0], [0.0, 0.0]])
        assert err[0] == pytest.approx(math.sqrt(9 + 1) / 5) and err[1] == 0.0
