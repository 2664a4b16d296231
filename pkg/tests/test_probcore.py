import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confdecode import probcore
from confdecode.errors import InvalidLogits, InvalidProbability, InvalidShape


def random_simplex(rng, *shape):
    x = rng.gamma(0.5, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        np.testing.assert_allclose(probcore.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_two_class_value(self):
        expected = math.exp(2) / (math.exp(2) + 1)
        np.testing.assert_allclose(probcore.softmax([2.0, 0.0]), [expected, 1 - expected], atol=1e-12)
        np.testing.assert_allclose(probcore.softmax([2.0, 0.0]), [0.8808, 0.1192], atol=1e-4)

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise"):
            p = probcore.softmax([1000.0, 0.0])
        assert p[0] == 1.0
        assert 0.0 <= p[1] < 1e-300

    @pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 0.0], [-np.inf, 1.0]])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(InvalidLogits):
            probcore.softmax(bad)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 13), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_shift_invariance(self, z, c):
        np.testing.assert_allclose(probcore.softmax(z + c), probcore.softmax(z), rtol=0, atol=1e-12)

    def test_argmax_preserved_under_temperature(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            z = rng.normal(scale=5, size=rng.integers(2, 14))
            for T in (0.01, 0.1, 1.0, 10.0, 100.0):
                assert np.argmax(probcore.softmax(z / T)) == np.argmax(z)

    def test_output_on_simplex(self):
        rng = np.random.default_rng(1)
        p = probcore.softmax(rng.normal(scale=20, size=(500, 13)))
        probcore.check_probs(p)


class TestEntropy:
    def test_uniform_13(self):
        assert probcore.entropy(np.full(13, 1 / 13)) == pytest.approx(math.log(13), abs=1e-12)
        assert math.log(13) == pytest.approx(2.5649, abs=1e-4)

    def test_one_hot_zero(self):
        assert probcore.entropy([0.0, 1.0, 0.0]) == 0.0

    def test_binary_symmetric(self):
        assert probcore.entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_invalid_probability(self):
        with pytest.raises(InvalidProbability):
            probcore.entropy([0.5, 0.6])
        with pytest.raises(InvalidProbability):
            probcore.entropy([1.2, -0.2])

    def test_bounds_random(self):
        rng = np.random.default_rng(2)
        for C in (2, 5, 13):
            p = random_simplex(rng, 1000, C)
            h = probcore.entropy(p)
            assert np.all(h >= 0) and np.all(h <= math.log(C) + 1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        p = random_simplex(rng, 20, 7)
        batch = probcore.entropy(p)
        assert all(batch[i] == probcore.entropy(p[i]) for i in range(20))


class TestMargin:
    def test_one_hot(self):
        assert probcore.margin_uncertainty([1.0, 0.0, 0.0, 0.0]) == 0.0

    def test_uniform(self):
        assert probcore.margin_uncertainty(np.full(5, 0.2)) == 1.0

    def test_direct_arithmetic(self):
        assert probcore.margin_uncertainty([0.7, 0.2, 0.1]) == pytest.approx(0.5, abs=1e-15)

    def test_tie_independent_of_order(self):
        assert probcore.margin_uncertainty([0.4, 0.2, 0.4]) == probcore.margin_uncertainty([0.4, 0.4, 0.2]) == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(InvalidShape):
            probcore.margin_uncertainty([1.0])

    def test_range_random(self):
        rng = np.random.default_rng(4)
        u = probcore.margin_uncertainty(random_simplex(rng, 2000, 13))
        assert np.all((u >= 0) & (u <= 1))


def brute_force_mi(members):
    """Independent loop-based evaluation of H(mean) - mean(H)."""
    M, C = len(members), len(members[0])
    mean = [sum(members[m][c] for m in range(M)) / M for c in range(C)]

    def h(p):
        return -sum(x * math.log(x) for x in p if x > 0)

    return h(mean) - sum(h(p) for p in members) / M


class TestMutualInformation:
    def test_identical_members(self):
        p = [0.2, 0.5, 0.3]
        assert probcore.mutual_information([p, p, p, p]) == pytest.approx(0.0, abs=1e-15)

    def test_maximal_disagreement(self):
        assert probcore.mutual_information([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(math.log(2), abs=1e-15)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            members = random_simplex(rng, 3, rng.integers(2, 14))
            assert probcore.mutual_information(members) == pytest.approx(
                brute_force_mi(members.tolist()), abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(6)
        for M in (1, 2, 5, 8):
            mi = probcore.mutual_information(random_simplex(rng, M, 500, 13))
            assert np.all(mi >= -1e-12)

    def test_mismatched_classes(self):
        with pytest.raises(InvalidShape):
            probcore.mutual_information([[0.5, 0.5], [0.2, 0.3, 0.5]])

    def test_member_mean_permutation_exact(self):
        rng = np.random.default_rng(7)
        members = random_simplex(rng, 6, 40, 13)
        base = probcore.member_mean(members)
        for _ in range(10):
            perm = rng.permutation(6)
            assert np.array_equal(probcore.member_mean(members[perm]), base)
            assert np.array_equal(probcore.mutual_information(members[perm]),
                                  probcore.mutual_information(members))
