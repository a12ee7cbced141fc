import math

import numpy as np
import pytest

from streamtemp.numerics import (
    DimensionError,
    Rng,
    UndefinedCorrelationError,
    average_ranks,
    lower_median,
    matmul,
    normal_cdf,
    pearson,
    sample_excess_kurtosis,
    sample_skewness,
    spearman,
    xavier_normal_init,
)


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def naive_ranks(values):
    # rank = 1 + #smaller + (#equal - 1) / 2
    out = np.zeros(len(values))
    for i, v in enumerate(values):
        smaller = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        out[i] = 1.0 + smaller + (equal - 1) / 2.0
    return out


class TestMatmul:
    @pytest.mark.parametrize("shape", [(1, 1, 1), (3, 4, 2), (5, 5, 5), (2, 7, 3)])
    def test_matches_triple_loop(self, shape):
        m, k, n = shape
        gen = np.random.default_rng(42 + m)
        a = gen.normal(size=(m, k))
        b = gen.normal(size=(k, n))
        np.testing.assert_allclose(matmul(a, b), loop_matmul(a, b), rtol=1e-12, atol=1e-12)

    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(matmul(a, np.eye(4)), a)

    def test_dimension_errors(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            matmul(np.zeros(3), np.zeros((3, 2)))


class TestRng:
    def test_identical_seed_identical_stream(self):
        a = Rng(123).generator.normal(size=50)
        b = Rng(123).generator.normal(size=50)
        np.testing.assert_array_equal(a, b)

    def test_children_deterministic_and_distinct(self):
        r = Rng(9)
        c1 = r.child(0).generator.normal(size=10)
        c1_again = Rng(9).child(0).generator.normal(size=10)
        c2 = r.child(1).generator.normal(size=10)
        np.testing.assert_array_equal(c1, c1_again)
        assert not np.array_equal(c1, c2)

    def test_nested_children(self):
        a = Rng(7).child(2).child(5).generator.integers(0, 1 << 30, size=8)
        b = Rng(7, path=(2, 5)).generator.integers(0, 1 << 30, size=8)
        np.testing.assert_array_equal(a, b)

    def test_named_children_stable(self):
        a = Rng(11).child_named("trainer").generator.random(4)
        b = Rng(11).child_named("trainer").generator.random(4)
        c = Rng(11).child_named("evaluate").generator.random(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            Rng(-1)


class TestXavier:
    def test_moments(self):
        rows, cols = 40, 60
        w = xavier_normal_init(rows, cols, Rng(3))
        expected_std = math.sqrt(2.0 / (rows + cols))
        assert w.shape == (rows, cols)
        assert abs(w.mean()) < 3 * expected_std / math.sqrt(rows * cols)
        assert abs(w.std() / expected_std - 1.0) < 0.05

    def test_deterministic(self):
        np.testing.assert_array_equal(xavier_normal_init(5, 7, Rng(1)), xavier_normal_init(5, 7, Rng(1)))

    def test_rejects_bad_shape(self):
        with pytest.raises(DimensionError):
            xavier_normal_init(0, 3, Rng(0))


class TestRanksAndCorrelation:
    def test_average_ranks_against_naive(self):
        gen = np.random.default_rng(5)
        for trial in range(20):
            x = np.round(gen.normal(size=15), 1)  # rounding forces ties
            np.testing.assert_allclose(average_ranks(x), naive_ranks(x), rtol=0, atol=1e-12)

    def test_spearman_matches_rank_pearson_oracle(self):
        gen = np.random.default_rng(8)
        for trial in range(25):
            x = np.round(gen.normal(size=12), 1)
            y = np.round(gen.normal(size=12), 1)
            if np.all(x == x[0]) or np.all(y == y[0]):
                continue
            rx, ry = naive_ranks(x), naive_ranks(y)
            mx, my = rx - rx.mean(), ry - ry.mean()
            denom = math.sqrt(float(mx @ mx) * float(my @ my))
            if denom == 0.0:
                continue
            oracle = float(mx @ my) / denom
            assert spearman(x, y) == pytest.approx(oracle, abs=1e-12)

    def test_monotone_is_one(self):
        x = np.array([0.1, 1.5, 2.0, 7.7, 9.0])
        assert spearman(x, np.exp(x)) == pytest.approx(1.0)
        assert spearman(x, -np.exp(x)) == pytest.approx(-1.0)

    def test_zero_variance_raises(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman(np.ones(6), np.arange(6.0))
        with pytest.raises(UndefinedCorrelationError):
            pearson(np.ones(6), np.arange(6.0))

    def test_length_checks(self):
        with pytest.raises(DimensionError):
            spearman(np.arange(3.0), np.arange(4.0))
        with pytest.raises(DimensionError):
            spearman(np.arange(2.0), np.arange(2.0))


class TestSmallStats:
    def test_lower_median(self):
        assert lower_median(np.array([3.0, 1.0, 2.0])) == 2.0
        assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0  # lower of (2, 3)
        assert lower_median(np.array([5.0])) == 5.0
        with pytest.raises(ValueError):
            lower_median(np.array([]))

    def test_normal_cdf_reference_values(self):
        assert normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)
        assert normal_cdf(1.959963984540054) == pytest.approx(0.975, abs=1e-12)
        assert normal_cdf(-1.959963984540054) == pytest.approx(0.025, abs=1e-12)

    def test_skew_kurtosis_against_moments(self):
        gen = np.random.default_rng(17)
        x = gen.gamma(2.0, size=500)
        d = x - x.mean()
        m2 = np.mean(d**2)
        assert sample_skewness(x) == pytest.approx(np.mean(d**3) / m2**1.5, rel=1e-12)
        assert sample_excess_kurtosis(x) == pytest.approx(np.mean(d**4) / m2**2 - 3.0, rel=1e-12)

    def test_skew_kurtosis_degenerate(self):
        assert sample_skewness(np.full(10, 2.5)) == 0.0
        assert sample_excess_kurtosis(np.full(10, 2.5)) == 0.0
