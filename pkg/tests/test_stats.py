"""Empirical CDF conventions and the DKW / Cauchy / MAD helpers."""

import itertools
import math

import numpy as np
import pytest

from sdmcalibrate.classes.errors import SdmError
from sdmcalibrate.classes.stats import (
    EmpiricalCdf,
    cauchy_inverse_cdf,
    dkw_epsilon,
    ecdf_quantile,
    mad,
    robust_scale,
)


class TestEmpiricalCdf:
    def test_left_insertion(self):
        assert ecdf_quantile(EmpiricalCdf([1, 2, 3, 4]), 2.5) == 0.5

    def test_equal_values_not_counted(self):
        assert ecdf_quantile(EmpiricalCdf([1, 2, 3, 4]), 2.0) == 0.25

    def test_reverse_zero_side(self):
        assert ecdf_quantile(EmpiricalCdf([1, 2, 3, 4]), 0.5, reverse=True) == 1.0

    def test_reverse_beyond_max(self):
        assert ecdf_quantile(EmpiricalCdf([1, 2, 3, 4]), 10.0, reverse=True) == 0.0

    def test_saturation_guard(self):
        assert ecdf_quantile(EmpiricalCdf([0.2, 0.9], saturating=True), 0.9) == 1.0
        assert ecdf_quantile(EmpiricalCdf([0.2, 0.9], saturating=False), 0.9) == 0.5

    def test_empty(self):
        cdf = EmpiricalCdf([])
        assert cdf.empty
        assert ecdf_quantile(cdf, 3.0) == 0.0
        assert ecdf_quantile(cdf, 3.0, reverse=True) == 0.0
        assert cdf.inverse(0.5) is None

    def test_array_queries(self):
        out = EmpiricalCdf([1, 2, 3, 4]).quantile(np.array([0.0, 2.5, 5.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_exhaustive_grid(self):
        """every multiset of up to four values from a five-point grid, every query"""
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
        queries = np.linspace(-0.25, 1.25, 13)
        for size in range(1, 5):
            for values in itertools.combinations_with_replacement(grid, size):
                for saturating in (False, True):
                    cdf = EmpiricalCdf(values, saturating=saturating)
                    for val in queries:
                        below = sum(v < val for v in values) / size
                        expected = below
                        if saturating and val >= max(values):
                            expected = 1.0
                        assert ecdf_quantile(cdf, val) == expected
                        assert ecdf_quantile(cdf, val, reverse=True) == 1.0 - below

    def test_inverse_smallest_reaching_p(self):
        cdf = EmpiricalCdf([0.5, 0.9, 0.99, 0.99])
        assert cdf.inverse(0.25) == 0.5
        assert cdf.inverse(0.26) == 0.9
        assert cdf.inverse(0.05) == 0.5
        assert cdf.inverse(1.0) == 0.99

    def test_array_round_trip_keeps_order(self):
        cdf = EmpiricalCdf([3.0, 1.0, 2.0], saturating=True)
        restored = EmpiricalCdf.from_array(cdf.to_array(), saturating=True)
        np.testing.assert_array_equal(restored.values, [1.0, 2.0, 3.0])
        assert restored.quantile(3.0) == 1.0


class TestRobustScale:
    def test_outlier(self):
        scale = robust_scale([1, 2, 3, 4, 100])
        assert scale.location == 3
        assert scale.mad == 1

    def test_singleton(self):
        scale = robust_scale([5])
        assert (scale.location, scale.mad) == (5, 0)

    def test_constant(self):
        assert robust_scale([2, 2, 2, 2]).mad == 0
        assert mad([2, 2, 2, 2]) == 0

    def test_even_length_median(self):
        assert robust_scale([1, 2, 3, 4]).location == 2.5

    def test_empty(self):
        with pytest.raises(SdmError):
            robust_scale([])
        assert mad([]) == 0.0


class TestCauchyInverseCdf:
    def test_median(self):
        assert cauchy_inverse_cdf(7, 2, 0.5) == pytest.approx(7)

    def test_quartile(self):
        assert cauchy_inverse_cdf(0, 1, 0.75) == pytest.approx(1.0)

    def test_reported_magnitudes(self):
        value = cauchy_inverse_cdf(1.004, 7.9e-05, 0.95)
        assert value == pytest.approx(1.004 + 7.9e-05 * math.tan(0.45 * math.pi), abs=1e-12)
        assert abs(value - 1.004499) < 1e-6

    def test_zero_scale(self):
        assert cauchy_inverse_cdf(1.5, 0.0, 0.95) == 1.5

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_alpha_outside_open_interval(self, alpha):
        with pytest.raises(SdmError):
            cauchy_inverse_cdf(0, 1, alpha)

    def test_negative_scale(self):
        with pytest.raises(SdmError):
            cauchy_inverse_cdf(0, -1, 0.9)


class TestDkwEpsilon:
    def test_known_value(self):
        assert abs(dkw_epsilon(200, 0.95) - 0.09603) < 1e-5

    def test_empty_sample(self):
        assert dkw_epsilon(0, 0.95) == 1.0

    def test_vanishes(self):
        assert dkw_epsilon(1e9, 0.95) < 1e-4

    def test_monotone(self):
        values = dkw_epsilon(np.arange(1, 500), 0.9)
        assert np.all(np.diff(values) < 0)
        assert np.all(values <= 1.0)

    def test_array_with_zeros(self):
        np.testing.assert_allclose(dkw_epsilon(np.array([0.0, 200.0]), 0.95), [1.0, 0.09603], atol=1e-5)
