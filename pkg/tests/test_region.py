"""High-probability region search and the Cauchy-robust thresholds."""

import numpy as np
import pytest

from sdmcalibrate.classes.region import (
    RegionThresholds,
    centroid_bin_medians,
    find_min_valid_qbin,
    robust_thresholds_and_offsets,
)
from sdmcalibrate.classes.stats import cauchy_inverse_cdf


def outputs(true_values, labels):
    """two-class output rows with the given true-class entry"""
    o = np.zeros((len(labels), 2))
    for i, (value, label) in enumerate(zip(true_values, labels)):
        o[i, label] = value
        o[i, 1 - label] = 1 - value
    return o


class TestFindMinValidQBin:
    def test_first_candidate_passes(self):
        labels = np.array([0, 1, 0, 1])
        softqbin = np.full(4, 2.0)
        min_valid, psi = find_min_valid_qbin(softqbin, outputs([0.99] * 4, labels), labels, np.floor(softqbin), 0.95)
        assert min_valid == 2.0
        np.testing.assert_allclose(psi, [0.99, 0.99])

    def test_impossible(self):
        labels = np.array([0, 1, 0, 1])
        softqbin = np.array([1.0, 2.0, 3.0, 4.0])
        assert find_min_valid_qbin(softqbin, outputs([0.6] * 4, labels), labels, np.floor(softqbin), 0.95) == (None, None)

    def test_passes_after_excluding_low_bins(self):
        softqbin = np.array([1.0, 1.5, 2.0, 2.5, 3.0, 3.5])
        labels = np.array([0, 1, 0, 1, 0, 1])
        true = [0.5, 0.5, 0.99, 0.99, 0.99, 0.99]
        min_valid, psi = find_min_valid_qbin(softqbin, outputs(true, labels), labels, np.floor(softqbin), 0.9)
        assert min_valid == 2.0
        np.testing.assert_allclose(psi, [0.99, 0.99])

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = 40
            labels = rng.integers(2, size=n)
            softqbin = np.round(rng.uniform(0, 4, size=n), 1)
            true = np.clip(0.7 + 0.08 * softqbin + rng.normal(scale=0.05, size=n), 0, 1)
            hardqbin = np.floor(softqbin)
            min_valid, _ = find_min_valid_qbin(softqbin, outputs(true, labels), labels, hardqbin, 0.9)
            expected = None
            for candidate in sorted(set(softqbin[hardqbin > 0])):
                region = softqbin >= candidate
                ok = True
                for c in range(2):
                    values = np.sort(true[region & (labels == c)])
                    if values.size == 0:
                        ok = False
                        break
                    k = max(1, int(np.ceil(0.1 * values.size - 1e-9)))
                    ok &= values[k - 1] >= 0.9
                if ok:
                    expected = candidate
                    break
            assert min_valid == expected

    def test_zero_bin_points_not_candidates(self):
        labels = np.array([0, 1, 0, 1])
        softqbin = np.array([0.5, 0.5, 1.5, 1.5])
        min_valid, _ = find_min_valid_qbin(softqbin, outputs([0.99] * 4, labels), labels, np.floor(softqbin), 0.9)
        assert min_valid == 1.5


class TestRobustThresholds:
    def test_single_round(self):
        thresholds = robust_thresholds_and_offsets([2.0], 2.0, [0.95, 0.96], [{(0, 2): 0.97}], 0.95)
        assert thresholds.robust_min_valid_qbin == 2.0
        assert thresholds.offset(0, 2) == 0.0

    def test_equal_samples(self):
        thresholds = robust_thresholds_and_offsets(
            [1.5, 1.5, 1.5], 1.5, [0.9, 0.9], [{(1, 1): 0.9}] * 3, 0.95
        )
        assert thresholds.robust_min_valid_qbin == 1.5
        assert thresholds.offset(1, 1) == 0.0

    def test_cauchy_threshold_and_offsets(self):
        medians = [{(0, 1): 0.9}, {(0, 1): 0.8}, {(0, 1): 0.95}]
        thresholds = robust_thresholds_and_offsets([2.0, 2.2, 1.8], 2.0, [0.9, 0.9], medians, 0.95)
        assert thresholds.robust_min_valid_qbin == pytest.approx(cauchy_inverse_cdf(2.0, 0.2, 0.95))
        assert thresholds.robust_min_valid_qbin >= 2.0
        assert thresholds.offset(0, 1) == pytest.approx(cauchy_inverse_cdf(0.0, 0.05, 0.95))

    def test_missing_round_excluded(self):
        thresholds = robust_thresholds_and_offsets([2.0, None, 2.0], 2.0, [0.9, 0.9], [{}, {}, {}], 0.95)
        assert thresholds.robust_min_valid_qbin == 2.0
        assert np.isnan(thresholds.samples[1])
        assert thresholds.admitting

    def test_selected_round_without_region(self):
        thresholds = robust_thresholds_and_offsets([None, 1.0], None, None, [{}, {}], 0.95)
        assert not thresholds.admitting


class TestOffsetLookup:
    def setup_method(self):
        self.thresholds = RegionThresholds(1.0, [0.9, 0.9], 1.0, {(0, 1): 0.1, (0, 3): 0.3}, [1.0])

    def test_observed_bin(self):
        assert self.thresholds.offset(0, 3) == 0.3

    def test_nearest_lower_bin(self):
        assert self.thresholds.offset(0, 2) == 0.1

    def test_above_largest_bin(self):
        assert self.thresholds.offset(0, 7) == 0.3

    def test_below_smallest_bin(self):
        assert self.thresholds.offset(0, 0) == 0.1

    def test_unseen_prediction(self):
        assert self.thresholds.offset(1, 2) == 0.0

    def test_vectorized(self):
        np.testing.assert_allclose(self.thresholds.offset_array([0, 0, 1], [2, 5, 1]), [0.1, 0.3, 0.0])


class TestBinMedians:
    def test_groups(self):
        medians = centroid_bin_medians([0.9, 0.8, 0.7, 0.95], [0, 0, 1, 0], [1, 1, 2, 2])
        assert medians == {(0, 1): pytest.approx(0.85), (0, 2): 0.95, (1, 2): 0.7}
