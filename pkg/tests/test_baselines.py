"""Thresholded softmax, temperature scaling, APS/RAPS and the LLM baselines."""

import math

import numpy as np
import pytest

from sdmcalibrate.classes.activation import softmax
from sdmcalibrate.classes.baselines import (
    ConformalConfig,
    baseline_threshold_predict,
    conformal_predict,
    conformal_threshold,
    conformal_verdicts,
    conformity_scores,
    fit_temperature,
    llm_baseline_predict,
    prediction_sets,
    run_baselines,
    temperature_probabilities,
)
from sdmcalibrate.classes.errors import SdmError


def sampled_labels(logits, rng):
    """labels drawn from softmax(logits), so the logits are calibrated at tau = 1"""
    p = softmax(logits)
    u = rng.uniform(size=(p.shape[0], 1))
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)


class TestThresholdBaseline:
    def test_admitted(self):
        verdict = baseline_threshold_predict(np.array([0.96, 0.04]), 0.95)
        assert verdict.admitted and verdict.prediction == 0
        assert verdict.p_lower == pytest.approx(0.96)

    def test_rejected(self):
        assert not baseline_threshold_predict(np.array([0.94, 0.06]), 0.95).admitted

    def test_tie_at_threshold(self):
        assert baseline_threshold_predict(np.array([0.5, 0.5]), 0.5).admitted


class TestTemperatureScaling:
    def test_calibrated_logits(self):
        rng = np.random.default_rng(0)
        logits = 2.0 * rng.normal(size=(20000, 3))
        labels = sampled_labels(logits, rng)
        assert fit_temperature(logits, labels) == pytest.approx(1.0, abs=0.05)

    def test_overconfident_logits(self):
        rng = np.random.default_rng(1)
        logits = 2.0 * rng.normal(size=(20000, 3))
        labels = sampled_labels(logits, rng)
        assert fit_temperature(10.0 * logits, labels) == pytest.approx(0.1, abs=0.02)

    def test_single_point_hits_bound(self, caplog):
        tau = fit_temperature(np.array([[2.0, 0.0]]), np.array([0]))
        assert tau > 0.99 * math.exp(4.0)
        assert "bound" in caplog.text

    def test_argmax_invariant(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(500, 5))
        for tau in (0.05, 0.7, 3.0, 40.0):
            np.testing.assert_array_equal(
                np.argmax(temperature_probabilities(logits, tau), axis=1), np.argmax(logits, axis=1)
            )

    def test_empty(self):
        with pytest.raises(SdmError):
            fit_temperature(np.zeros((0, 2)), np.zeros(0, dtype=int))


class TestConformal:
    def test_aps_score(self):
        scores = conformity_scores(np.array([[0.5, 0.3, 0.2]]), [1])
        assert scores[0] == pytest.approx(0.8)

    def test_raps_score(self):
        config = ConformalConfig(lam=0.1, k_reg=1)
        scores = conformity_scores(np.array([[0.5, 0.3, 0.2]]), [1], config, "raps")
        assert scores[0] == pytest.approx(0.9)

    def test_unit_threshold_gives_every_class(self):
        sets = prediction_sets(np.array([[0.5, 0.3, 0.2]]), 1.0)
        assert sorted(sets[0].tolist()) == [0, 1, 2]

    def test_set_includes_crossing_class(self):
        sets = prediction_sets(np.array([[0.5, 0.3, 0.2]]), 0.6)
        assert sets[0].tolist() == [0, 1]

    def test_quantile_index(self):
        scores = np.arange(1, 20) / 20.0
        # ceil(20 * 0.9) = 18th smallest
        assert conformal_threshold(scores, 0.1) == pytest.approx(18 / 20.0)

    def test_too_few_points_full_sets(self):
        assert conformal_threshold([0.5, 0.7], 0.05) == math.inf
        sets = conformal_predict(np.array([[0.6, 0.4], [0.3, 0.7]]), [0, 1], np.array([[0.99, 0.01]]))
        assert len(sets[0]) == 2

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            conformity_scores(np.array([[0.5, 0.5]]), [0], variant="lac")

    def test_invalid_config(self):
        with pytest.raises(SdmError):
            ConformalConfig(alpha=1.0)
        with pytest.raises(SdmError):
            ConformalConfig(k_reg=0)

    def test_aps_coverage(self):
        rng = np.random.default_rng(3)
        logits = 1.5 * rng.normal(size=(4000, 6))
        labels = sampled_labels(logits, rng)
        probabilities = softmax(logits)
        sets = conformal_predict(probabilities[:2000], labels[:2000], probabilities[2000:])
        coverage = np.mean([labels[2000 + i] in s for i, s in enumerate(sets)])
        assert coverage >= 0.95 - 0.03

    def test_raps_sets_within_aps_sets_at_shared_threshold(self):
        rng = np.random.default_rng(4)
        probabilities = softmax(1.5 * rng.normal(size=(2000, 6)))
        config = ConformalConfig(lam=0.05, k_reg=1)
        for threshold in (0.5, 0.8, 0.95):
            aps = prediction_sets(probabilities, threshold, config, "aps")
            raps = prediction_sets(probabilities, threshold, config, "raps")
            assert all(len(r) <= len(a) for r, a in zip(raps, aps))

    def test_raps_smaller_on_average_with_own_thresholds(self):
        # underconfident rows with a long flat tail, and confident rows whose label is sometimes second
        rng = np.random.default_rng(9)
        C, n = 20, 4000
        flat_tail = np.array([0.3] + [0.7 / 19] * 19)
        confident = np.array([0.8, 0.15] + [0.05 / 18] * 18)
        probabilities, labels = np.zeros((n, C)), np.zeros(n, dtype=np.int64)
        for i in range(n):
            columns = rng.permutation(C)
            if rng.uniform() < 0.6:
                probabilities[i, columns] = flat_tail
                labels[i] = columns[0]
            else:
                probabilities[i, columns] = confident
                labels[i] = columns[0] if rng.uniform() < 0.8 else columns[1]
        config = ConformalConfig(lam=0.05, k_reg=1)
        calibration, test = slice(0, n // 2), slice(n // 2, n)
        sizes = {}
        for variant in ("aps", "raps"):
            sets = conformal_predict(probabilities[calibration], labels[calibration], probabilities[test], config, variant)
            sizes[variant] = np.mean([len(s) for s in sets])
            coverage = np.mean([label in s for label, s in zip(labels[test], sets)])
            assert coverage >= 0.95 - 0.03
        assert sizes["raps"] < sizes["aps"]

    def test_randomized_scores_not_above_deterministic(self):
        rng = np.random.default_rng(5)
        probabilities = softmax(rng.normal(size=(50, 4)))
        labels = rng.integers(4, size=50)
        plain = conformity_scores(probabilities, labels)
        randomized = conformity_scores(probabilities, labels, ConformalConfig(randomized=True))
        assert np.all(randomized <= plain + 1e-12)

    def test_singleton_sets_admitted(self):
        probabilities = np.array([[0.9, 0.1], [0.5, 0.5]])
        verdicts = conformal_verdicts([np.array([0]), np.array([0, 1])], probabilities, ["a", "b"], [0, 1])
        assert [v.admitted for v in verdicts] == [True, False]
        assert verdicts[0].p_lower == pytest.approx(0.9)


class TestRunBaselines:
    def test_every_method(self):
        rng = np.random.default_rng(6)
        calibration = 3.0 * rng.normal(size=(300, 2))
        calibration_labels = sampled_labels(calibration, rng)
        logits = 3.0 * rng.normal(size=(50, 2))
        results = run_baselines(("softmax", "temp", "aps", "raps"), calibration, calibration_labels, logits, 0.9)
        assert set(results) == {"softmax", "temp", "aps", "raps"}
        for verdicts in results.values():
            assert len(verdicts) == 50
            assert [v.prediction for v in verdicts] == np.argmax(logits, axis=1).tolist()

    def test_unknown_method(self):
        with pytest.raises(SdmError):
            run_baselines(("isotonic",), np.zeros((2, 2)), [0, 1], np.zeros((1, 2)), 0.9)


class TestLlmBaselines:
    def features(self):
        return np.array([0.97, 0.5, 0.4, 0.0, 0.92, 0.0, 0.0])

    def test_letter(self):
        verdict = llm_baseline_predict(self.features(), False, "letter", 0.95)
        assert verdict.admitted and verdict.prediction == 1
        assert verdict.p_lower == pytest.approx(0.97)

    def test_verbal(self):
        verdict = llm_baseline_predict(self.features(), False, "verbal", 0.95)
        assert not verdict.admitted and verdict.prediction == 1

    def test_refusal(self):
        verdict = llm_baseline_predict(np.zeros(7), True, "verbal", 0.5, "r1", 2)
        assert verdict.prediction == -1
        assert not verdict.admitted

    def test_unknown_method(self):
        with pytest.raises(SdmError):
            llm_baseline_predict(self.features(), False, "logit", 0.9)
