# global imports
import logging
import math

import numpy as np
from scipy import optimize

# local imports
from sdmcalibrate.classes.activation import log_softmax, softmax
from sdmcalibrate.classes.constants import ANSWER_LETTERS
from sdmcalibrate.classes.errors import SdmError
from sdmcalibrate.classes.estimator import Verdict

logger = logging.getLogger(__name__)

LOG_TAU_BOUNDS = (-4.0, 4.0)
BASELINE_METHODS = ("softmax", "temp", "aps", "raps")
LLM_METHODS = ("letter", "verbal")


class ConformalConfig:
    """Settings of the APS and RAPS prediction sets
    :param alpha: miscoverage level
    :param lam: RAPS penalty per rank beyond k_reg
    :param k_reg: number of unpenalized ranks
    :param randomized: use the randomized score
    """

    def __init__(self, alpha=0.05, lam=0.01, k_reg=1, randomized=False):
        if not 0 < alpha < 1:
            raise SdmError("conformal alpha must lie in (0, 1): %r" % alpha, "invalid_alpha")
        if lam < 0 or k_reg < 1:
            raise SdmError("RAPS needs lam >= 0 and k_reg >= 1", "invalid_config")
        self.alpha = alpha
        self.lam = lam
        self.k_reg = k_reg
        self.randomized = randomized

    def as_dict(self):
        return dict(vars(self))


def temperature_nll(log_tau, logits, labels):
    log_p = log_softmax(logits, math.exp(log_tau))
    return float(-np.mean(log_p[np.arange(labels.shape[0]), labels]))


def fit_temperature(logits, labels):
    """Multiplier tau minimizing the NLL of softmax(tau * z) on calibration logits
    The search runs over log tau in [-4, 4] with a bounded Brent search.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] == 0:
        raise SdmError("temperature scaling needs calibration logits", "empty_sample")
    result = optimize.minimize_scalar(
        temperature_nll,
        bounds=LOG_TAU_BOUNDS,
        args=(logits, labels),
        method="bounded",
        options={"xatol": 1e-6},
    )
    log_tau = float(result.x)
    if min(abs(log_tau - bound) for bound in LOG_TAU_BOUNDS) < 1e-3:
        logger.warning("temperature search ended at its bound (log tau = %.4f)", log_tau)
    return math.exp(log_tau)


def temperature_probabilities(logits, tau):
    return softmax(np.atleast_2d(logits), tau)


def baseline_threshold_predict(probabilities, alpha_prime, id=None, label=None):
    """Admit the argmax when its probability reaches alpha'"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    prediction = int(np.argmax(probabilities))
    top = float(probabilities[prediction])
    admitted = top >= alpha_prime
    return Verdict(id, prediction, admitted, top if admitted else None, label=label)


def _ranked(probabilities):
    """classes sorted by decreasing probability (ties by index) and their cumulative mass"""
    order = np.argsort(-probabilities, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probabilities, order, axis=-1)
    return order, sorted_p, np.cumsum(sorted_p, axis=-1)


def _penalty(config, C):
    ranks = np.arange(1, C + 1)
    return config.lam * np.maximum(0, ranks - config.k_reg)


def conformity_scores(probabilities, labels, config=None, variant="aps", rng=None):
    """APS score (cumulative mass through the true class), plus the RAPS rank penalty"""
    config = config or ConformalConfig()
    probabilities = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, C = probabilities.shape
    order, sorted_p, cumulative = _ranked(probabilities)
    rank = np.argmax(order == labels[:, None], axis=1)
    scores = cumulative[np.arange(n), rank]
    if config.randomized:
        rng = rng if rng is not None else np.random.default_rng(0)
        scores = scores - rng.uniform(size=n) * sorted_p[np.arange(n), rank]
    if variant == "raps":
        scores = scores + _penalty(config, C)[rank]
    elif variant != "aps":
        raise ValueError("unknown conformal variant %r" % variant)
    return scores


def conformal_threshold(scores, alpha):
    """ceil((n+1)(1-alpha))-th smallest score, inf when n is too small"""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    n = scores.shape[0]
    if n == 0:
        raise SdmError("conformal calibration set is empty", "empty_sample")
    k = math.ceil((n + 1) * (1 - alpha))
    if k > n:
        logger.warning("%s calibration points are too few for alpha=%s; using full sets", n, alpha)
        return math.inf
    return float(scores[k - 1])


def prediction_sets(probabilities, threshold, config=None, variant="aps", rng=None):
    """Classes in decreasing probability, up to and including the first whose running score exceeds the threshold"""
    config = config or ConformalConfig()
    probabilities = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    n, C = probabilities.shape
    order, sorted_p, running = _ranked(probabilities)
    if config.randomized:
        rng = rng if rng is not None else np.random.default_rng(1)
        running = running - rng.uniform(size=(n, 1)) * sorted_p
    if variant == "raps":
        running = running + _penalty(config, C)
    exceeds = running > threshold
    sizes = np.where(exceeds.any(axis=1), np.argmax(exceeds, axis=1) + 1, C)
    return [order[i, : sizes[i]] for i in range(n)]


def conformal_predict(calibration_probabilities, calibration_labels, probabilities, config=None, variant="aps"):
    """Prediction sets for the rows of probabilities"""
    config = config or ConformalConfig()
    rng = np.random.default_rng(0)
    scores = conformity_scores(calibration_probabilities, calibration_labels, config, variant, rng)
    threshold = conformal_threshold(scores, config.alpha)
    return prediction_sets(probabilities, threshold, config, variant, rng)


def conformal_verdicts(sets, probabilities, ids=None, labels=None):
    """A point is admitted when its prediction set is a singleton"""
    probabilities = np.atleast_2d(probabilities)
    verdicts = []
    for i, members in enumerate(sets):
        prediction = int(np.argmax(probabilities[i]))
        admitted = len(members) == 1
        verdicts.append(
            Verdict(
                None if ids is None else ids[i],
                prediction,
                admitted,
                float(probabilities[i, prediction]) if admitted else None,
                label=None if labels is None else int(labels[i]),
            )
        )
    return verdicts


def run_baselines(methods, calibration_logits, calibration_labels, logits, alpha_prime, ids=None, labels=None, config=None):
    """Verdicts of every requested method on the same cached logits
    :return: {method: [Verdict]}
    """
    unknown = [m for m in methods if m not in BASELINE_METHODS]
    if unknown:
        raise SdmError("unknown baseline method(s): %s" % ", ".join(unknown), "invalid_method")
    config = config or ConformalConfig()
    logits = np.atleast_2d(logits)
    ids = ids if ids is not None else [str(i) for i in range(logits.shape[0])]
    labels = [None] * logits.shape[0] if labels is None else [int(y) for y in labels]
    probabilities = softmax(logits)
    calibration_probabilities = softmax(np.atleast_2d(calibration_logits))
    results = {}
    for method in methods:
        if method == "softmax":
            results[method] = [
                baseline_threshold_predict(p, alpha_prime, ids[i], labels[i]) for i, p in enumerate(probabilities)
            ]
        elif method == "temp":
            tau = fit_temperature(calibration_logits, calibration_labels)
            logger.info("fitted temperature multiplier %.6g", tau)
            scaled = temperature_probabilities(logits, tau)
            results[method] = [
                baseline_threshold_predict(p, alpha_prime, ids[i], labels[i]) for i, p in enumerate(scaled)
            ]
        else:
            sets = conformal_predict(calibration_probabilities, calibration_labels, probabilities, config, method)
            results[method] = conformal_verdicts(sets, probabilities, ids, labels)
    return results


def llm_baseline_predict(features, refused, method, alpha_prime, id=None, label=None):
    """Threshold baselines over the seven-value LLM response features
    letter: mean probability of the answer-letter tokens; verbal: the
    verbalized confidence. Refusals are rejected and never correct.
    """
    if method not in LLM_METHODS:
        raise SdmError("unknown LLM baseline %r" % method, "invalid_method")
    features = np.asarray(features, dtype=np.float64)
    if refused:
        return Verdict(id, -1, False, label=label)
    letters = features[3 : 3 + len(ANSWER_LETTERS)]
    prediction = int(np.argmax(letters))
    score = float(features[0]) if method == "letter" else float(letters[prediction])
    admitted = score >= alpha_prime
    return Verdict(id, prediction, admitted, score if admitted else None, label=label)
