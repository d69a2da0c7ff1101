# global imports
import logging

import numpy as np

# local imports
from sdmcalibrate.classes.stats import EmpiricalCdf, cauchy_inverse_cdf, mad

logger = logging.getLogger(__name__)


def find_min_valid_qbin(softqbin, o, labels, hardqbin, alpha_prime, C=None):
    """Smallest calibration soft q-bin whose region has every class-wise
    (1 - alpha') quantile of the true-class output at least alpha'

    Only points with hard q-bin > 0 are candidates.
    :return: (minValidQBin, psi) or (None, None)
    """
    softqbin = np.asarray(softqbin, dtype=np.float64)
    o = np.atleast_2d(o)
    labels = np.asarray(labels, dtype=np.int64)
    C = C or o.shape[1]
    admissible = np.asarray(hardqbin) > 0
    candidates = np.unique(softqbin[admissible])
    true_output = o[np.arange(labels.shape[0]), labels]
    for candidate in candidates:
        region = softqbin >= candidate
        psi = []
        for c in range(C):
            cdf = EmpiricalCdf(true_output[region & (labels == c)])
            psi.append(cdf.inverse(1.0 - alpha_prime))
        if all(value is not None and value >= alpha_prime for value in psi):
            return float(candidate), np.asarray(psi)
    return None, None


def centroid_bin_medians(p_centroid, prediction, hardqbin):
    """median p_centroid per (predicted label, hard q-bin)"""
    p_centroid = np.asarray(p_centroid)
    prediction = np.asarray(prediction)
    hardqbin = np.asarray(hardqbin)
    medians = {}
    for key in sorted(set(zip(prediction.tolist(), hardqbin.tolist()))):
        mask = (prediction == key[0]) & (hardqbin == key[1])
        medians[key] = float(np.median(p_centroid[mask]))
    return medians


class RegionThresholds:
    """Thresholds of the admitted region and the offsets on p_lower
    :param min_valid_qbin: minValidQBin of the selected round (None if absent)
    :param psi: class thresholds of the selected round (None if absent)
    :param robust_min_valid_qbin: Cauchy-robust threshold on the soft q-bin
    :param offsets: {(prediction, hard q-bin): offset}
    :param samples: minValidQBin of every round (nan where absent)
    """

    def __init__(self, min_valid_qbin, psi, robust_min_valid_qbin, offsets, samples, scales=None):
        self.min_valid_qbin = min_valid_qbin
        self.psi = None if psi is None else np.asarray(psi, dtype=np.float64)
        self.robust_min_valid_qbin = robust_min_valid_qbin
        self.offsets = dict(offsets)
        self.samples = np.asarray(samples, dtype=np.float64)
        self.scales = dict(scales or {})

    @property
    def admitting(self):
        return self.robust_min_valid_qbin is not None and self.psi is not None

    def offset(self, prediction, hardqbin):
        """Offset for a (prediction, bin) cell
        Bins above the largest observed bin use it; a missing bin uses the
        nearest lower observed bin, else the nearest higher one.
        """
        bins = sorted(b for p, b in self.offsets if p == prediction)
        if not bins:
            return 0.0
        hardqbin = min(int(hardqbin), bins[-1])
        if (prediction, hardqbin) in self.offsets:
            return self.offsets[(prediction, hardqbin)]
        lower = [b for b in bins if b < hardqbin]
        chosen = lower[-1] if lower else bins[0]
        return self.offsets[(prediction, chosen)]

    def offset_array(self, prediction, hardqbin):
        return np.array([self.offset(int(p), int(b)) for p, b in zip(prediction, hardqbin)])


def robust_thresholds_and_offsets(round_min_valid, best_min_valid, best_psi, round_bin_medians, alpha_prime):
    """Cauchy-robust threshold and offsets across the J rounds
    :param round_min_valid: minValidQBin per round, None where absent
    :param round_bin_medians: per round, {(prediction, bin): median p_centroid}
    """
    J = len(round_min_valid)
    samples = [m for m in round_min_valid if m is not None]
    if len(samples) < J:
        logger.warning("%s of %s rounds found no minValidQBin", J - len(samples), J)
    if best_min_valid is None:
        robust = None
        logger.warning("selected round has no high-probability region; every point is rejected")
    elif J == 1:
        robust = float(best_min_valid)
    else:
        robust = cauchy_inverse_cdf(best_min_valid, mad(samples), alpha_prime)
    keys = sorted(set().union(*[set(medians) for medians in round_bin_medians])) if round_bin_medians else []
    offsets, scales = {}, {}
    for key in keys:
        values = [medians[key] for medians in round_bin_medians if key in medians]
        scales[key] = mad(values) if J > 1 else 0.0
        offsets[key] = max(0.0, cauchy_inverse_cdf(0.0, scales[key], alpha_prime))
    return RegionThresholds(
        best_min_valid,
        best_psi,
        robust,
        offsets,
        [np.nan if m is None else m for m in round_min_valid],
        scales,
    )
