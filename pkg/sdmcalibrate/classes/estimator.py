# global imports
import logging

import numpy as np

# local imports
from sdmcalibrate.classes.activation import sdm_activation
from sdmcalibrate.classes.calibration import calibrate_points
from sdmcalibrate.classes.constants import ESTIMATE_VARIANTS, FORMAT_VERSION, REASONS, VERDICT_KEYS
from sdmcalibrate.classes.errors import ShapeError
from sdmcalibrate.classes.region import (
    centroid_bin_medians,
    find_min_valid_qbin,
    robust_thresholds_and_offsets,
)
from sdmcalibrate.classes.similarity import distance_quantile_d
from sdmcalibrate.classes.training import train_full

logger = logging.getLogger(__name__)


class Verdict:
    """Outcome for one test point
    :param prediction: predicted class
    :param admitted: True when the estimate is returned
    :param p_lower: offset-adjusted estimate, None when rejected
    """

    def __init__(
        self,
        id,
        prediction,
        admitted,
        p_lower=None,
        q=None,
        d_x=None,
        d=None,
        softqbin=None,
        hardqbin=None,
        softqbin_lower=None,
        exemplar_ids=(),
        reason=None,
        n_hat=None,
        label=None,
    ):
        self.id = id
        self.prediction = int(prediction)
        self.admitted = bool(admitted)
        self.p_lower = p_lower
        self.q = q
        self.d_x = d_x
        self.d = d
        self.softqbin = softqbin
        self.hardqbin = hardqbin
        self.softqbin_lower = softqbin_lower
        self.exemplar_ids = list(exemplar_ids)
        self.reason = reason
        self.n_hat = n_hat
        self.label = label

    def to_json(self):
        values = (
            self.id,
            self.prediction,
            self.admitted,
            self.p_lower,
            self.q,
            self.d,
            self.softqbin,
            self.hardqbin,
            self.exemplar_ids,
        )
        return dict(zip(VERDICT_KEYS, values))

    def __repr__(self):
        return "Verdict(id=%r, prediction=%s, admitted=%s, p_lower=%r)" % (
            self.id,
            self.prediction,
            self.admitted,
            self.p_lower,
        )


class RoundStats:
    """Calibration quantities of one round, cached for retuning alpha'"""

    def __init__(self, round, softqbin, hardqbin, o, labels, prediction, p_centroid, min_valid_qbin=None):
        self.round = int(round)
        self.softqbin = np.asarray(softqbin, dtype=np.float64)
        self.hardqbin = np.asarray(hardqbin, dtype=np.int64)
        self.o = np.asarray(o, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.prediction = np.asarray(prediction, dtype=np.int64)
        self.p_centroid = np.asarray(p_centroid, dtype=np.float64)
        self.min_valid_qbin = min_valid_qbin

    def bin_medians(self):
        return centroid_bin_medians(self.p_centroid, self.prediction, self.hardqbin)

    @classmethod
    def from_round(cls, result):
        points = result.points
        return cls(
            result.model.round,
            points.softqbin,
            points.hardqbin,
            points.o,
            result.labels,
            points.prediction,
            points.p_centroid,
            result.min_valid_qbin,
        )


class EstimatorArchive:
    """Everything needed to answer test-time queries"""

    def __init__(
        self,
        model,
        index,
        tables,
        thresholds,
        alpha,
        config,
        rounds=(),
        calibration_logits=None,
        calibration_labels=None,
        fingerprints=None,
        format_version=FORMAT_VERSION,
    ):
        self.model = model
        self.index = index
        self.tables = tables
        self.thresholds = thresholds
        self.alpha = alpha
        self.config = config
        self.rounds = list(rounds)
        self.calibration_logits = calibration_logits
        self.calibration_labels = calibration_labels
        self.fingerprints = dict(fingerprints or {})
        self.format_version = format_version

    @property
    def C(self):
        return self.tables.C

    @property
    def D(self):
        return self.model.mean.shape[0]


def build_estimator(bundle, config, session):
    """Train J rounds and assemble the estimator of the winning round"""
    best, rounds = train_full(bundle, config, session)
    thresholds = robust_thresholds_and_offsets(
        [r.min_valid_qbin for r in rounds],
        best.min_valid_qbin,
        best.psi,
        [r.bin_medians for r in rounds],
        config.alpha,
    )
    return EstimatorArchive(
        best.model,
        best.index,
        best.tables,
        thresholds,
        config.alpha,
        config,
        [RoundStats.from_round(r) for r in rounds],
        best.z,
        best.labels,
        {name: bundle.fingerprint(name) for name in ("train", "calibration")},
    )


def retune(archive, alpha):
    """Re-derive the region thresholds and offsets for a new alpha'"""
    samples = []
    best_min_valid, best_psi = None, None
    for stats in archive.rounds:
        min_valid, psi = find_min_valid_qbin(stats.softqbin, stats.o, stats.labels, stats.hardqbin, alpha, archive.C)
        stats.min_valid_qbin = min_valid
        samples.append(min_valid)
        if stats.round == archive.model.round:
            best_min_valid, best_psi = min_valid, psi
    archive.thresholds = robust_thresholds_and_offsets(
        samples,
        best_min_valid,
        best_psi,
        [stats.bin_medians() for stats in archive.rounds],
        alpha,
    )
    archive.alpha = alpha
    archive.config.alpha = alpha
    return archive


def predict_batch(archive, X, ids=None, labels=None, variant="lower", session=None):
    """Verdicts for the rows of X, in order"""
    if variant not in ESTIMATE_VARIANTS:
        raise ValueError("unknown estimate variant %r" % variant)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != archive.D:
        raise ShapeError("embedding dimension %s does not match archive dimension %s" % (X.shape[1], archive.D))
    n = X.shape[0]
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    h, z = archive.model.forward(X)
    prediction = np.argmax(z, axis=1)
    q, d_x, exemplars = archive.index.query(h, prediction, top_k=archive.config.top_k, session=session)
    d, ood_distance = distance_quantile_d(archive.tables.distance_cdfs, d_x)
    sdm_output = sdm_activation(z, q, d, keps=archive.config.keps)
    points = calibrate_points(archive.tables, sdm_output, q, prediction, archive.alpha)
    p, softqbin, hardqbin = points.estimate(variant)
    ood = ood_distance | points.ood
    if variant == "lower":
        ood = ood | points.ood_lower
    elif variant == "upper":
        ood = ood | points.ood_upper
    thresholds = archive.thresholds
    if thresholds.admitting:
        adjusted = p - thresholds.offset_array(prediction, hardqbin)
        in_region = softqbin >= thresholds.robust_min_valid_qbin
        above = adjusted >= thresholds.psi[prediction]
    else:
        adjusted = p
        in_region = above = np.zeros(n, dtype=bool)
    admitted = in_region & above & ~ood
    n_hat = points.n_hat[np.arange(n), prediction]
    verdicts = []
    for i in range(n):
        if not thresholds.admitting:
            reason = REASONS["no_region"]
        elif ood[i]:
            reason = REASONS["ood"]
        elif not in_region[i]:
            reason = REASONS["below_region"]
        elif not above[i]:
            reason = REASONS["below_psi"]
        else:
            reason = REASONS["admitted"]
        verdicts.append(
            Verdict(
                ids[i],
                prediction[i],
                admitted[i],
                float(max(0.0, adjusted[i])) if admitted[i] else None,
                int(q[i]),
                float(d_x[i]),
                float(d[i]),
                float(points.softqbin[i]),
                int(points.hardqbin[i]),
                float(points.softqbin_lower[i]),
                [archive.index.ids[row] for row in exemplars[i]] if exemplars else [],
                reason,
                float(n_hat[i]),
                None if labels is None else int(labels[i]),
            )
        )
    return verdicts


def predict(archive, embedding, id=None, variant="lower"):
    """Verdict for a single embedding"""
    return predict_batch(archive, np.asarray(embedding)[None, :], [id], variant=variant)[0]
