# global imports
import logging

import numpy as np

# local imports
from sdmcalibrate.classes.activation import sdm_activation, sdm_log_vjp, sdm_nll
from sdmcalibrate.classes.constants import DEFAULTS, Q_RESCALE_OFFSET
from sdmcalibrate.classes.errors import TrainingError
from sdmcalibrate.classes.numerics import OptimizerState, adam_update
from sdmcalibrate.classes.similarity import distance_cdfs
from sdmcalibrate.classes.stats import EmpiricalCdf, dkw_epsilon, ecdf_quantile

logger = logging.getLogger(__name__)


class RescalerConfig:
    """Settings of the C x C rescaling layer
    :param lr: Adam learning rate
    :param max_epochs: epoch cap
    :param patience: consecutive worsening epochs tolerated
    :param init_noise: scale of the noise added to the identity
    """

    def __init__(
        self,
        lr=DEFAULTS["rescaler_lr"],
        max_epochs=DEFAULTS["rescaler_max_epochs"],
        patience=DEFAULTS["rescaler_patience"],
        init_noise=0.01,
    ):
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.init_noise = init_noise

    def as_dict(self):
        return dict(vars(self))


class CalibrationTables:
    """Class-wise eCDFs and counts over the calibration split
    :param distance_cdfs: eCDFs of d_x over q > 0 points, by true label
    :param output_cdfs: saturating eCDFs of the activation output, by true label
    :param qbin_cdfs: eCDFs of the soft q-bin, by true label
    :param counts: calibration count per true label
    :param rescaler: C x C weights of the rescaling layer
    """

    def __init__(self, distance_cdfs, output_cdfs, qbin_cdfs, counts, rescaler):
        self.distance_cdfs = list(distance_cdfs)
        self.output_cdfs = list(output_cdfs)
        self.qbin_cdfs = list(qbin_cdfs)
        self.counts = np.asarray(counts, dtype=np.float64)
        self.rescaler = np.asarray(rescaler, dtype=np.float64)

    @property
    def C(self):
        return self.counts.shape[0]


def output_cdfs(sdm_output, labels, C):
    sdm_output = np.atleast_2d(sdm_output)
    labels = np.asarray(labels)
    return [EmpiricalCdf(sdm_output[labels == c, c], saturating=True) for c in range(C)]


def compute_quantile_vector(tables, sdm_output):
    """v_c = eCDF_c(sdm output entry c), one row per point"""
    cdfs = tables.output_cdfs if isinstance(tables, CalibrationTables) else tables
    sdm_output = np.asarray(sdm_output, dtype=np.float64)
    return np.stack(
        [ecdf_quantile(cdf, sdm_output[..., c]) for c, cdf in enumerate(cdfs)], axis=-1
    )


def _select(v, prediction):
    v = np.asarray(v)
    if v.ndim == 1:
        return v[int(prediction)]
    return v[np.arange(v.shape[0]), np.asarray(prediction, dtype=np.int64)]


def compute_softqbin(q, v, prediction):
    """(soft q-bin, hard q-bin) = (v_yhat * ln(2 + q), floor of it)"""
    softqbin = _select(v, prediction) * np.log(Q_RESCALE_OFFSET + np.asarray(q, dtype=np.float64))
    return softqbin, np.floor(softqbin).astype(np.int64)


def rescale(weights, v, softqbin, log_form=False):
    """normalize W''^T v with base 2 + soft q-bin"""
    return sdm_activation(np.asarray(v) @ weights, softqbin, 1.0, log_form=log_form)


def rescale_outputs(tables, v, softqbin, prediction):
    """Rescaled distribution, its entry at prediction, and the argmax-mismatch flag
    On a mismatch the soft q-bin variant should be recorded as 0; the
    distribution itself is not recomputed.
    """
    weights = tables.rescaler if isinstance(tables, CalibrationTables) else tables
    o = rescale(weights, v, softqbin)
    ood = np.argmax(o, axis=-1) != np.asarray(prediction)
    return o, _select(o, prediction), ood


def rescaler_loss_and_grad(weights, v, labels, softqbin):
    """mean -log base (2 + soft q-bin) of the true-class rescaled output"""
    v = np.atleast_2d(v)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    softqbin = np.atleast_1d(softqbin)
    n = labels.shape[0]
    z = v @ weights
    log_out = sdm_activation(z, softqbin, 1.0, log_form=True)
    loss = float(np.mean(sdm_nll(log_out, labels)))
    upstream = np.zeros_like(z)
    upstream[np.arange(n), labels] = -1.0 / n
    grad_z = sdm_log_vjp(z, softqbin, 1.0, upstream)
    return loss, v.T @ grad_z


def train_rescaler(v, labels, softqbin, config=None, rng=None, session=None):
    """Fit W'' over the calibration split with batch size 1
    Keeps the minimum-loss weights; stops once the loss has stayed above
    the minimum for `patience` consecutive epochs.
    """
    config = config or RescalerConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    softqbin = np.asarray(softqbin, dtype=np.float64)
    C = v.shape[1]
    weights = np.eye(C) + config.init_noise * rng.standard_normal((C, C))
    best, best_loss = weights.copy(), np.inf
    state = OptimizerState()
    counter = 0
    for epoch in range(1, config.max_epochs + 1):
        for i in range(labels.shape[0]):
            _, grad = rescaler_loss_and_grad(weights, v[i], labels[i], softqbin[i])
            weights = adam_update(state, {"W": weights}, {"W": grad}, config.lr)["W"]
        loss, _ = rescaler_loss_and_grad(weights, v, labels, softqbin)
        if not np.isfinite(loss):
            raise TrainingError("non-finite rescaler loss at epoch %s" % epoch)
        if session is not None:
            session.progress(rescaler_epoch=epoch, loss=loss)
        if loss < best_loss:
            best, best_loss = weights.copy(), loss
        if loss > best_loss:
            counter += 1
            if counter >= config.patience:
                break
        else:
            counter = 0
    return best


def dkw_adjusted_bounds(tables, v, q, softqbin, prediction, alpha_prime):
    """Effective sizes, DKW errors and the bounded quantile vectors
    :return: (n_hat, epsilon, v_lower, v_upper, softqbin_lower, softqbin_upper)
    """
    v = np.asarray(v, dtype=np.float64)
    softqbin = np.asarray(softqbin, dtype=np.float64)
    n_hat = np.stack(
        [tables.counts[c] * ecdf_quantile(cdf, softqbin) for c, cdf in enumerate(tables.qbin_cdfs)],
        axis=-1,
    )
    epsilon = dkw_epsilon(n_hat, alpha_prime)
    onehot = np.eye(v.shape[-1])[np.asarray(prediction, dtype=np.int64)]
    sign = 1.0 - 2.0 * onehot
    v_lower = np.clip(v + sign * epsilon, 0.0, 1.0)
    v_upper = np.clip(v - sign * epsilon, 0.0, 1.0)
    log_base = np.log(Q_RESCALE_OFFSET + np.asarray(q, dtype=np.float64))
    return (
        n_hat,
        epsilon,
        v_lower,
        v_upper,
        _select(v_lower, prediction) * log_base,
        _select(v_upper, prediction) * log_base,
    )


class PointUncertainty:
    """Every intermediate of the calibration chain for a batch of points"""

    def __init__(self, **fields):
        self.__dict__.update(fields)

    def __len__(self):
        return self.prediction.shape[0]

    def estimate(self, variant):
        """(probability, soft q-bin, hard q-bin) of an estimate variant"""
        if variant == "lower":
            return self.p_lower, self.softqbin_lower, self.hardqbin_lower
        if variant == "upper":
            return self.p_upper, self.softqbin_upper, self.hardqbin_upper
        return self.p_centroid, self.softqbin, self.hardqbin


def calibrate_points(tables, sdm_output, q, prediction, alpha_prime):
    """Runs the chain quantile vector -> soft q-bin -> rescaled output ->
    DKW bounds -> lower/centroid/upper estimates for rows of sdm_output"""
    sdm_output = np.atleast_2d(sdm_output)
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    prediction = np.atleast_1d(np.asarray(prediction, dtype=np.int64))
    v = compute_quantile_vector(tables, sdm_output)
    softqbin, _ = compute_softqbin(q, v, prediction)
    o, p_centroid, ood = rescale_outputs(tables, v, softqbin, prediction)
    softqbin = np.where(ood, 0.0, softqbin)
    n_hat, epsilon, v_lower, v_upper, sq_lower, sq_upper = dkw_adjusted_bounds(
        tables, v, q, softqbin, prediction, alpha_prime
    )
    _, p_lower, ood_lower = rescale_outputs(tables, v_lower, sq_lower, prediction)
    _, p_upper, ood_upper = rescale_outputs(tables, v_upper, sq_upper, prediction)
    sq_lower = np.where(ood_lower, 0.0, sq_lower)
    sq_upper = np.where(ood_upper, 0.0, sq_upper)
    disordered = np.sum((p_lower > p_centroid + 1e-12) | (p_centroid > p_upper + 1e-12))
    if disordered:
        logger.info("%s points with p_lower <= p_centroid <= p_upper violated", disordered)
    return PointUncertainty(
        prediction=prediction,
        q=q,
        v=v,
        v_rescaled=v @ tables.rescaler,
        softqbin=softqbin,
        hardqbin=np.floor(softqbin).astype(np.int64),
        o=o,
        n_hat=n_hat,
        epsilon=epsilon,
        v_lower=v_lower,
        v_upper=v_upper,
        softqbin_lower=sq_lower,
        softqbin_upper=sq_upper,
        hardqbin_lower=np.floor(sq_lower).astype(np.int64),
        hardqbin_upper=np.floor(sq_upper).astype(np.int64),
        p_lower=p_lower,
        p_centroid=p_centroid,
        p_upper=p_upper,
        ood=ood,
        ood_lower=ood_lower,
        ood_upper=ood_upper,
    )


def build_tables(sdm_output, q, d_x, labels, prediction, C, alpha_prime, rescaler_config=None, rng=None, session=None):
    """Fit every calibration table from the calibration split
    :return: (CalibrationTables, PointUncertainty of the calibration points)
    """
    sdm_output = np.atleast_2d(sdm_output)
    labels = np.asarray(labels, dtype=np.int64)
    prediction = np.asarray(prediction, dtype=np.int64)
    q = np.asarray(q, dtype=np.float64)
    out_cdfs = output_cdfs(sdm_output, labels, C)
    v = compute_quantile_vector(out_cdfs, sdm_output)
    softqbin, _ = compute_softqbin(q, v, prediction)
    rescaler = train_rescaler(v, labels, softqbin, rescaler_config, rng, session)
    _, _, ood = rescale_outputs(rescaler, v, softqbin, prediction)
    softqbin = np.where(ood, 0.0, softqbin)
    tables = CalibrationTables(
        distance_cdfs(d_x, labels, q, C),
        out_cdfs,
        [EmpiricalCdf(softqbin[labels == c]) for c in range(C)],
        np.bincount(labels, minlength=C),
        rescaler,
    )
    return tables, calibrate_points(tables, sdm_output, q, prediction, alpha_prime)
