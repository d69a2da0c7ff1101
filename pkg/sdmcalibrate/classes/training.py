# global imports
import numpy as np

# local imports
from sdmcalibrate.classes.activation import sdm_activation
from sdmcalibrate.classes.calibration import RescalerConfig, build_tables
from sdmcalibrate.classes.constants import DEFAULTS, KEPS, Q_SOFTMAX
from sdmcalibrate.classes.dataset import arrays, stratified_split
from sdmcalibrate.classes.errors import TrainingError
from sdmcalibrate.classes.numerics import (
    AdaptorWeights,
    NumericsConfig,
    OptimizerState,
    adam_update,
    adaptor_forward,
    fold,
    hidden_layer,
    normalize,
    sdm_loss_and_grad,
)
from sdmcalibrate.classes.region import centroid_bin_medians, find_min_valid_qbin
from sdmcalibrate.classes.similarity import (
    SupportIndex,
    distance_cdfs,
    distance_quantile_d,
)


class TrainingRunConfig(NumericsConfig):
    """Settings of the SDM layer training loop
    :param j: number of reshuffled rounds
    :param max_epochs: epochs per round
    :param alpha: target probability alpha'
    :param m: number of filters
    :param ce_only: keep q = e - 2, d = 1 in every epoch
    :param top_k: exemplar ids reported per verdict
    :param rescaler: RescalerConfig of the rescaling layer
    """

    def __init__(
        self,
        j=DEFAULTS["j"],
        max_epochs=DEFAULTS["max_epochs"],
        batch_size=DEFAULTS["batch_size"],
        lr=DEFAULTS["lr"],
        alpha=DEFAULTS["alpha"],
        m=DEFAULTS["m"],
        seed=DEFAULTS["seed"],
        kernel_span=None,
        nonlinearity=False,
        ce_only=False,
        top_k=DEFAULTS["top_k"],
        keps=KEPS,
        rescaler=None,
    ):
        if j < 1 or max_epochs < 1:
            raise ValueError("j and max_epochs must be at least 1")
        super().__init__(keps, lr, batch_size, seed, kernel_span, nonlinearity)
        self.j = j
        self.max_epochs = max_epochs
        self.alpha = alpha
        self.m = m
        self.ce_only = ce_only
        self.top_k = top_k
        self.rescaler = rescaler or RescalerConfig()

    def as_dict(self):
        data = {k: v for k, v in vars(self).items() if k != "rescaler"}
        data["rescaler"] = self.rescaler.as_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        rescaler = RescalerConfig(**data.pop("rescaler", {}))
        return cls(rescaler=rescaler, **data)


class AdaptorModel:
    """Trained adaptor with its normalization and frozen splits"""

    def __init__(
        self,
        weights,
        mean,
        std,
        train_ids,
        calibration_ids,
        train_q,
        train_d,
        metric,
        nonlinearity=False,
        epoch=None,
        round=None,
    ):
        self.weights = weights
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.train_ids = list(train_ids)
        self.calibration_ids = list(calibration_ids)
        self.train_q = np.asarray(train_q)
        self.train_d = np.asarray(train_d)
        self.metric = metric
        self.nonlinearity = nonlinearity
        self.epoch = epoch
        self.round = round

    def forward(self, X):
        h, z = adaptor_forward(self.weights, np.atleast_2d(X), self.mean, self.std, self.nonlinearity)
        return h, z


class RoundResult:
    """Winning epoch of one round and the calibration statistics it yields"""

    def __init__(self, **fields):
        self.__dict__.update(fields)


def balanced_median_q(q, labels, C):
    """mean over true classes of the median q within the class"""
    q = np.asarray(q, dtype=np.float64)
    labels = np.asarray(labels)
    medians = []
    for c in range(C):
        members = q[labels == c]
        if members.size == 0:
            raise TrainingError("class %s has no calibration points" % c)
        medians.append(np.median(members))
    return float(np.mean(medians))


def _refresh(weights, u_train, y_train, ids, u_cal, nonlinearity, C, session=None):
    """support index over train, train q/d (self excluded) and calibration q/d_x"""
    h_train = hidden_layer(weights, u_train, nonlinearity)
    pred_train = np.argmax(h_train @ weights.W + weights.b, axis=1)
    index = SupportIndex(h_train, pred_train, y_train, ids)
    n = h_train.shape[0]
    q_train, dx_train, _ = index.query(h_train, pred_train, exclude_rows=np.arange(n), session=session)
    d_train, _ = distance_quantile_d(distance_cdfs(dx_train, y_train, q_train, C), dx_train)
    h_cal = hidden_layer(weights, u_cal, nonlinearity)
    z_cal = h_cal @ weights.W + weights.b
    pred_cal = np.argmax(z_cal, axis=1)
    q_cal, dx_cal, _ = index.query(h_cal, pred_cal, session=session)
    return index, q_train, d_train, z_cal, pred_cal, q_cal, dx_cal


def train_single_round(train, calibration, C, config, rng, session=None, round_index=0):
    """Train one round and return the epoch with the highest balanced median q
    :param train: (X, y, ids) of the train split
    :param calibration: (X, y, ids) of the calibration split
    """
    X_train, y_train, train_ids = train
    X_cal, y_cal, cal_ids = calibration
    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)
    u_train = fold(normalize(X_train, mean, std, config.keps), config.kernel_span)
    u_cal = fold(normalize(X_cal, mean, std, config.keps), config.kernel_span)
    weights = AdaptorWeights.initialize(X_train.shape[1], C, config.m, rng, config.kernel_span)
    state = OptimizerState()
    n = y_train.shape[0]
    q = np.full(n, Q_SOFTMAX)
    d = np.ones(n)
    best = None
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grads = sdm_loss_and_grad(
                weights, u_train[batch], y_train[batch], q[batch], d[batch], config.nonlinearity, config.keps
            )
            total += loss * batch.shape[0]
            params = adam_update(state, weights.params(), grads, config.lr)
            weights = AdaptorWeights(params["G"], params["W"], params["b"])
        _, q_train, d_train, _, _, q_cal, _ = _refresh(
            weights, u_train, y_train, train_ids, u_cal, config.nonlinearity, C, session
        )
        metric = balanced_median_q(q_cal, y_cal, C)
        if session is not None:
            session.progress(round=round_index, epoch=epoch, loss=total / n, metric=metric)
        if best is None or metric > best["metric"]:
            best = {
                "weights": weights.copy(),
                "epoch": epoch,
                "metric": metric,
                "train_q": q_train,
                "train_d": d_train,
            }
        if not config.ce_only:
            q, d = q_train.astype(np.float64), d_train
    return AdaptorModel(
        best["weights"],
        mean,
        std,
        train_ids,
        cal_ids,
        best["train_q"],
        best["train_d"],
        best["metric"],
        config.nonlinearity,
        best["epoch"],
        round_index,
    )


def round_statistics(model, train, calibration, C, config, rng, session=None):
    """Calibration chain of a trained round, its region search and bin medians"""
    X_train, y_train, train_ids = train
    X_cal, y_cal, _ = calibration
    u_train = fold(normalize(X_train, model.mean, model.std, config.keps), config.kernel_span)
    u_cal = fold(normalize(X_cal, model.mean, model.std, config.keps), config.kernel_span)
    index, _, _, z_cal, pred_cal, q_cal, dx_cal = _refresh(
        model.weights, u_train, y_train, train_ids, u_cal, config.nonlinearity, C, session
    )
    d_cal, _ = distance_quantile_d(distance_cdfs(dx_cal, y_cal, q_cal, C), dx_cal)
    sdm_output = sdm_activation(z_cal, q_cal, d_cal, keps=config.keps)
    tables, points = build_tables(
        sdm_output, q_cal, dx_cal, y_cal, pred_cal, C, config.alpha, config.rescaler, rng, session
    )
    min_valid, psi = find_min_valid_qbin(points.softqbin, points.o, y_cal, points.hardqbin, config.alpha, C)
    return RoundResult(
        model=model,
        index=index,
        tables=tables,
        points=points,
        labels=y_cal,
        z=z_cal,
        min_valid_qbin=min_valid,
        psi=psi,
        bin_medians=centroid_bin_medians(points.p_centroid, pred_cal, points.hardqbin),
    )


def train_full(bundle, config, session):
    """Run J reshuffled rounds and keep the round with the best metric
    :return: (winning RoundResult, list of every RoundResult)
    """
    pooled = bundle.train + bundle.calibration
    X, y, ids = arrays(pooled, bundle.D)

    def run_round(j):
        rng = session.rng(j)
        first, second = stratified_split(y, rng)
        train = (X[first], y[first], [ids[i] for i in first])
        calibration = (X[second], y[second], [ids[i] for i in second])
        model = train_single_round(train, calibration, bundle.C, config, rng, session, j)
        return round_statistics(model, train, calibration, bundle.C, config, rng, session)

    rounds = session.map(run_round, range(config.j))
    best = None
    for result in rounds:
        if best is None or result.model.metric > best.model.metric:
            best = result
    session.write_log(
        "selected round %s epoch %s metric %.6g" % (best.model.round, best.model.epoch, best.model.metric)
    )
    return best, rounds
