# global imports
import logging
import math

import numpy as np

# local imports
from sdmcalibrate.classes.activation import sdm_activation, sdm_log_vjp
from sdmcalibrate.classes.archive import ArchiveReader, ArchiveWriter, writer_lock
from sdmcalibrate.classes.constants import EOS, KEPS, N_CONTROL_TOKENS, NET_DEFAULTS, Q_SOFTMAX
from sdmcalibrate.classes.dataset import DatasetBundle, LabeledInstance, load_records, stratified_split
from sdmcalibrate.classes.errors import DatasetError, ShapeError
from sdmcalibrate.classes.estimator import build_estimator, predict_batch
from sdmcalibrate.classes.numerics import OptimizerState, adam_update

logger = logging.getLogger(__name__)

# decoding cap when the training corpus is unknown
DEFAULT_CAP = 32


class ToyLM:
    """Desk-scale autoregressive model with a negative and a positive output head
    The hidden state at position t is tanh(mean(E[x_0..x_t]) @ A); E and A
    stay fixed. W_neg is a frozen copy of W_ref; only W_pos is trained.
    :param E: token embeddings, |V| x D_e
    :param A: fixed hidden map, D_e x D_lm
    """

    def __init__(self, E, A, W_ref, W_neg=None, W_pos=None):
        self.E = np.asarray(E, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.float64)
        self.W_ref = np.asarray(W_ref, dtype=np.float64)
        self.W_neg = self.W_ref.copy() if W_neg is None else np.asarray(W_neg, dtype=np.float64)
        self.W_pos = self.W_ref.copy() if W_pos is None else np.asarray(W_pos, dtype=np.float64)
        if self.E.shape[1] != self.A.shape[0] or self.A.shape[1] != self.W_ref.shape[0]:
            raise ShapeError("inconsistent toy model shapes")
        if self.W_ref.shape[1] != self.V or self.W_neg.shape != self.W_ref.shape or self.W_pos.shape != self.W_ref.shape:
            raise ShapeError("output heads must be D_lm x |V|")

    @property
    def V(self):
        return self.E.shape[0]

    @property
    def D(self):
        return self.A.shape[1]

    @classmethod
    def initialize(cls, V, D, rng, embedding_size=None):
        embedding_size = embedding_size or D
        E = rng.standard_normal((V, embedding_size))
        A = rng.standard_normal((embedding_size, D)) / np.sqrt(embedding_size)
        W_ref = rng.standard_normal((D, V)) / np.sqrt(D)
        return cls(E, A, W_ref)

    def copy(self):
        return ToyLM(self.E, self.A, self.W_ref, self.W_neg, self.W_pos.copy())

    def hidden_states(self, tokens):
        """one hidden state per position, each predicting the following token"""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ShapeError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.V:
            raise ShapeError("token outside the vocabulary of size %s" % self.V)
        prefix_means = np.cumsum(self.E[tokens], axis=0) / np.arange(1, tokens.shape[0] + 1)[:, None]
        return np.tanh(prefix_means @ self.A)

    def joint_logits(self, h):
        """(z_neg, z_pos) concatenated over the last axis"""
        return np.concatenate([h @ self.W_neg, h @ self.W_pos], axis=-1)

    def reference_logits(self, h):
        z_ref = h @ self.W_ref
        return np.concatenate([z_ref, z_ref], axis=-1)


class GenAiInstance:
    """A token sequence with a completion marker and a verification label
    :param marker: position of the completion marker; output tokens follow it
    :param y: 1 for a verified completion, 0 otherwise
    :param task_label: optional label of the underlying task
    """

    def __init__(self, tokens, marker, y, task_label=None, id=None, split=None):
        self.tokens = [int(t) for t in tokens]
        self.marker = int(marker)
        self.y = int(y)
        self.task_label = task_label
        self.id = str(id) if id is not None else None
        self.split = split
        self.q = Q_SOFTMAX
        self.d = 1.0
        if not 0 <= self.marker < len(self.tokens):
            raise DatasetError("marker %s outside a sequence of length %s" % (marker, len(self.tokens)), code="malformed_record")
        if self.y not in (0, 1):
            raise DatasetError("verification label must be 0 or 1", code="label_range")

    @property
    def prompt(self):
        return self.tokens[: self.marker + 1]

    @property
    def completion(self):
        return self.tokens[self.marker + 1 :]

    def to_record(self):
        record = {"id": self.id, "tokens": self.tokens, "marker": self.marker, "y": self.y}
        if self.task_label is not None:
            record["task_label"] = self.task_label
        if self.split is not None:
            record["split"] = self.split
        return record


class TrainingSchedule:
    """Next-token fine-tuning schedule
    beta rises linearly over the mini-batches of each epoch, from beta_min
    at the first batch to one step short of beta_max at the last.
    """

    def __init__(
        self,
        beta_min=NET_DEFAULTS["beta_min"],
        beta_max=NET_DEFAULTS["beta_max"],
        epochs=NET_DEFAULTS["epochs"],
        batch_size=NET_DEFAULTS["batch_size"],
        lr=NET_DEFAULTS["lr"],
        cap_factor=NET_DEFAULTS["cap_factor"],
    ):
        if beta_min > beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.cap_factor = cap_factor

    def beta(self, batch_index, batches_per_epoch):
        step = (self.beta_max - self.beta_min) / max(batches_per_epoch, 1)
        return self.beta_min + step * batch_index

    def as_dict(self):
        return dict(vars(self))


def decode_token(index, V):
    """joint-vocabulary index back to a token symbol"""
    return int(index) % V


def joint_vocab_sdm_forward(lm, prefix, q, d, log_form=False):
    """sdm(z_neg, z_pos) over 2|V| for the token following prefix"""
    h = lm.hidden_states(prefix)[-1]
    return sdm_activation(lm.joint_logits(h), q, d, log_form=log_form)


def _mask(lm, L, L_ref, labels):
    """zeros at both reference peaks, the negative and positive peaks, and the label"""
    V = lm.V
    rows = np.arange(L.shape[0])
    mask = np.ones_like(L)
    ref_peak = np.argmax(L_ref[:, :V], axis=1)
    for index in (ref_peak, ref_peak + V, np.argmax(L[:, :V], axis=1), np.argmax(L[:, V:], axis=1) + V, labels):
        mask[rows, index] = 0.0
    return mask


def _objective(lm, H, labels, q, d, beta, keps=KEPS, s=None):
    """Batch next-token SDM loss plus beta * R', with its W_pos gradient
    R is the batch mean of the masked L2 distances to the reference; the
    exponent s is computed once per batch and carries no gradient.
    """
    H = np.atleast_2d(H)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = labels.shape[0]
    rows = np.arange(n)
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), (n,))
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (n,))
    joint = lm.joint_logits(H)
    L = sdm_activation(joint, q, d, log_form=True, keps=keps)
    L_ref = sdm_activation(lm.reference_logits(H), q, d, log_form=True, keps=keps)
    token_loss = -L[rows, labels]
    llm_loss = float(np.mean(token_loss))
    mask = _mask(lm, L, L_ref, labels)
    diff = mask * (L_ref - L)
    distances = np.sqrt(np.sum(diff ** 2, axis=1))
    R = float(np.mean(distances))
    if s is None:
        s = math.log(llm_loss + keps) / (math.log(R + keps) + keps)
    exponent = min(max(float(s), 0.0), 1.0)
    R_prime = math.sqrt(max(R, 1.0) ** exponent)
    loss = llm_loss + beta * R_prime
    upstream = np.zeros_like(joint)
    upstream[rows, labels] = -1.0 / n
    if R > 1.0:
        dR_prime = 0.5 * exponent * R ** (0.5 * exponent - 1.0)
        dR_dL = -diff / np.where(distances > 0, distances, 1.0)[:, None] / n
        upstream += beta * dR_prime * dR_dL
    grad_joint = sdm_log_vjp(joint, q, d, upstream, keps=keps)
    grad = H.T @ grad_joint[:, lm.V :]
    diagnostics = {
        "R": R,
        "R_prime": R_prime,
        "s": s,
        "mask": mask,
        "distances": distances,
        "token_loss": token_loss,
    }
    return loss, grad, diagnostics


def regularization_term(lm, prefix, label, q, d=1.0, keps=KEPS):
    """R' for the token following prefix, with R, s and the mask"""
    h = lm.hidden_states(prefix)[-1:]
    _, _, diagnostics = _objective(lm, h, [label], q, d, 1.0, keps)
    return diagnostics["R_prime"], {
        "R": diagnostics["R"],
        "s": diagnostics["s"],
        "mask": diagnostics["mask"][0],
    }


def token_rows(lm, instances):
    """hidden states and offset labels of every completion position of y=1 instances"""
    H, labels, q, d = [], [], [], []
    for inst in instances:
        states = lm.hidden_states(inst.tokens)
        positions = np.arange(inst.marker, len(inst.tokens) - 1)
        if positions.size == 0:
            continue
        H.append(states[positions])
        labels.append(np.asarray(inst.tokens)[positions + 1] + lm.V)
        q.append(np.full(positions.size, inst.q, dtype=np.float64))
        d.append(np.full(positions.size, inst.d, dtype=np.float64))
    if not H:
        return np.zeros((0, lm.D)), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    return np.concatenate(H), np.concatenate(labels), np.concatenate(q), np.concatenate(d)


def network_loss_and_grad(lm, instances, beta, keps=KEPS, s=None):
    """next-token SDM loss + beta * R' over the completion tokens of a mini-batch, and dW_pos"""
    H, labels, q, d = token_rows(lm, instances)
    if labels.size == 0:
        raise ShapeError("mini-batch has no completion tokens")
    return _objective(lm, H, labels, q, d, beta, keps, s)


def greedy_decode(lm, prompt, cap):
    """argmax decoding over the joint vocabulary with q = e - 2, d = 1
    :return: (completion tokens, truncated flag)
    """
    tokens = list(prompt)
    completion = []
    while len(completion) < cap:
        h = lm.hidden_states(tokens)[-1]
        token = decode_token(np.argmax(lm.joint_logits(h)), lm.V)
        tokens.append(token)
        completion.append(token)
        if token == EOS:
            return completion, False
    return completion, True


def verification_features(lm, tokens, marker=None):
    """mean hidden state over the sequence and the state predicting the end token"""
    states = lm.hidden_states(tokens)
    start = 0 if marker is None else marker + 1
    ends = [i for i, t in enumerate(tokens) if t == EOS and i >= start]
    at = ends[0] - 1 if ends else len(tokens) - 1
    return np.concatenate([states.mean(axis=0), states[max(at, 0)]])


def completion_cap(instances, cap_factor):
    return cap_factor * max([len(inst.completion) for inst in instances] + [1])


def parse_task_prediction(completion):
    """first non-control token of a completion, as a task label"""
    for token in completion:
        if token >= N_CONTROL_TOKENS:
            return token - N_CONTROL_TOKENS
    return None


def build_verification(lm, train, calibration, config, session):
    """Verification estimator over force-decoded (gold) sequences"""
    D = 2 * lm.D

    def embed(instances, split):
        return [
            LabeledInstance(inst.id, verification_features(lm, inst.tokens, inst.marker), inst.y, inst.task_label, split=split)
            for inst in instances
        ]

    bundle = DatasetBundle(2, D, embed(train, "train"), embed(calibration, "calibration"))
    return build_estimator(bundle, config, session)


def verify_generations(lm, archive, instances, cap, session=None):
    """Greedy completions of each prompt and their verification verdicts"""
    completions, features = [], []
    for inst in instances:
        completion, truncated = greedy_decode(lm, inst.prompt, cap)
        tokens = inst.prompt + completion
        completions.append((completion, truncated))
        features.append(verification_features(lm, tokens, inst.marker))
    if not instances:
        return [], []
    verdicts = predict_batch(
        archive, np.stack(features), [inst.id for inst in instances], [inst.y for inst in instances], session=session
    )
    return completions, verdicts


def admitted_count(completions, verdicts, instances):
    """admitted verified (prediction 1) generations, task-correct where labelled"""
    count = 0
    for (completion, _), verdict, inst in zip(completions, verdicts, instances):
        if not verdict.admitted or verdict.prediction != 1:
            continue
        if inst.task_label is not None and parse_task_prediction(completion) != inst.task_label:
            continue
        count += 1
    return count


def refresh_qd(lm, archive, instances, cap, session=None):
    """cache (q, d) of each instance from the verdict on its throwaway completion"""
    _, verdicts = verify_generations(lm, archive, instances, cap, session)
    for inst, verdict in zip(instances, verdicts):
        inst.q = float(verdict.q)
        inst.d = float(verdict.d)


class NetworkTrainingResult:
    def __init__(self, lm, epoch, metric, reference_metric, history):
        self.lm = lm
        self.epoch = epoch
        self.metric = metric
        self.reference_metric = reference_metric
        self.history = history


def sdm_network_train(train, calibration, archive, lm, schedule, session, keep_reference=True):
    """Fine-tune W_pos against the verification estimator
    Epochs are compared on the count of admitted verified calibration
    generations; with keep_reference the untrained weights stay selected
    unless an epoch beats them.
    :param train: GenAiInstances of the train split
    :param calibration: GenAiInstances the metric is counted over
    """
    rng = session.rng(1)
    lm = lm.copy()
    positives = [inst for inst in train if inst.y == 1]
    cap = completion_cap(train + calibration, schedule.cap_factor)
    completions, verdicts = verify_generations(lm, archive, calibration, cap, session)
    reference_metric = admitted_count(completions, verdicts, calibration)
    session.write_log("admitted calibration generations before fine-tuning: %s" % reference_metric)
    best = NetworkTrainingResult(lm.copy(), 0, reference_metric, reference_metric, []) if keep_reference else None
    history = []
    state = OptimizerState()
    batches = max(1, math.ceil(len(positives) / schedule.batch_size))
    beta = schedule.beta_min
    refresh_qd(lm, archive, positives, cap, session)
    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(len(positives))
        total = 0.0
        for b in range(batches):
            batch = [positives[i] for i in order[b * schedule.batch_size : (b + 1) * schedule.batch_size]]
            if not batch:
                continue
            beta = schedule.beta(b, batches)
            loss, grad, _ = network_loss_and_grad(lm, batch, beta)
            total += loss
            lm.W_pos = adam_update(state, {"W_pos": lm.W_pos}, {"W_pos": grad}, schedule.lr)["W_pos"]
        refresh_qd(lm, archive, positives, cap, session)
        completions, verdicts = verify_generations(lm, archive, calibration, cap, session)
        metric = admitted_count(completions, verdicts, calibration)
        history.append(metric)
        session.progress(epoch=epoch, loss=total / batches, metric=metric, beta=beta)
        if best is None or metric > best.metric:
            best = NetworkTrainingResult(lm.copy(), epoch, metric, reference_metric, history)
    best.history = history
    session.write_log("selected epoch %s with %s admitted generations" % (best.epoch, best.metric))
    return best


def generate_verified(lm, archive, prompt, cap=None, id=None, session=None):
    """Greedy completion of a prompt and the verdict on it
    :return: (completion tokens, truncated flag, Verdict)
    """
    prompt = [int(t) for t in prompt]
    cap = cap or DEFAULT_CAP
    completion, truncated = greedy_decode(lm, prompt, cap)
    if truncated:
        logger.warning("generation for %s reached the length cap of %s tokens", id, cap)
    features = verification_features(lm, prompt + completion, len(prompt) - 1)
    verdict = predict_batch(archive, features[None, :], [id], session=session)[0]
    return completion, truncated, verdict


def parse_genai(record, line_number):
    try:
        return GenAiInstance(
            record["tokens"],
            record["marker"],
            record["y"],
            record.get("task_label"),
            record.get("id", "doc%s" % line_number),
            record.get("split"),
        )
    except KeyError as e:
        raise DatasetError("missing key %s" % e, line_number, "malformed_record")
    except (TypeError, ValueError) as e:
        raise DatasetError("malformed record: %s" % e, line_number, "malformed_record")
    except DatasetError as e:
        raise DatasetError(e.message, line_number, e.code)


def load_corpus(path, seed=0):
    """(train, calibration, test) GenAiInstances of a corpus file
    Records without a split are divided evenly between train and
    calibration, stratified on y.
    """
    instances = [parse_genai(record, i) for i, record in enumerate(load_records(path), 1)]
    splits = {"train": [], "calibration": [], "test": []}
    rest = []
    for inst in instances:
        if inst.split in splits:
            splits[inst.split].append(inst)
        else:
            rest.append(inst)
    if rest:
        first, second = stratified_split(np.array([inst.y for inst in rest]), np.random.default_rng([seed, 0]))
        splits["train"] += [rest[i] for i in first]
        splits["calibration"] += [rest[i] for i in second]
    return splits["train"], splits["calibration"], splits["test"]


def save_lm(lm, path, schedule=None, extra=None):
    with writer_lock(path):
        writer = ArchiveWriter(path)
        for name in ("E", "A", "W_ref", "W_neg", "W_pos"):
            writer.array(name, getattr(lm, name))
        config = {"V": lm.V, "D": lm.D}
        if schedule is not None:
            config["schedule"] = schedule.as_dict()
        config.update(extra or {})
        return writer.close("toy_lm", config)


def load_lm(path):
    reader = ArchiveReader(path, "toy_lm")
    lm = ToyLM(*[reader.array(name) for name in ("E", "A", "W_ref", "W_neg", "W_pos")])
    return lm, reader.manifest.config
