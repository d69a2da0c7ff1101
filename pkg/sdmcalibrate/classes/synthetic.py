# global imports
import numpy as np

# local imports
from sdmcalibrate.classes.constants import BOS, EOS, MARKER, N_CONTROL_TOKENS
from sdmcalibrate.classes.dataset import DatasetBundle, LabeledInstance
from sdmcalibrate.classes.network import GenAiInstance


def blob_centers(C, D, separation):
    """class c centered at separation along axis c (wrapping when C > D)"""
    centers = np.zeros((C, D))
    for c in range(C):
        centers[c, c % D] += separation * (1 + c // D)
    return centers


def gaussian_blobs(n_per_class, C, D, rng, separation=3.0, sigma=1.0, shift=0.0, prefix="x", split=None):
    """Isotropic Gaussian clusters, classes interleaved
    :param shift: added to every coordinate of every mean, in units of sigma
    """
    centers = blob_centers(C, D, separation) + shift * sigma
    instances = []
    for i in range(n_per_class):
        for c in range(C):
            point = centers[c] + sigma * rng.standard_normal(D)
            instances.append(LabeledInstance("%s%s" % (prefix, len(instances)), point, c, split=split))
    return instances


def blob_bundle(n_train, n_calibration, n_test, C=2, D=8, separation=3.0, seed=0):
    """DatasetBundle of blobs; sizes are totals, split evenly over classes"""
    rng = np.random.default_rng(seed)
    return DatasetBundle(
        C,
        D,
        gaussian_blobs(n_train // C, C, D, rng, separation, prefix="tr", split="train"),
        gaussian_blobs(n_calibration // C, C, D, rng, separation, prefix="ca", split="calibration"),
        gaussian_blobs(n_test // C, C, D, rng, separation, prefix="te", split="test"),
    )


def shifted_blobs(n, C=2, D=8, separation=3.0, shift=5.0, seed=1):
    """out-of-distribution test set: every mean translated by shift sigma"""
    rng = np.random.default_rng(seed)
    return gaussian_blobs(n // C, C, D, rng, separation, shift=shift, prefix="ood", split="test")


def flip_labels(instances, fraction, rng, C=None):
    """Relabel a fraction of the instances to a different class
    :return: (new instances, ids of the flipped ones)
    """
    C = C or max(inst.label for inst in instances) + 1
    chosen = set(rng.choice(len(instances), size=int(round(fraction * len(instances))), replace=False).tolist())
    out, flipped = [], []
    for i, inst in enumerate(instances):
        label = inst.label
        if i in chosen:
            label = (label + 1 + int(rng.integers(C - 1))) % C
            flipped.append(inst.id)
        out.append(LabeledInstance(inst.id, inst.embedding, label, inst.task_label, inst.text, inst.split))
    return out, flipped


def toy_corpus(n, K=4, corrupted_fraction=0.5, seed=0, split=None, prefix="doc"):
    """Sequences [BOS, a, b, MARKER, answer, EOS] with answer = (a + b) mod K
    Corrupted sequences (y = 0) carry a wrong answer. Operand and answer
    symbols are offset past the control tokens; task_label is the correct
    answer value.
    :return: (list of GenAiInstance, vocabulary size)
    """
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(n):
        a, b = (int(v) for v in rng.integers(K, size=2))
        correct = (a + b) % K
        answer = correct
        y = 0 if rng.uniform() < corrupted_fraction else 1
        if y == 0:
            answer = (answer + 1 + int(rng.integers(K - 1))) % K
        tokens = [BOS, a + N_CONTROL_TOKENS, b + N_CONTROL_TOKENS, MARKER, answer + N_CONTROL_TOKENS, EOS]
        instances.append(
            GenAiInstance(tokens, 3, y, correct, "%s%s" % (prefix, i), split)
        )
    return instances, K + N_CONTROL_TOKENS
