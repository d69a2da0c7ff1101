"""Synthetic blobs, label flips and the toy corpus."""

import numpy as np

from sdmcalibrate.classes.constants import BOS, EOS, MARKER, N_CONTROL_TOKENS
from sdmcalibrate.classes.synthetic import blob_bundle, flip_labels, shifted_blobs, toy_corpus


def test_bundle_is_balanced():
    bundle = blob_bundle(40, 40, 20, C=4, D=3, seed=2)
    assert bundle.counts("train") == {0: 10, 1: 10, 2: 10, 3: 10}
    assert bundle.test[0].id.startswith("te")
    assert bundle.train[0].embedding.shape == (3,)


def test_same_seed_same_points():
    a = blob_bundle(10, 10, 10, seed=5)
    b = blob_bundle(10, 10, 10, seed=5)
    np.testing.assert_array_equal(a.train[3].embedding, b.train[3].embedding)


def test_shifted_blobs_far_from_training():
    bundle = blob_bundle(200, 2, 2, D=4, seed=0)
    ood = shifted_blobs(200, D=4, shift=5.0)
    train_mean = np.mean([inst.embedding for inst in bundle.train], axis=0)
    ood_mean = np.mean([inst.embedding for inst in ood], axis=0)
    assert np.all(ood_mean - train_mean > 4.0)
    assert ood[0].id.startswith("ood")


def test_flip_labels():
    bundle = blob_bundle(2, 2, 100, C=3, seed=0)
    flipped, ids = flip_labels(bundle.test, 0.2, np.random.default_rng(0), 3)
    assert len(ids) == 20
    changed = {new.id for old, new in zip(bundle.test, flipped) if old.label != new.label}
    assert changed == set(ids)


def test_toy_corpus():
    instances, V = toy_corpus(50, K=4, seed=0)
    assert V == 4 + N_CONTROL_TOKENS
    for inst in instances:
        assert inst.tokens[0] == BOS and inst.tokens[3] == MARKER and inst.tokens[-1] == EOS
        a, b, answer = (t - N_CONTROL_TOKENS for t in (inst.tokens[1], inst.tokens[2], inst.tokens[4]))
        assert inst.task_label == (a + b) % 4
        assert inst.y == int(answer == inst.task_label)
    assert 0 < sum(inst.y for inst in instances) < 50
