"""Estimator archives on disk: round trip, checksums and refusal to load damage."""

import json
import os
import time

import numpy as np
import pytest
from diskcache import Cache, Lock

from sdmcalibrate.classes import archive as archive_module
from sdmcalibrate.classes.archive import MANIFEST, load_archive, lock_key, save_archive
from sdmcalibrate.classes.dataset import arrays
from sdmcalibrate.classes.errors import ArchiveError
from sdmcalibrate.classes.estimator import build_estimator, predict_batch
from sdmcalibrate.classes.network import ToyLM, save_lm
from sdmcalibrate.classes.session import Session

from conftest import small_config


@pytest.fixture
def saved(trained, tmp_path):
    path = str(tmp_path / "archive")
    manifest = save_archive(trained, path)
    return path, manifest


def test_round_trip_gives_identical_verdicts(trained, blobs, saved):
    path, _ = saved
    restored = load_archive(path)
    X, y, ids = arrays(blobs.test, blobs.D)
    before = [v.to_json() for v in predict_batch(trained, X, ids, y)]
    after = [v.to_json() for v in predict_batch(restored, X, ids, y)]
    assert before == after
    assert restored.alpha == trained.alpha
    np.testing.assert_array_equal(restored.tables.rescaler, trained.tables.rescaler)


def test_checksums_stable_across_saves(trained, saved, tmp_path):
    _, first = saved
    second = save_archive(trained, str(tmp_path / "again"))
    assert first.checksums == second.checksums
    assert MANIFEST not in first.checksums


def test_corrupted_block(saved):
    path, _ = saved
    with open(os.path.join(path, "rescaler.npy"), "r+b") as f:
        f.seek(-1, os.SEEK_END)
        last = f.read(1)
        f.seek(-1, os.SEEK_END)
        f.write(bytes([last[0] ^ 0xFF]))
    with pytest.raises(ArchiveError) as error:
        load_archive(path)
    assert error.value.code == "checksum_mismatch"


def test_missing_manifest(saved):
    path, _ = saved
    os.remove(os.path.join(path, MANIFEST))
    with pytest.raises(ArchiveError) as error:
        load_archive(path)
    assert error.value.code == "missing_manifest"


def test_unknown_format_version(saved):
    path, _ = saved
    with open(os.path.join(path, MANIFEST)) as f:
        data = json.load(f)
    data["format_version"] = 999
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(data, f)
    with pytest.raises(ArchiveError) as error:
        load_archive(path)
    assert error.value.code == "format_version"


def test_wrong_kind(tmp_path):
    path = str(tmp_path / "lm")
    save_lm(ToyLM.initialize(5, 4, np.random.default_rng(0)), path)
    with pytest.raises(ArchiveError) as error:
        load_archive(path)
    assert error.value.code == "wrong_kind"


def test_independent_runs_write_identical_archives(trained, blobs, saved, tmp_path):
    _, first = saved
    rerun = build_estimator(blobs, small_config(), Session(seed=0, threads=1))
    second = save_archive(rerun, str(tmp_path / "rerun"))
    assert first.checksums == second.checksums


def test_lock_of_dead_writer_lapses(trained, tmp_path, monkeypatch):
    locks = str(tmp_path / "locks")
    monkeypatch.setattr(archive_module, "LOCK_DIR", locks)
    path = str(tmp_path / "archive")
    with Cache(locks) as cache:
        # acquired and never released
        Lock(cache, lock_key(path), expire=0.2).acquire()
    time.sleep(0.5)
    save_archive(trained, path)
    with Cache(locks) as cache:
        assert lock_key(path) not in cache
