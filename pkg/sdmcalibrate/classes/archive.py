# global imports
import hashlib
import io
import json
import os
import tempfile
import time
from contextlib import contextmanager

import numpy as np
from diskcache import Cache, Lock

# local imports
from sdmcalibrate.classes.calibration import CalibrationTables
from sdmcalibrate.classes.constants import FORMAT_VERSION, LOCK_EXPIRE
from sdmcalibrate.classes.errors import ArchiveError
from sdmcalibrate.classes.estimator import EstimatorArchive, RoundStats
from sdmcalibrate.classes.numerics import AdaptorWeights
from sdmcalibrate.classes.region import RegionThresholds
from sdmcalibrate.classes.similarity import SupportIndex
from sdmcalibrate.classes.stats import EmpiricalCdf
from sdmcalibrate.classes.training import AdaptorModel, TrainingRunConfig

MANIFEST = "manifest.json"
LOCK_DIR = os.path.join(tempfile.gettempdir(), "sdmcalibrate")

ROUND_FIELDS = ("softqbin", "hardqbin", "o", "labels", "prediction", "p_centroid")


def sha256(data):
    return hashlib.sha256(data).hexdigest()


def lock_key(path):
    return "archive:%s" % os.path.abspath(path)


@contextmanager
def writer_lock(path, expire=LOCK_EXPIRE):
    """cross-process lock allowing one writer per archive directory
    :param expire: seconds after which a lock held by a dead writer lapses
    """
    with Cache(LOCK_DIR) as cache:
        with Lock(cache, lock_key(path), expire=expire):
            yield


class ArchiveManifest:
    """Table of contents of an archive directory
    :param checksums: {file name: sha256}
    :param fingerprints: {split name: sha256 of its records}
    """

    def __init__(self, kind, config, checksums, fingerprints=None, created=None, format_version=FORMAT_VERSION):
        self.kind = kind
        self.config = config
        self.checksums = dict(checksums)
        self.fingerprints = dict(fingerprints or {})
        self.created = created or time.strftime("%Y-%m-%dT%H:%M:%S")
        self.format_version = format_version

    def as_dict(self):
        return {
            "kind": self.kind,
            "format_version": self.format_version,
            "created": self.created,
            "config": self.config,
            "checksums": self.checksums,
            "fingerprints": self.fingerprints,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                data["kind"],
                data["config"],
                data["checksums"],
                data.get("fingerprints"),
                data["created"],
                data["format_version"],
            )
        except (KeyError, TypeError) as e:
            raise ArchiveError("incomplete manifest: %s" % e, "corrupt_archive")


class ArchiveWriter:
    """Writes numbered blocks and JSON documents, then the manifest"""

    def __init__(self, path):
        self.path = path
        self.checksums = {}
        os.makedirs(path, exist_ok=True)
        # an archive being rewritten is invalid until its new manifest exists
        if os.path.exists(os.path.join(path, MANIFEST)):
            os.remove(os.path.join(path, MANIFEST))

    def _write(self, name, data):
        with open(os.path.join(self.path, name), "wb") as f:
            f.write(data)
        self.checksums[name] = sha256(data)

    def array(self, name, value, dtype="<f8"):
        buffer = io.BytesIO()
        np.save(buffer, np.ascontiguousarray(np.asarray(value, dtype=dtype)), allow_pickle=False)
        self._write(name + ".npy", buffer.getvalue())

    def document(self, name, value):
        self._write(name + ".json", json.dumps(value, sort_keys=True, indent=2).encode("utf-8"))

    def close(self, kind, config, fingerprints=None, created=None):
        manifest = ArchiveManifest(kind, config, self.checksums, fingerprints, created)
        with open(os.path.join(self.path, MANIFEST), "w", encoding="utf-8") as f:
            json.dump(manifest.as_dict(), f, sort_keys=True, indent=2)
        return manifest


class ArchiveReader:
    """Reads blocks of an archive after checking them against the manifest"""

    def __init__(self, path, kind):
        self.path = path
        try:
            with open(os.path.join(path, MANIFEST), "r", encoding="utf-8") as f:
                self.manifest = ArchiveManifest.from_dict(json.load(f))
        except FileNotFoundError:
            raise ArchiveError("%s has no manifest" % path, "missing_manifest")
        except ValueError as e:
            raise ArchiveError("unreadable manifest: %s" % e, "corrupt_archive")
        if self.manifest.kind != kind:
            raise ArchiveError("%s holds a %s archive, not %s" % (path, self.manifest.kind, kind), "wrong_kind")
        if self.manifest.format_version != FORMAT_VERSION:
            raise ArchiveError(
                "unsupported archive format %s" % self.manifest.format_version, "format_version"
            )

    def _read(self, name):
        expected = self.manifest.checksums.get(name)
        if expected is None:
            raise ArchiveError("%s is not listed in the manifest" % name, "corrupt_archive")
        try:
            with open(os.path.join(self.path, name), "rb") as f:
                data = f.read()
        except OSError as e:
            raise ArchiveError("cannot read %s: %s" % (name, e), "corrupt_archive")
        if sha256(data) != expected:
            raise ArchiveError("checksum mismatch for %s" % name, "checksum_mismatch")
        return data

    def array(self, name):
        try:
            return np.load(io.BytesIO(self._read(name + ".npy")), allow_pickle=False)
        except ValueError as e:
            raise ArchiveError("malformed block %s: %s" % (name, e), "corrupt_archive")

    def document(self, name):
        return json.loads(self._read(name + ".json").decode("utf-8"))


def _thresholds_document(thresholds):
    return {
        "min_valid_qbin": thresholds.min_valid_qbin,
        "psi": None if thresholds.psi is None else thresholds.psi.tolist(),
        "robust_min_valid_qbin": thresholds.robust_min_valid_qbin,
        "offsets": [[p, b, value] for (p, b), value in sorted(thresholds.offsets.items())],
        "scales": [[p, b, value] for (p, b), value in sorted(thresholds.scales.items())],
        "samples": [None if np.isnan(m) else float(m) for m in thresholds.samples],
    }


def _thresholds_from_document(data):
    return RegionThresholds(
        data["min_valid_qbin"],
        data["psi"],
        data["robust_min_valid_qbin"],
        {(p, b): value for p, b, value in data["offsets"]},
        [np.nan if m is None else m for m in data["samples"]],
        {(p, b): value for p, b, value in data["scales"]},
    )


def save_archive(archive, path, created=None):
    """Write an EstimatorArchive directory; the manifest is written last"""
    with writer_lock(path):
        writer = ArchiveWriter(path)
        model = archive.model
        for name, value in model.weights.params().items():
            writer.array("model_" + name, value)
        writer.array("model_mean", model.mean)
        writer.array("model_std", model.std)
        writer.array("model_train_q", model.train_q, "<i8")
        writer.array("model_train_d", model.train_d)
        writer.document(
            "model",
            {
                "train_ids": model.train_ids,
                "calibration_ids": model.calibration_ids,
                "metric": model.metric,
                "nonlinearity": model.nonlinearity,
                "epoch": model.epoch,
                "round": model.round,
            },
        )
        index = archive.index
        writer.array("index_h", index.h)
        writer.array("index_predictions", index.predictions, "<i8")
        writer.array("index_labels", index.labels, "<i8")
        writer.document("index", {"ids": index.ids})
        tables = archive.tables
        for c in range(tables.C):
            writer.array("distance_cdf_%s" % c, tables.distance_cdfs[c].to_array())
            writer.array("output_cdf_%s" % c, tables.output_cdfs[c].to_array())
            writer.array("qbin_cdf_%s" % c, tables.qbin_cdfs[c].to_array())
        writer.array("counts", tables.counts)
        writer.array("rescaler", tables.rescaler)
        writer.document("thresholds", _thresholds_document(archive.thresholds))
        for stats in archive.rounds:
            for field in ROUND_FIELDS:
                dtype = "<i8" if field in ("hardqbin", "labels", "prediction") else "<f8"
                writer.array("round_%s_%s" % (stats.round, field), getattr(stats, field), dtype)
        writer.document(
            "rounds", [{"round": s.round, "min_valid_qbin": s.min_valid_qbin} for s in archive.rounds]
        )
        if archive.calibration_logits is not None:
            writer.array("calibration_logits", archive.calibration_logits)
            writer.array("calibration_labels", archive.calibration_labels, "<i8")
        config = archive.config.as_dict()
        config["alpha"] = archive.alpha
        return writer.close("estimator", config, archive.fingerprints, created)


def load_archive(path):
    """Read and verify an EstimatorArchive directory"""
    reader = ArchiveReader(path, "estimator")
    manifest = reader.manifest
    config = TrainingRunConfig.from_dict(manifest.config)
    meta = reader.document("model")
    weights = AdaptorWeights(reader.array("model_G"), reader.array("model_W"), reader.array("model_b"))
    model = AdaptorModel(
        weights,
        reader.array("model_mean"),
        reader.array("model_std"),
        meta["train_ids"],
        meta["calibration_ids"],
        reader.array("model_train_q"),
        reader.array("model_train_d"),
        meta["metric"],
        meta["nonlinearity"],
        meta["epoch"],
        meta["round"],
    )
    index = SupportIndex(
        reader.array("index_h"),
        reader.array("index_predictions"),
        reader.array("index_labels"),
        reader.document("index")["ids"],
    )
    counts = reader.array("counts")
    C = counts.shape[0]
    tables = CalibrationTables(
        [EmpiricalCdf.from_array(reader.array("distance_cdf_%s" % c)) for c in range(C)],
        [EmpiricalCdf.from_array(reader.array("output_cdf_%s" % c), saturating=True) for c in range(C)],
        [EmpiricalCdf.from_array(reader.array("qbin_cdf_%s" % c)) for c in range(C)],
        counts,
        reader.array("rescaler"),
    )
    if weights.C != C or index.h.shape[1] != weights.M:
        raise ArchiveError("archive blocks have inconsistent shapes", "corrupt_archive")
    rounds = [
        RoundStats(
            entry["round"],
            *[reader.array("round_%s_%s" % (entry["round"], field)) for field in ROUND_FIELDS],
            min_valid_qbin=entry["min_valid_qbin"],
        )
        for entry in reader.document("rounds")
    ]
    logits = labels = None
    if "calibration_logits.npy" in manifest.checksums:
        logits = reader.array("calibration_logits")
        labels = reader.array("calibration_labels")
    return EstimatorArchive(
        model,
        index,
        tables,
        _thresholds_from_document(reader.document("thresholds")),
        config.alpha,
        config,
        rounds,
        logits,
        labels,
        manifest.fingerprints,
        manifest.format_version,
    )
