# global imports
import hashlib
import json
import logging
from collections import Counter

import numpy as np

# local imports
from sdmcalibrate.classes.constants import ANSWER_LETTERS, LETTER_INDEX, LLM_RESPONSE_KEYS
from sdmcalibrate.classes.errors import DatasetError

logger = logging.getLogger(__name__)

SPLITS = ("train", "calibration", "test")
RECORD_KEYS = ("id", "label", "task_label", "embedding", "text", "split")


class LabeledInstance:
    """One embedded instance
    :param id: unique id within its split
    :param embedding: real vector of the bundle dimension
    :param label: class index
    :param task_label: optional underlying task label
    :param text: optional provenance text
    """

    def __init__(self, id, embedding, label, task_label=None, text=None, split=None):
        self.id = str(id)
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.label = int(label)
        self.task_label = task_label
        self.text = text
        self.split = split

    def to_record(self):
        record = {"id": self.id, "label": self.label}
        if self.task_label is not None:
            record["task_label"] = self.task_label
        record["embedding"] = self.embedding.tolist()
        if self.text is not None:
            record["text"] = self.text
        if self.split is not None:
            record["split"] = self.split
        return record


class DatasetBundle:
    """Train, calibration and test instances sharing C and D"""

    def __init__(self, C, D, train=(), calibration=(), test=()):
        self.C = C
        self.D = D
        self.train = list(train)
        self.calibration = list(calibration)
        self.test = list(test)

    def split(self, name):
        return getattr(self, name)

    def counts(self, name):
        counts = Counter(inst.label for inst in self.split(name))
        return {c: counts.get(c, 0) for c in range(self.C)}

    def fingerprint(self, name):
        digest = hashlib.sha256()
        for inst in self.split(name):
            digest.update(json.dumps(inst.to_record(), sort_keys=True).encode("utf-8"))
        return digest.hexdigest()


def arrays(instances, D=None):
    """(embeddings, labels, ids) of a list of instances"""
    if not instances:
        return np.zeros((0, D or 0)), np.zeros(0, dtype=np.int64), []
    X = np.stack([inst.embedding for inst in instances])
    y = np.array([inst.label for inst in instances], dtype=np.int64)
    return X, y, [inst.id for inst in instances]


def load_records(path):
    """parse a JSON-lines file, keeping every record as written"""
    records = []
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DatasetError("cannot read %s: %s" % (path, e.strerror or e), code="unreadable_file")
    with f:
        for line_number, raw in enumerate(f, 1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise DatasetError("%s is not UTF-8: %s" % (path, e.reason), line_number, "unreadable_file")
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as e:
                raise DatasetError("malformed record: %s" % e, line_number, "malformed_record")
            if not isinstance(record, dict):
                raise DatasetError("record is not an object", line_number, "malformed_record")
            records.append(record)
    return records


def serialize_records(records, f):
    for record in records:
        f.write(json.dumps(record, ensure_ascii=False) + "\n")


def parse_instance(record, line_number, C=None, D=None):
    for key in ("id", "label", "embedding"):
        if key not in record:
            raise DatasetError("missing key %r" % key, line_number, "malformed_record")
    try:
        embedding = np.asarray(record["embedding"], dtype=np.float64)
        label = int(record["label"])
    except (TypeError, ValueError) as e:
        raise DatasetError("malformed record: %s" % e, line_number, "malformed_record")
    if embedding.ndim != 1:
        raise DatasetError("embedding must be a flat list", line_number, "malformed_record")
    if D is not None and embedding.shape[0] != D:
        raise DatasetError(
            "embedding length %s does not match dimension %s" % (embedding.shape[0], D),
            line_number,
            "dimension_mismatch",
        )
    if not np.all(np.isfinite(embedding)):
        raise DatasetError("non-finite embedding entry", line_number, "malformed_record")
    if label < 0 or (C is not None and label >= C):
        raise DatasetError("label %s out of range for %s classes" % (label, C), line_number, "label_range")
    split = record.get("split")
    if split is not None and split not in SPLITS:
        raise DatasetError("unknown split %r" % split, line_number, "malformed_record")
    return LabeledInstance(
        record["id"],
        embedding,
        label,
        record.get("task_label"),
        record.get("text"),
        split,
    )


def load_instances(path, C=None, D=None):
    """every record of a dataset file as instances, in file order"""
    records = load_records(path)
    if D is None and records and "embedding" in records[0]:
        D = len(records[0]["embedding"])
    return [parse_instance(record, i, C, D) for i, record in enumerate(records, 1)]


def stratified_split(labels, rng):
    """seeded 50/50 split of row indexes, stratified by label"""
    labels = np.asarray(labels)
    first, second = [], []
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        half = (rows.shape[0] + 1) // 2
        first.append(rows[:half])
        second.append(rows[half:])
    if not first:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def check_balance(bundle, name, tolerance):
    counts = bundle.counts(name)
    if max(counts.values()) - min(counts.values()) > tolerance:
        raise DatasetError(
            "%s split is not class balanced: %s (tolerance %s)" % (name, counts, tolerance),
            code="imbalance",
        )
    return counts


def check_unique(instances, name):
    seen = set()
    for inst in instances:
        if inst.id in seen:
            raise DatasetError("duplicate id %r in %s split" % (inst.id, name), code="duplicate_id")
        seen.add(inst.id)


def load_and_validate(path, expected_C, tolerance=0, seed=0):
    """Load a dataset file into a validated bundle
    Records carrying a "split" key are placed there; the others are
    pooled and split 50/50 into train and calibration, stratified by
    label with the given seed.
    """
    instances = load_instances(path, expected_C)
    if not instances:
        raise DatasetError("empty dataset", code="empty_dataset")
    D = instances[0].embedding.shape[0]
    bundle = DatasetBundle(expected_C, D)
    pooled = []
    for inst in instances:
        if inst.split is None:
            pooled.append(inst)
        else:
            bundle.split(inst.split).append(inst)
    if pooled:
        first, second = stratified_split(
            [inst.label for inst in pooled], np.random.default_rng([seed, 0])
        )
        bundle.train.extend(pooled[i] for i in first)
        bundle.calibration.extend(pooled[i] for i in second)
    for name in SPLITS:
        check_unique(bundle.split(name), name)
    for name in ("train", "calibration"):
        counts = check_balance(bundle, name, tolerance)
        logger.info("%s class counts: %s", name, counts)
    return bundle


class LlmResponseRecord:
    """Structured answer of a black-box LLM with its top-1 token log-probabilities
    :param fields: the parsed JSON object (None for a refusal)
    :param tokens: generated tokens, concatenating to the JSON text
    :param logprobs: top-1 log-probability of each token
    :param spans: optional token ranges per key, derived from the text otherwise
    """

    def __init__(self, fields, tokens, logprobs, id=None, label=None, spans=None):
        self.fields = fields
        self.tokens = list(tokens)
        self.logprobs = np.asarray(logprobs, dtype=np.float64)
        self.id = id
        self.label = label
        if self.logprobs.shape[0] != len(self.tokens):
            raise DatasetError("tokens and logprobs differ in length", code="malformed_record")
        if np.any(self.logprobs > 0):
            raise DatasetError("positive log-probability", code="malformed_record")
        self._spans = spans

    @property
    def text(self):
        return "".join(self.tokens)

    @property
    def answer_letter(self):
        return (self.fields or {}).get(LLM_RESPONSE_KEYS[0])

    @property
    def confidence(self):
        try:
            value = float((self.fields or {}).get(LLM_RESPONSE_KEYS[1]))
        except (TypeError, ValueError):
            return None
        return min(max(value, 0.0), 1.0)

    @property
    def refused(self):
        if not self.fields or any(key not in self.fields for key in LLM_RESPONSE_KEYS):
            return True
        return self.answer_letter not in LETTER_INDEX or self.confidence is None

    def spans(self):
        if self._spans is None:
            self._spans = value_token_spans(self.tokens, LLM_RESPONSE_KEYS)
        return self._spans

    @classmethod
    def from_record(cls, record, line_number=None):
        try:
            pairs = record.get("token_logprobs") or []
            tokens = [pair["token"] for pair in pairs]
            logprobs = [float(pair["logprob"]) for pair in pairs]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError("malformed token_logprobs: %s" % e, line_number, "malformed_record")
        fields = {key: record[key] for key in LLM_RESPONSE_KEYS if key in record} or None
        try:
            return cls(fields, tokens, logprobs, record.get("id"), record.get("label"))
        except DatasetError as e:
            raise DatasetError(e.message, line_number, e.code)


def value_token_spans(tokens, keys):
    """Token index ranges [start, end) covering the value of each key
    String values exclude the surrounding quotes. Keys missing from the
    text are absent from the result.
    """
    text = "".join(tokens)
    bounds = np.cumsum([0] + [len(token) for token in tokens])
    decoder = json.JSONDecoder()
    spans = {}
    for key in keys:
        marker = '"%s"' % key
        at = text.find(marker)
        if at < 0:
            continue
        colon = text.find(":", at + len(marker))
        if colon < 0:
            continue
        start = colon + 1
        while start < len(text) and text[start].isspace():
            start += 1
        try:
            _, end = decoder.raw_decode(text, start)
        except ValueError:
            continue
        if text[start] == '"':
            start, end = start + 1, end - 1
        first = int(np.searchsorted(bounds, start, side="right")) - 1
        last = int(np.searchsorted(bounds, end, side="left"))
        spans[key] = (first, max(first, last))
    return spans


def build_llm_features(record):
    """Seven-value embedding of an LLM response
    :return: (vector, refused flag); refusals map to zeros
    """
    features = np.zeros(3 + len(ANSWER_LETTERS))
    if record.refused:
        return features, True
    spans = record.spans()
    for i, key in enumerate(LLM_RESPONSE_KEYS):
        if key not in spans:
            continue
        start, end = spans[key]
        if end > start:
            features[i] = float(np.mean(np.exp(record.logprobs[start:end])))
    features[3 + LETTER_INDEX[record.answer_letter]] = record.confidence
    return features, False


def load_llm_responses(path):
    return [LlmResponseRecord.from_record(r, i) for i, r in enumerate(load_records(path), 1)]
