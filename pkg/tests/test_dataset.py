"""Dataset files, validation errors and LLM response features."""

import json

import numpy as np
import pytest

from sdmcalibrate.classes.dataset import (
    LlmResponseRecord,
    build_llm_features,
    load_and_validate,
    stratified_split,
    value_token_spans,
)
from sdmcalibrate.classes.errors import DatasetError

RESPONSE_TOKENS = [
    '{"answer_letter": "',
    "B",
    '", "confidence_in_answer_letter": ',
    "0.9",
    ', "short_explanation_for_answer_confidence": "',
    "ok",
    '"}',
]
RESPONSE_KEYS = (
    "answer_letter",
    "confidence_in_answer_letter",
    "short_explanation_for_answer_confidence",
)


def write_lines(path, records):
    with open(path, "w") as f:
        for record in records:
            f.write((record if isinstance(record, str) else json.dumps(record)) + "\n")
    return str(path)


def record(i, label, D=3, **extra):
    data = {"id": "r%s" % i, "label": label, "embedding": [float(i)] * D}
    data.update(extra)
    return data


class TestLoadAndValidate:
    def test_pooled_records_split_evenly(self, tmp_path):
        path = write_lines(tmp_path / "d.jsonl", [record(i, i % 2) for i in range(8)] + [record(99, 0, split="test")])
        bundle = load_and_validate(path, 2)
        assert bundle.D == 3
        assert bundle.counts("train") == {0: 2, 1: 2}
        assert bundle.counts("calibration") == {0: 2, 1: 2}
        assert [inst.id for inst in bundle.test] == ["r99"]

    def test_same_seed_same_split(self, tmp_path):
        path = write_lines(tmp_path / "d.jsonl", [record(i, i % 2) for i in range(20)])
        a = load_and_validate(path, 2, seed=4)
        b = load_and_validate(path, 2, seed=4)
        assert [inst.id for inst in a.train] == [inst.id for inst in b.train]

    @pytest.mark.parametrize(
        "bad, code",
        [
            ("{not json", "malformed_record"),
            (json.dumps({"id": "x", "label": 0}), "malformed_record"),
            (json.dumps(record(5, 0, D=4)), "dimension_mismatch"),
            (json.dumps(record(5, 2)), "label_range"),
        ],
    )
    def test_bad_third_line(self, tmp_path, bad, code):
        path = write_lines(tmp_path / "d.jsonl", [record(0, 0), record(1, 1), bad])
        with pytest.raises(DatasetError) as error:
            load_and_validate(path, 2)
        assert error.value.code == code
        assert error.value.line == 3

    def test_duplicate_id(self, tmp_path):
        path = write_lines(tmp_path / "d.jsonl", [record(0, 0, split="test"), record(0, 1, split="test")])
        with pytest.raises(DatasetError) as error:
            load_and_validate(path, 2)
        assert error.value.code == "duplicate_id"

    def test_imbalance(self, tmp_path):
        records = [record(i, 0, split="train") for i in range(3)] + [record(10, 1, split="train")]
        path = write_lines(tmp_path / "d.jsonl", records)
        with pytest.raises(DatasetError) as error:
            load_and_validate(path, 2)
        assert error.value.code == "imbalance"

    def test_imbalance_tolerated(self, tmp_path):
        records = [record(i, 0, split="train") for i in range(3)] + [record(10, 1, split="train")]
        path = write_lines(tmp_path / "d.jsonl", records)
        assert load_and_validate(path, 2, tolerance=2).counts("train") == {0: 3, 1: 1}

    def test_empty(self, tmp_path):
        with pytest.raises(DatasetError) as error:
            load_and_validate(write_lines(tmp_path / "d.jsonl", []), 2)
        assert error.value.code == "empty_dataset"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError) as error:
            load_and_validate(str(tmp_path / "absent.jsonl"), 2)
        assert error.value.code == "unreadable_file"
        assert error.value.line is None

    def test_undecodable_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_bytes((json.dumps(record(0, 0)) + "\n").encode("utf-8") + b'{"id": "\xff"}\n')
        with pytest.raises(DatasetError) as error:
            load_and_validate(str(path), 2)
        assert error.value.code == "unreadable_file"
        assert error.value.line == 2


def test_stratified_split_odd_counts():
    labels = np.array([0, 0, 0, 1, 1, 1, 1])
    first, second = stratified_split(labels, np.random.default_rng(0))
    assert sorted(np.concatenate([first, second]).tolist()) == list(range(7))
    assert np.sum(labels[first] == 0) == 2
    assert np.sum(labels[first] == 1) == 2


class TestLlmResponses:
    def response(self, **fields):
        data = {"answer_letter": "B", "confidence_in_answer_letter": 0.9, "short_explanation_for_answer_confidence": "ok"}
        data.update(fields)
        logprobs = [np.log(0.5), np.log(0.8), np.log(0.5), np.log(0.6), np.log(0.5), np.log(0.7), 0.0]
        record = dict(data, token_logprobs=[{"token": t, "logprob": p} for t, p in zip(RESPONSE_TOKENS, logprobs)])
        return LlmResponseRecord.from_record(record)

    def test_value_spans(self):
        spans = value_token_spans(RESPONSE_TOKENS, RESPONSE_KEYS)
        assert spans == {
            "answer_letter": (1, 2),
            "confidence_in_answer_letter": (3, 4),
            "short_explanation_for_answer_confidence": (5, 6),
        }

    def test_features(self):
        features, refused = build_llm_features(self.response())
        assert not refused
        np.testing.assert_allclose(features, [0.8, 0.6, 0.7, 0.0, 0.9, 0.0, 0.0])

    def test_confidence_clamped(self):
        assert self.response(confidence_in_answer_letter=1.7).confidence == 1.0

    def test_refusal(self):
        features, refused = build_llm_features(self.response(answer_letter="E"))
        assert refused
        assert not features.any()

    def test_positive_logprob(self):
        with pytest.raises(DatasetError):
            LlmResponseRecord(None, ["a"], [0.5])
