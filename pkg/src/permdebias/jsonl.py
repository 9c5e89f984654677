"""JSON-lines readers and writers for records, samples and datasets.

Field names are part of the interchange contract with external runners and
must not change.
"""

from __future__ import annotations

import json
from typing import Iterable

import numpy as np

from .blackbox import SampleRecord
from .core import Distribution, Permutation, PredictionRecord, RecordSet, SUM_TOL
from .errors import PermDebiasError, ValidationError
from .simulate import SPLITS, SyntheticDataset, SyntheticExample

RECORD_FIELDS = ("example_id", "num_options", "permutation", "label_probs", "gold")
SAMPLE_FIELDS = ("example_id", "permutation", "sampled_label")
DATASET_FIELDS = ("example_id", "features", "gold", "split")

# Rows from external dumps may carry printing round-off.
INGEST_TOL = 1e-6


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False) + "\n"


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _check_fields(path, lineno, obj, fields, optional=()):
    missing = [f for f in fields if f not in obj and f not in optional]
    extra = [f for f in obj if f not in fields]
    if missing or extra:
        raise ValidationError(f"{path}:{lineno}: missing fields {missing}, unexpected fields {extra}")


def record_to_json(example_id, num_options, mapping, label_probs, gold) -> dict:
    return {
        "example_id": example_id,
        "num_options": int(num_options),
        "permutation": [int(i) for i in mapping],
        "label_probs": [float(x) for x in label_probs],
        "gold": None if gold is None else int(gold),
    }


def write_records(path, records: RecordSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in records.examples.values():
            rows = ex.label_probs
            for i, p in enumerate(ex.permutations):
                fh.write(_dump(record_to_json(ex.example_id, ex.num_options, p.mapping, rows[i], ex.gold)))


def parse_record(obj: dict, where: str = "") -> PredictionRecord:
    _check_fields(where, "", obj, RECORD_FIELDS, optional=("gold",))
    eid, k, perm, probs, gold = (obj.get(f) for f in RECORD_FIELDS)
    if not isinstance(eid, str):
        raise ValidationError(f"{where}: example_id must be a string")
    if not _is_int(k):
        raise ValidationError(f"{where}: num_options must be an integer")
    if not isinstance(perm, list) or not all(_is_int(i) for i in perm):
        raise ValidationError(f"{where}: permutation must be a list of integers")
    if not isinstance(probs, list) or not all(_is_num(x) for x in probs):
        raise ValidationError(f"{where}: label_probs must be a list of numbers")
    if gold is not None and not _is_int(gold):
        raise ValidationError(f"{where}: gold must be an integer or null")
    arr = np.asarray(probs, dtype=np.float64)
    total = arr.sum() if arr.size else 0.0
    if np.any(arr < 0) or abs(total - 1.0) > INGEST_TOL:
        raise ValidationError(f"{where}: label_probs sum to {total:.6g}, expected 1")
    if abs(total - 1.0) > SUM_TOL:
        arr = arr / total
    try:
        return PredictionRecord(eid, k, Permutation(tuple(perm)), Distribution(arr), gold)
    except PermDebiasError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def read_records(path) -> RecordSet:
    rs = RecordSet()
    for lineno, obj in _lines(path):
        where = f"{path}:{lineno}"
        rec = parse_record(obj, where)
        try:
            rs.add(rec)
        except PermDebiasError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    if not rs.examples:
        raise ValidationError(f"{path}: no records")
    return rs


def write_samples(path, samples: Iterable[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(_dump({
                "example_id": s.example_id,
                "permutation": [int(i) for i in s.permutation.mapping],
                "sampled_label": int(s.sampled_label),
            }))


def read_samples(path) -> list:
    out = []
    for lineno, obj in _lines(path):
        where = f"{path}:{lineno}"
        _check_fields(path, lineno, obj, SAMPLE_FIELDS)
        if not isinstance(obj["example_id"], str) or not _is_int(obj["sampled_label"]):
            raise ValidationError(f"{where}: bad example_id or sampled_label")
        if not isinstance(obj["permutation"], list) or not all(_is_int(i) for i in obj["permutation"]):
            raise ValidationError(f"{where}: permutation must be a list of integers")
        try:
            out.append(SampleRecord(obj["example_id"], Permutation(tuple(obj["permutation"])), obj["sampled_label"]))
        except PermDebiasError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return out


def write_dataset(path, dataset: SyntheticDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset.examples:
            fh.write(_dump({
                "example_id": ex.example_id,
                "features": [[float(x) for x in row] for row in ex.features],
                "gold": int(ex.gold),
                "split": ex.split,
            }))


def read_dataset(path) -> SyntheticDataset:
    examples = []
    for lineno, obj in _lines(path):
        where = f"{path}:{lineno}"
        _check_fields(path, lineno, obj, DATASET_FIELDS)
        feats = obj["features"]
        if (not isinstance(feats, list) or not feats or not all(isinstance(r, list) for r in feats)
                or len({len(r) for r in feats}) != 1 or not all(_is_num(x) for r in feats for x in r)):
            raise ValidationError(f"{where}: features must be a rectangular K x d list of numbers")
        if not _is_int(obj["gold"]) or not 0 <= obj["gold"] < len(feats):
            raise ValidationError(f"{where}: gold must index an answer")
        if obj["split"] not in SPLITS:
            raise ValidationError(f"{where}: split must be one of {list(SPLITS)}")
        examples.append(SyntheticExample(obj["example_id"], np.asarray(feats, dtype=np.float64),
                                         obj["gold"], obj["split"]))
    if not examples:
        raise ValidationError(f"{path}: no examples")
    return SyntheticDataset(examples)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
