"""Options, permutations, label distributions and record sets.

A permutation ``mapping`` says which canonical answer is shown at each
presentation position: ``mapping[pos] = answer``. Label probabilities are
indexed by position, answer probabilities by canonical answer index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    AllZeroMass,
    DimensionMismatch,
    TooManyOptions,
    ValidationError,
)

MAX_OPTIONS = 6
SUM_TOL = 1e-9


class Distribution:
    """Read-only probability vector over ``k >= 2`` outcomes."""

    __slots__ = ("probs",)

    def __init__(self, probs, tol: float = SUM_TOL):
        arr = np.array(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValidationError(f"distribution needs a 1-d vector of length >= 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError(f"distribution entries must be finite and non-negative: {arr.tolist()}")
        total = arr.sum()
        if abs(total - 1.0) > tol:
            raise ValidationError(f"distribution sums to {total!r}, expected 1")
        arr.setflags(write=False)
        self.probs = arr

    @property
    def k(self) -> int:
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.probs if not copy else self.probs.copy()
        return self.probs.astype(dtype)

    def __len__(self):
        return self.probs.size

    def __getitem__(self, idx):
        return self.probs[idx]

    def tolist(self) -> list:
        return self.probs.tolist()

    def __repr__(self):
        return f"Distribution({np.array2string(self.probs, precision=4)})"


def uniform(k: int) -> Distribution:
    return Distribution(np.full(k, 1.0 / k))


@dataclass(frozen=True, order=True)
class Permutation:
    mapping: tuple

    def __post_init__(self):
        m = tuple(int(i) for i in self.mapping)
        if len(m) < 2 or sorted(m) != list(range(len(m))):
            raise ValidationError(f"not a permutation of 0..K-1: {list(self.mapping)}")
        object.__setattr__(self, "mapping", m)

    @classmethod
    def identity(cls, k: int) -> "Permutation":
        return cls(tuple(range(k)))

    @property
    def k(self) -> int:
        return len(self.mapping)

    def __len__(self):
        return len(self.mapping)

    def __iter__(self):
        return iter(self.mapping)

    def __getitem__(self, pos):
        return self.mapping[pos]

    def inverse(self) -> "Permutation":
        inv = [0] * self.k
        for pos, ans in enumerate(self.mapping):
            inv[ans] = pos
        return Permutation(tuple(inv))

    def compose(self, other: "Permutation") -> "Permutation":
        """(self o other)[i] = self[other[i]]."""
        if other.k != self.k:
            raise DimensionMismatch("cannot compose permutations of different size")
        return Permutation(tuple(self.mapping[i] for i in other.mapping))

    def rotate(self, shift: int) -> "Permutation":
        k = self.k
        return Permutation(tuple(self.mapping[(pos + shift) % k] for pos in range(k)))

    def rotations(self) -> list:
        return [self.rotate(r) for r in range(self.k)]

    def position_of(self, answer: int) -> int:
        return self.mapping.index(answer)

    def rank(self) -> int:
        """Index of this permutation in lexicographic order."""
        k = self.k
        r = 0
        for i, v in enumerate(self.mapping):
            smaller = sum(1 for w in self.mapping[i + 1:] if w < v)
            r += smaller * math.factorial(k - 1 - i)
        return r


def as_permutation(p) -> Permutation:
    return p if isinstance(p, Permutation) else Permutation(tuple(p))


def permutation_ranks(mappings: np.ndarray) -> np.ndarray:
    """Vectorised lexicographic rank for an (n, K) array of mappings."""
    mappings = np.asarray(mappings)
    n, k = mappings.shape
    ranks = np.zeros(n, dtype=np.int64)
    for i in range(k - 1):
        smaller = (mappings[:, i + 1:] < mappings[:, i:i + 1]).sum(axis=1)
        ranks += smaller * math.factorial(k - 1 - i)
    return ranks


def enumerate_permutations(k: int) -> list:
    """All K! permutations in lexicographic order."""
    if k < 2:
        raise ValidationError("need at least two options")
    if k > MAX_OPTIONS:
        raise TooManyOptions(f"K={k} exceeds the cap of {MAX_OPTIONS} options")
    return [Permutation(p) for p in itertools.permutations(range(k))]


def permutation_array(k: int) -> np.ndarray:
    """(K!, K) integer array of all permutations, lexicographic."""
    return np.array([p.mapping for p in enumerate_permutations(k)], dtype=np.int64)


@dataclass(frozen=True)
class RawLabelMass:
    """Unnormalised label-token masses plus the mass left on every other token."""

    masses: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        m = np.array(self.masses, dtype=np.float64)
        if m.ndim != 1 or m.size < 2:
            raise ValidationError("label masses must be a vector of length >= 2")
        if not np.all(np.isfinite(m)) or np.any(m < 0) or not self.residual >= 0:
            raise ValidationError("label masses and residual must be non-negative")
        if m.sum() + self.residual > 1 + SUM_TOL:
            raise ValidationError("label masses plus residual exceed 1")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "residual", float(self.residual))

    @property
    def k(self) -> int:
        return self.masses.size


def normalize_labels(raw: RawLabelMass) -> Distribution:
    """Renormalise label masses; the residual is discarded."""
    total = raw.masses.sum()
    if total <= 0:
        raise AllZeroMass("every label has zero mass")
    return Distribution(raw.masses / total)


def answers_from_labels(label_probs: np.ndarray, mappings: np.ndarray) -> np.ndarray:
    """Scatter position-indexed probabilities into canonical answer order.

    Works on (K,) with (K,) or batched (..., K) with matching mappings.
    """
    label_probs = np.asarray(label_probs, dtype=np.float64)
    mappings = np.broadcast_to(np.asarray(mappings), label_probs.shape)
    out = np.empty_like(label_probs)
    np.put_along_axis(out, mappings, label_probs, axis=-1)
    return out


def labels_from_answers(answer_probs: np.ndarray, mappings: np.ndarray) -> np.ndarray:
    """Inverse of :func:`answers_from_labels`: label[pos] = answer[mapping[pos]]."""
    answer_probs = np.asarray(answer_probs, dtype=np.float64)
    mappings = np.broadcast_to(np.asarray(mappings), answer_probs.shape)
    return np.take_along_axis(answer_probs, mappings, axis=-1)


@dataclass(frozen=True)
class PredictionRecord:
    example_id: str
    num_options: int
    permutation: Permutation
    label_probs: Distribution
    gold: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "permutation", as_permutation(self.permutation))
        if not isinstance(self.label_probs, Distribution):
            object.__setattr__(self, "label_probs", Distribution(self.label_probs))
        if not (self.permutation.k == self.label_probs.k == self.num_options):
            raise DimensionMismatch(
                f"record {self.example_id}: num_options={self.num_options}, "
                f"permutation K={self.permutation.k}, label_probs K={self.label_probs.k}"
            )
        if self.gold is not None and not 0 <= self.gold < self.num_options:
            raise ValidationError(f"record {self.example_id}: gold {self.gold} out of range")


def to_answer_space(record: PredictionRecord) -> Distribution:
    return Distribution(answers_from_labels(record.label_probs.probs, record.permutation.mapping))


def decide(dist) -> int:
    """Argmax; ties go to the lowest index (np.argmax returns the first)."""
    return int(np.argmax(np.asarray(dist)))


@dataclass
class ExampleRecords:
    """All recorded permutations for one example."""

    example_id: str
    num_options: int
    gold: Optional[int]
    permutations: list = field(default_factory=list)
    _rows: list = field(default_factory=list, repr=False)
    _index: dict = field(default_factory=dict, repr=False)
    _cache: Optional[np.ndarray] = field(default=None, repr=False)

    def add(self, permutation: Permutation, label_probs) -> None:
        if permutation in self._index:
            raise ValidationError(
                f"example {self.example_id}: duplicate permutation {list(permutation.mapping)}"
            )
        self._index[permutation] = len(self.permutations)
        self.permutations.append(permutation)
        self._rows.append(np.asarray(label_probs, dtype=np.float64))
        self._cache = None

    def __len__(self):
        return len(self.permutations)

    @property
    def label_probs(self) -> np.ndarray:
        """(P, K) label-space probabilities in insertion order."""
        if self._cache is None:
            self._cache = np.stack(self._rows)
            self._cache.setflags(write=False)
        return self._cache

    @property
    def mappings(self) -> np.ndarray:
        return np.array([p.mapping for p in self.permutations], dtype=np.int64)

    @property
    def answer_probs(self) -> np.ndarray:
        return answers_from_labels(self.label_probs, self.mappings)

    @property
    def is_full(self) -> bool:
        return len(self.permutations) == math.factorial(self.num_options)

    def has(self, permutation) -> bool:
        return as_permutation(permutation) in self._index

    def get(self, permutation) -> np.ndarray:
        return self._rows[self._index[as_permutation(permutation)]]

    def sorted_order(self) -> list:
        """Row indices sorted by permutation (lexicographic)."""
        return sorted(range(len(self.permutations)), key=lambda i: self.permutations[i].mapping)

    def label_map(self) -> dict:
        return {p: Distribution(r) for p, r in zip(self.permutations, self._rows)}

    def answer_map(self) -> dict:
        ans = self.answer_probs
        return {p: Distribution(ans[i]) for i, p in enumerate(self.permutations)}


class RecordSet:
    """Records grouped by example id, preserving first-seen order."""

    def __init__(self, records: Iterable[PredictionRecord] = ()):
        self.examples: dict = {}
        for r in records:
            self.add(r)

    def _example(self, example_id: str, num_options: int, gold) -> ExampleRecords:
        ex = self.examples.get(example_id)
        if ex is None:
            ex = ExampleRecords(example_id, num_options, gold)
            self.examples[example_id] = ex
        elif ex.num_options != num_options or ex.gold != gold:
            raise ValidationError(
                f"example {example_id}: inconsistent num_options or gold across records"
            )
        return ex

    def add(self, record: PredictionRecord) -> None:
        ex = self._example(record.example_id, record.num_options, record.gold)
        ex.add(record.permutation, record.label_probs.probs)

    def add_block(self, example_id: str, permutations: Sequence, label_probs: np.ndarray, gold=None) -> None:
        """Bulk insert; rows are validated as distributions."""
        label_probs = np.asarray(label_probs, dtype=np.float64)
        perms = [as_permutation(p) for p in permutations]
        k = label_probs.shape[1]
        ex = self._example(example_id, k, gold)
        if gold is not None and not 0 <= gold < k:
            raise ValidationError(f"example {example_id}: gold {gold} out of range")
        if np.any(label_probs < 0) or np.any(np.abs(label_probs.sum(axis=1) - 1) > SUM_TOL):
            raise ValidationError(f"example {example_id}: label_probs rows are not distributions")
        for p, row in zip(perms, label_probs):
            if p.k != k:
                raise DimensionMismatch(f"example {example_id}: permutation size {p.k} != {k}")
            ex.add(p, row)

    def __len__(self):
        return sum(len(ex) for ex in self.examples.values())

    def __iter__(self) -> Iterator[PredictionRecord]:
        return self.records()

    def __contains__(self, example_id):
        return example_id in self.examples

    def __getitem__(self, example_id) -> ExampleRecords:
        return self.examples[example_id]

    @property
    def example_ids(self) -> list:
        return list(self.examples)

    def records(self) -> Iterator[PredictionRecord]:
        for ex in self.examples.values():
            for p, row in zip(ex.permutations, ex._rows):
                yield PredictionRecord(ex.example_id, ex.num_options, p, Distribution(row), ex.gold)

    def subset(self, example_ids: Iterable[str]) -> "RecordSet":
        out = RecordSet()
        for eid in example_ids:
            out.examples[eid] = self.examples[eid]
        return out

    @property
    def has_gold(self) -> bool:
        return bool(self.examples) and all(ex.gold is not None for ex in self.examples.values())

