"""Sampling access to a teacher: decisions with rejection, hierarchical draws,
and Monte-Carlo reconstruction of the permutation-debiased distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from .core import (
    Distribution,
    Permutation,
    RawLabelMass,
    RecordSet,
    as_permutation,
    permutation_ranks,
)
from .errors import (
    EmptySampleSet,
    PartialPermutationSet,
    RejectionBudgetExceeded,
    ValidationError,
)

REJECTION_BUDGET = 1000


class Teacher(Protocol):
    def num_options(self, example_id: str) -> int: ...

    def label_mass(self, example_id: str, permutation) -> RawLabelMass: ...

    def mass_table(self, example_id: str) -> tuple:
        """(K!, K) label masses and (K!,) residuals, orderings in lexicographic order."""
        ...


class RecordTeacher:
    """File-backed teacher: replays recorded label distributions (no residual)."""

    def __init__(self, records: RecordSet):
        self.records = records
        self._tables: dict = {}

    def num_options(self, example_id: str) -> int:
        return self.records[example_id].num_options

    def label_mass(self, example_id: str, permutation) -> RawLabelMass:
        return RawLabelMass(self.records[example_id].get(permutation), 0.0)

    def mass_table(self, example_id: str) -> tuple:
        hit = self._tables.get(example_id)
        if hit is None:
            ex = self.records[example_id]
            if not ex.is_full:
                raise PartialPermutationSet(
                    f"example {example_id}: sampling a uniform ordering needs all "
                    f"{math.factorial(ex.num_options)} orderings, got {len(ex)}"
                )
            order = ex.sorted_order()
            hit = (ex.label_probs[order], np.zeros(len(order)))
            self._tables[example_id] = hit
        return hit


@dataclass(frozen=True)
class SampleRecord:
    example_id: str
    permutation: Permutation
    sampled_label: int

    def __post_init__(self):
        object.__setattr__(self, "permutation", as_permutation(self.permutation))
        if not 0 <= self.sampled_label < self.permutation.k:
            raise ValidationError(f"sampled_label {self.sampled_label} out of range")

    @property
    def answer(self) -> int:
        """Canonical answer index of the sampled label."""
        return self.permutation.mapping[self.sampled_label]


def sample_decision(raw: RawLabelMass, rng, budget: int = REJECTION_BUDGET) -> int:
    """Draw a token from label masses + residual, redrawing on residual hits."""
    masses = raw.masses
    label_total = masses.sum()
    if label_total <= 0:
        raise RejectionBudgetExceeded("no mass on any label")
    cdf = np.cumsum(masses)
    total = label_total + raw.residual
    for _ in range(budget):
        u = rng.random() * total
        if u < label_total:
            return int(min(np.searchsorted(cdf, u, side="right"), masses.size - 1))
    raise RejectionBudgetExceeded(f"{budget} consecutive draws fell outside the option labels")


def hierarchical_sample(teacher: Teacher, example_id: str, rng) -> SampleRecord:
    """Uniform ordering (Fisher-Yates), then a decision under that ordering."""
    k = teacher.num_options(example_id)
    perm = Permutation(tuple(rng.permutation(k)))
    label = sample_decision(teacher.label_mass(example_id, perm), rng)
    return SampleRecord(example_id, perm, label)


def draw_sample_arrays(teacher: Teacher, example_id: str, n: int, rng,
                       budget: int = REJECTION_BUDGET) -> tuple:
    """Vectorised hierarchical draws: (mappings (n, K), sampled labels (n,))."""
    masses, residual = teacher.mass_table(example_id)
    k = masses.shape[1]
    perms = rng.permuted(np.tile(np.arange(k), (n, 1)), axis=1)
    rows = permutation_ranks(perms)
    cdf = np.cumsum(masses[rows], axis=1)
    label_total = cdf[:, -1]
    total = label_total + residual[rows]
    labels = np.full(n, -1, dtype=np.int64)
    pending = np.arange(n)
    for _ in range(budget):
        if pending.size == 0:
            break
        u = rng.random(pending.size) * total[pending]
        hit = u < label_total[pending]
        idx = pending[hit]
        labels[idx] = np.minimum((u[hit, None] >= cdf[idx]).sum(axis=1), k - 1)
        pending = pending[~hit]
    if pending.size:
        raise RejectionBudgetExceeded(f"{example_id}: {budget} consecutive rejections")
    return perms, labels


def draw_samples(teacher: Teacher, example_id: str, n: int, rng,
                 budget: int = REJECTION_BUDGET) -> list:
    """``n`` hierarchical samples for one example, drawn in a vectorised batch."""
    if n < 1:
        return []
    perms, labels = draw_sample_arrays(teacher, example_id, n, rng, budget)
    return [SampleRecord(example_id, Permutation(tuple(p)), int(l)) for p, l in zip(perms, labels)]


def sample_counts(samples: Iterable[SampleRecord], num_options: int) -> np.ndarray:
    answers = [s.answer for s in samples]
    return np.bincount(np.asarray(answers, dtype=np.int64), minlength=num_options).astype(np.float64)


def mc_debias_estimate(samples, num_options: int = None) -> Distribution:
    """Empirical canonical-answer frequencies; no smoothing."""
    samples = list(samples)
    if not samples:
        raise EmptySampleSet("no samples")
    k = num_options or samples[0].permutation.k
    counts = sample_counts(samples, k)
    return Distribution(counts / counts.sum())


def group_samples(samples: Iterable[SampleRecord]) -> dict:
    out: dict = {}
    for s in samples:
        out.setdefault(s.example_id, []).append(s)
    return out
