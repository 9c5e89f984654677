"""Divergences, permutation sensitivity and positional bias."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import Distribution, ExampleRecords, RecordSet
from .errors import DimensionMismatch, InsufficientPermutations, MissingGold, ValidationError

KL_EPS = 1e-12


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"distributions of size {p.shape} and {q.shape}")
    return p, q


def total_variation(p, q) -> float:
    p, q = _pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    """KL(p || q) with q clamped below at ``eps``; zero-mass terms of p drop out."""
    p, q = _pair(p, q)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], eps))))


DIVERGENCES = {"tv": total_variation, "kl": kl_divergence}


def _check_divergence(name: str) -> str:
    if name not in DIVERGENCES:
        raise ValidationError(f"unknown divergence {name!r}; choose from {sorted(DIVERGENCES)}")
    return name


def pairwise_divergence_matrix(dists: np.ndarray, divergence: str = "tv") -> np.ndarray:
    """D[..., j, m] = D(dists[..., j, :] ; dists[..., m, :]) for stacked rows."""
    a = dists[..., :, None, :]
    b = dists[..., None, :, :]
    if divergence == "tv":
        return 0.5 * np.abs(a - b).sum(axis=-1)
    if divergence == "kl":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(a > 0, a * np.log(a / np.maximum(b, KL_EPS)), 0.0)
        return terms.sum(axis=-1)
    raise ValidationError(f"unknown divergence {divergence!r}")


def mean_pairwise_divergence(dists: np.ndarray, divergence: str = "tv") -> np.ndarray:
    """Mean divergence over ordered pairs j != m along the second-to-last axis.

    For a symmetric divergence this equals the mean over unordered pairs.
    """
    n = dists.shape[-2]
    if n < 2:
        raise InsufficientPermutations("need at least two permutations")
    d = pairwise_divergence_matrix(dists, divergence)
    return d.sum(axis=(-2, -1)) / (n * (n - 1))


def _answer_rows(example) -> np.ndarray:
    if isinstance(example, ExampleRecords):
        return example.answer_probs
    if isinstance(example, Mapping):
        return np.array([np.asarray(d, dtype=np.float64) for d in example.values()])
    return np.asarray(example, dtype=np.float64)


def _label_rows(example) -> np.ndarray:
    if isinstance(example, ExampleRecords):
        return example.label_probs
    if isinstance(example, Mapping):
        return np.array([np.asarray(d, dtype=np.float64) for d in example.values()])
    return np.asarray(example, dtype=np.float64)


def permutation_sensitivity(example, divergence: str = "tv") -> float:
    """Expected divergence between answer distributions of two distinct orderings.

    ``example`` is an :class:`ExampleRecords` or a mapping permutation ->
    answer-space distribution.
    """
    rows = _answer_rows(example)
    if rows.shape[0] < 2:
        raise InsufficientPermutations(f"permutation sensitivity needs >= 2 permutations, got {rows.shape[0]}")
    return float(mean_pairwise_divergence(rows, _check_divergence(divergence)))


def positional_distribution(example) -> Distribution:
    """Mean label-space distribution over the recorded permutations.

    ``example`` is an :class:`ExampleRecords` or a mapping permutation ->
    label-space distribution.
    """
    rows = _label_rows(example)
    return Distribution(rows.mean(axis=0))


def positional_bias(example, divergence: str = "tv") -> float:
    pos = positional_distribution(example)
    return DIVERGENCES[_check_divergence(divergence)](pos.probs, np.full(pos.k, 1.0 / pos.k))


def _example_accuracy(ex: ExampleRecords, policy: str) -> float:
    ans = ex.answer_probs
    if policy == "argmax":
        return float(np.mean(np.argmax(ans, axis=1) == ex.gold))
    if policy == "sampled":
        return float(np.mean(ans[:, ex.gold]))
    raise ValidationError(f"unknown accuracy policy {policy!r}")


def accuracy(records: RecordSet, policy: str = "argmax") -> float:
    """Accuracy averaged over each example's permutations, then over examples.

    ``argmax`` scores the white-box decision; ``sampled`` is the exact expected
    accuracy of a single draw from each distribution.
    """
    if not records.examples:
        raise MissingGold("no examples")
    scores = []
    for ex in records.examples.values():
        if ex.gold is None:
            raise MissingGold(f"example {ex.example_id} has no gold label")
        scores.append(_example_accuracy(ex, policy))
    return float(np.mean(scores))


@dataclass
class BiasReport:
    per_example: dict
    aggregate: dict
    divergence: str = "tv"
    estimate: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "divergence": self.divergence,
            "estimate": self.estimate,
            "aggregate": self.aggregate,
            "per_example": self.per_example,
        }
        out.update(self.extra)
        return out


def bias_report(records: RecordSet, divergence: str = "tv") -> BiasReport:
    """Per-example ps/pb plus dataset means and (when gold exists) accuracies.

    Examples with a single recorded permutation get ps = None; the mean is
    taken over examples where it is defined.
    """
    _check_divergence(divergence)
    per_example = {}
    ps_vals, pb_vals = [], []
    any_estimate = False
    for ex in records.examples.values():
        estimate = len(ex) < math.factorial(ex.num_options)
        any_estimate |= estimate
        ps = permutation_sensitivity(ex, divergence) if len(ex) >= 2 else None
        pb = positional_bias(ex, divergence)
        per_example[ex.example_id] = {"ps": ps, "pb": pb, "estimate": estimate}
        if ps is not None:
            ps_vals.append(ps)
        pb_vals.append(pb)
    aggregate = {
        "n_examples": len(records.examples),
        "n_records": len(records),
        "ps": float(np.mean(ps_vals)) if ps_vals else None,
        "pb": float(np.mean(pb_vals)) if pb_vals else None,
    }
    if records.has_gold:
        aggregate["accuracy"] = accuracy(records, "argmax")
        aggregate["accuracy_sampled"] = accuracy(records, "sampled")
    return BiasReport(per_example, aggregate, divergence, any_estimate)
